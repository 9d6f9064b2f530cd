"""vtpm-lab application shell.

Keeps the operator CLI and the FastAPI entrypoint (app.py) apart from the
domain package `vtpm`.
"""
