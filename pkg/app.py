"""Compatibility entrypoint.

Keep this file small.

- `uvicorn app:app ...` serves the Privacy CA and the cloud registry.
- Tests that do `from app import app` keep working.
"""

from vtpm_lab.main import app
