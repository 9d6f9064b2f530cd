from __future__ import annotations

import logging
import os

from fastapi import FastAPI

from vtpm_lab.routers.pca import router as pca_router
from vtpm_lab.routers.registry import router as registry_router
from vtpm_lab.services.authorities import get_authorities


logger = logging.getLogger("vtpm-lab")


def create_app() -> FastAPI:
    app = FastAPI(title="vtpm-lab trusted third parties (Privacy CA + cloud registry)")

    @app.on_event("startup")
    async def open_authorities() -> None:
        # PCA key and registry exist before the first request.
        authorities = get_authorities()
        startup_logger = logging.getLogger("uvicorn.error")
        base_url = os.getenv("VTPM_LAB_BASE_URL", "http://localhost:8000").rstrip("/")
        lines = [
            f"Privacy CA id={authorities.pca.pca_id.hex()[:16]} allowlist={len(authorities.pca.policy.allowlist)}",
            f"Workspace root: {authorities.settings.root}",
        ]
        if app.docs_url:
            lines.append(f"Swagger UI: {base_url}{app.docs_url}")
        for line in lines:
            logger.info("[app/startup] %s", line)
            startup_logger.info(line)

    @app.get("/health")
    def health() -> dict[str, str]:
        return {"status": "ok"}

    @app.get("/version")
    def version() -> dict[str, str]:
        return {
            "name": "vtpm-lab",
            "version": os.getenv("VERSION", "dev"),
            "gitSha": os.getenv("GIT_SHA", "unknown"),
            "buildTime": os.getenv("BUILD_TIME", "unknown"),
        }

    app.include_router(pca_router)
    app.include_router(registry_router)

    return app


app = create_app()
