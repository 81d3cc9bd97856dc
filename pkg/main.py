"""
Two-Stage Volumetric Segmentation Service
=========================================

Serves the coarse-to-fine pipeline over HTTP:
- global network on an isotropic, cropped view of the image
- shape-model fit to the global probability map to find the organ's box
- local network on the box, resampled to a fixed normalized size
- threshold and morphological opening on the original grid

Model files come from the bundle directory named by SEGMENTATION_BUNDLE_DIR;
the optional run ledger from SEGMENTATION_DB_URL.
"""

from datetime import datetime
import logging
import os

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from foundation.core.database import configure_database, get_recent_evaluations, ledger_enabled
from twostage.api import BUNDLE_ENV, bundle_loaded, cache, perf_monitor, router

# ============================================================================
# LOGGING SETUP
# ============================================================================
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

VERSION = "1.0.0"

# ============================================================================
# FastAPI App Setup
# ============================================================================

app = FastAPI(
    title="Two-Stage Volumetric Segmentation",
    description="Global CNN, shape-model localization and local CNN refinement of 3-D images",
    version=VERSION,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(router, prefix="/api/v1", tags=["segmentation"])

# ============================================================================
# ADMIN & MONITORING ENDPOINTS
# ============================================================================

@app.get("/")
async def root():
    return {
        "service": "Two-Stage Volumetric Segmentation",
        "version": VERSION,
        "status": "operational",
        "endpoints": {
            "segment": "/api/v1/segment",
            "segment_upload": "/api/v1/segment-upload",
            "evaluate": "/api/v1/evaluate",
            "health": "/health/detailed",
            "cache_stats": "/admin/cache-stats",
            "performance": "/admin/performance",
        },
    }


@app.get("/health")
async def health():
    return {
        "status": "healthy",
        "timestamp": datetime.now().isoformat(),
        "version": VERSION,
    }


@app.get("/health/detailed")
async def detailed_health():
    """Comprehensive health check"""
    return {
        "status": "healthy",
        "timestamp": datetime.now().isoformat(),
        "version": VERSION,
        "bundle_dir": os.getenv(BUNDLE_ENV),
        "bundle_loaded": bundle_loaded(),
        "ledger_enabled": ledger_enabled(),
        "recent_evaluations": len(get_recent_evaluations(limit=20)),
        "cache": cache.stats(),
        "performance": perf_monitor.get_stats(),
    }


@app.get("/admin/cache-stats")
async def cache_stats():
    """Cache statistics"""
    return cache.stats()


@app.get("/admin/performance")
async def performance_stats():
    """Performance statistics"""
    return perf_monitor.get_stats()

# ============================================================================
# STARTUP
# ============================================================================

@app.on_event("startup")
async def startup_event():
    logger.info("=" * 60)
    logger.info(f"Two-stage segmentation service {VERSION} starting")
    logger.info(f"Bundle directory: {os.getenv(BUNDLE_ENV) or '(not set)'}")
    if configure_database():
        logger.info("Run ledger enabled")
    logger.info("=" * 60)


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
