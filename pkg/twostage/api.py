"""
Segmentation API
================

Router mounted by main.py:

    POST /api/v1/segment         image on the server's filesystem
    POST /api/v1/segment-upload  multipart .mha upload
    POST /api/v1/evaluate        Dice and box errors of two mask files

The bundle is loaded once, lazily, from SEGMENTATION_BUNDLE_DIR. Inference
is deterministic, so results are cached by the SHA-256 of the input volume.
"""

from collections import defaultdict
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Tuple
import logging
import os
import tempfile
import threading
import time

from fastapi import APIRouter, File, HTTPException, UploadFile
from starlette.concurrency import run_in_threadpool

from foundation.core.errors import SegmentationError
from foundation.core.metadata import calculate_content_hash
from foundation.core.metaimage import read_volume, write_volume
from foundation.core.volume import Volume

from .models import EvaluateRequest, EvaluateResponse, SegmentRequest, SegmentResponse
from .pipeline import PipelineBundle, evaluate, segment_with_trace

logger = logging.getLogger(__name__)

router = APIRouter()

BUNDLE_ENV = "SEGMENTATION_BUNDLE_DIR"


# ============================================================================
# RESPONSE CACHING
# ============================================================================

class ResponseCache:
    """Segmentation results keyed by input content hash, with expiry"""

    def __init__(self, ttl_seconds: int = 1800, max_items: int = 32):
        self.ttl_seconds = ttl_seconds
        self.max_items = max_items
        self.cache: Dict[str, Tuple[Any, float]] = {}
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def get(self, key: str) -> Optional[Any]:
        with self._lock:
            if key in self.cache:
                value, expires_at = self.cache[key]
                if time.time() < expires_at:
                    self.hits += 1
                    return value
                del self.cache[key]
            self.misses += 1
            return None

    def set(self, key: str, value: Any) -> None:
        with self._lock:
            if len(self.cache) >= self.max_items and key not in self.cache:
                oldest = min(self.cache, key=lambda k: self.cache[k][1])
                del self.cache[oldest]
            self.cache[key] = (value, time.time() + self.ttl_seconds)

    def clear(self) -> None:
        with self._lock:
            self.cache.clear()
            self.hits = 0
            self.misses = 0

    def stats(self) -> Dict[str, Any]:
        total = self.hits + self.misses
        hit_rate = self.hits / total if total > 0 else 0
        return {
            "hits": self.hits,
            "misses": self.misses,
            "hit_rate": round(hit_rate, 3),
            "cached_items": len(self.cache),
        }


# ============================================================================
# PERFORMANCE MONITORING
# ============================================================================

class PerformanceMonitor:
    """Track API endpoint performance"""

    def __init__(self):
        self.metrics = defaultdict(lambda: {
            "count": 0,
            "total_time": 0.0,
            "errors": 0,
            "last_call": None,
        })

    def record_call(self, endpoint: str, duration_ms: float, error: bool = False):
        m = self.metrics[endpoint]
        m["count"] += 1
        m["total_time"] += duration_ms
        if error:
            m["errors"] += 1
        m["last_call"] = datetime.now().isoformat()

    def get_stats(self, endpoint: Optional[str] = None) -> Dict[str, Any]:
        if endpoint:
            m = self.metrics[endpoint]
            return {
                "endpoint": endpoint,
                "calls": m["count"],
                "avg_duration_ms": round(m["total_time"] / m["count"], 2) if m["count"] > 0 else 0,
                "error_rate": round(m["errors"] / m["count"], 3) if m["count"] > 0 else 0,
                "last_call": m["last_call"],
            }
        return {ep: self.get_stats(ep) for ep in list(self.metrics.keys())}


cache = ResponseCache(ttl_seconds=1800)
perf_monitor = PerformanceMonitor()


# ============================================================================
# BUNDLE
# ============================================================================

_bundle: Optional[PipelineBundle] = None
_bundle_lock = threading.Lock()


def set_bundle(bundle: Optional[PipelineBundle]) -> None:
    """Install a bundle directly (tests, embedding) and drop cached results"""
    global _bundle
    with _bundle_lock:
        _bundle = bundle
    cache.clear()


def bundle_loaded() -> bool:
    return _bundle is not None


def get_bundle() -> PipelineBundle:
    global _bundle
    with _bundle_lock:
        if _bundle is None:
            directory = os.getenv(BUNDLE_ENV)
            if not directory:
                raise HTTPException(status_code=503, detail=f"No model bundle configured; set {BUNDLE_ENV}")
            try:
                _bundle = PipelineBundle.load(directory)
            except FileNotFoundError as e:
                raise HTTPException(status_code=503, detail=str(e))
            logger.info(f"Loaded model bundle from {directory}")
        return _bundle


# ============================================================================
# HELPERS
# ============================================================================

def _run_segmentation(image: Volume, request: SegmentRequest) -> SegmentResponse:
    start_time = time.perf_counter()
    bundle = get_bundle()
    key = calculate_content_hash(image)

    hit = cache.get(key)
    cached = hit is not None
    if cached:
        summary, mask, global_prob = hit
    else:
        trace = segment_with_trace(bundle, image)
        summary, mask, global_prob = trace.summary(), trace.mask, trace.global_prob
        cache.set(key, (summary, mask, global_prob))

    response = SegmentResponse(
        foreground_voxels=summary["foreground_voxels"],
        volume_ml=summary["volume_ml"],
        dims=list(mask.dims),
        global_max_probability=summary["global_max_probability"],
        box=summary["box"] if request.emit_box else None,
        fit=summary["fit"] if request.emit_box else None,
        content_hash=key,
        elapsed_ms=0.0,
        cached=cached,
    )
    if request.output_path:
        response.output_path = str(write_volume(mask, request.output_path))
    if request.emit_global_prob:
        if request.output_path:
            target = Path(request.output_path)
            prob_path = target.with_name(f"{target.stem}_global_prob{target.suffix}")
        else:
            prob_path = Path(tempfile.gettempdir()) / f"{key[:16]}_global_prob.mha"
        response.global_prob_path = str(write_volume(global_prob, prob_path, "MET_FLOAT"))
    response.elapsed_ms = round((time.perf_counter() - start_time) * 1000, 2)
    return response


def _failure(endpoint: str, start_time: float, status: int, detail: str) -> HTTPException:
    perf_monitor.record_call(endpoint, (time.perf_counter() - start_time) * 1000, error=True)
    logger.error(f"{endpoint} failed ({status}): {detail}")
    return HTTPException(status_code=status, detail=detail)


# ============================================================================
# ENDPOINTS
# ============================================================================

@router.post("/segment", response_model=SegmentResponse)
def segment_file(request: SegmentRequest):
    """Segment an image file readable by the server"""
    endpoint = "/api/v1/segment"
    start_time = time.perf_counter()
    try:
        image = read_volume(request.image_path)
        response = _run_segmentation(image, request)
    except HTTPException:
        raise
    except FileNotFoundError as e:
        raise _failure(endpoint, start_time, 404, str(e))
    except SegmentationError as e:
        raise _failure(endpoint, start_time, 422, str(e))
    perf_monitor.record_call(endpoint, (time.perf_counter() - start_time) * 1000)
    return response


@router.post("/segment-upload", response_model=SegmentResponse)
async def segment_upload(file: UploadFile = File(...), emit_box: bool = True):
    """Segment an uploaded single-file .mha volume"""
    endpoint = "/api/v1/segment-upload"
    start_time = time.perf_counter()
    if not (file.filename or "").lower().endswith(".mha"):
        raise _failure(endpoint, start_time, 400, "Upload a single-file .mha volume")

    payload = await file.read()
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "upload.mha"
        path.write_bytes(payload)
        try:
            image = read_volume(path)
        except SegmentationError as e:
            raise _failure(endpoint, start_time, 422, str(e))

    try:
        response = await run_in_threadpool(
            _run_segmentation, image, SegmentRequest(image_path=file.filename, emit_box=emit_box)
        )
    except HTTPException:
        raise
    except SegmentationError as e:
        raise _failure(endpoint, start_time, 422, str(e))
    perf_monitor.record_call(endpoint, (time.perf_counter() - start_time) * 1000)
    return response


@router.post("/evaluate", response_model=EvaluateResponse)
def evaluate_files(request: EvaluateRequest):
    """Dice and tight-box errors between two mask files"""
    endpoint = "/api/v1/evaluate"
    start_time = time.perf_counter()
    try:
        result = evaluate(read_volume(request.pred_path), read_volume(request.gt_path))
    except FileNotFoundError as e:
        raise _failure(endpoint, start_time, 404, str(e))
    except SegmentationError as e:
        raise _failure(endpoint, start_time, 422, str(e))
    perf_monitor.record_call(endpoint, (time.perf_counter() - start_time) * 1000)
    return EvaluateResponse(
        dice=result.dice,
        start_errors_mm=list(result.start_errors),
        end_errors_mm=list(result.end_errors),
        size_errors_mm=list(result.size_errors),
    )
