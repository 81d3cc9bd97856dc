"""
Stage tracking
==============

Provides a decorator and utilities to track pipeline stages:
- how long each stage took
- whether it succeeded
- a content hash of its output (to prove bit-identical reruns)
"""

from functools import wraps
from typing import Any, Optional
import hashlib
import logging
import time

import numpy as np

from .database import store_stage_timing
from .volume import Volume

logger = logging.getLogger(__name__)


def calculate_content_hash(data: Any) -> str:
    """SHA-256 over array bytes (plus geometry for volumes)"""
    digest = hashlib.sha256()
    if isinstance(data, Volume):
        digest.update(np.ascontiguousarray(data.data).tobytes())
        digest.update(str(data.data.dtype).encode())
        digest.update(repr((data.spacing, data.origin)).encode())
    elif isinstance(data, dict):
        for key in sorted(data):
            digest.update(str(key).encode())
            digest.update(calculate_content_hash(data[key]).encode())
    elif isinstance(data, (list, tuple)):
        for item in data:
            digest.update(calculate_content_hash(item).encode())
    elif isinstance(data, np.ndarray):
        digest.update(np.ascontiguousarray(data).tobytes())
        digest.update(repr(data.shape).encode())
    elif isinstance(data, bytes):
        digest.update(data)
    else:
        digest.update(repr(data).encode())
    return digest.hexdigest()


def _hashable_output(result: Any) -> Optional[Any]:
    if isinstance(result, (Volume, np.ndarray)):
        return result
    if isinstance(result, tuple) and result and isinstance(result[0], (Volume, np.ndarray)):
        return result[0]
    return None


def track_stage(stage_id: str):
    """
    Decorator that times a pipeline stage, logs it, and records it in the run
    ledger when one is configured.

    Usage:
        @track_stage("fit_shape")
        def fit_shape(model, prob, cfg):
            ...
    """

    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            start_time = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                elapsed_ms = (time.perf_counter() - start_time) * 1000
                logger.error(f"Stage {stage_id} failed after {elapsed_ms:.1f} ms: {e}")
                store_stage_timing(stage_id, elapsed_ms, success=False, error_message=str(e))
                raise

            elapsed_ms = (time.perf_counter() - start_time) * 1000
            output = _hashable_output(result)
            content_hash = calculate_content_hash(output) if output is not None else None
            logger.info(f"Stage {stage_id} done in {elapsed_ms:.1f} ms")
            store_stage_timing(stage_id, elapsed_ms, success=True, content_hash=content_hash)
            return result

        return wrapper
    return decorator
