"""
Service models
==============

Request and response bodies of the segmentation service.
"""

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field


# ============================================================================
# SEGMENTATION
# ============================================================================

class SegmentRequest(BaseModel):
    """Segment a volume that already sits on the server's filesystem"""
    image_path: str = Field(..., description="Path of a .mhd or .mha image")
    output_path: Optional[str] = Field(None, description="Where to write the final mask")
    emit_global_prob: bool = Field(False, description="Also write the global probability map")
    emit_box: bool = Field(False, description="Include the fitted box in the response")

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "image_path": "/data/case07.mha",
                "output_path": "/data/case07_seg.mha",
                "emit_global_prob": False,
                "emit_box": True,
            }
        }
    )


class BoxInfo(BaseModel):
    start_mm: List[float] = Field(..., description="Box start per axis")
    end_mm: List[float] = Field(..., description="Box end per axis")
    size_mm: List[float] = Field(..., description="Box size per axis")


class SegmentResponse(BaseModel):
    """Summary of one segmentation"""
    foreground_voxels: int = Field(..., description="Voxels in the final mask")
    volume_ml: float = Field(..., description="Segmented volume in millilitres")
    dims: List[int] = Field(..., description="Grid dims of the mask (= image dims)")
    global_max_probability: float = Field(..., description="Peak of the global probability map")
    box: Optional[BoxInfo] = Field(None, description="Localized box, when requested")
    fit: Optional[Dict[str, Any]] = Field(None, description="Shape-fit pose and objective, when requested")
    output_path: Optional[str] = None
    global_prob_path: Optional[str] = None
    content_hash: str = Field(..., description="SHA-256 of the input image")
    elapsed_ms: float
    cached: bool = False


# ============================================================================
# EVALUATION
# ============================================================================

class EvaluateRequest(BaseModel):
    pred_path: str = Field(..., description="Predicted mask")
    gt_path: str = Field(..., description="Ground-truth mask on the same grid")


class EvaluateResponse(BaseModel):
    dice: float = Field(..., ge=0.0, le=1.0)
    start_errors_mm: List[float]
    end_errors_mm: List[float]
    size_errors_mm: List[float]
