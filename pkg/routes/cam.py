from fastapi import APIRouter, Path

from model_store import get_model_store
from models import CamRequest, CamResponse, SampleCamResponse
from services.inference_service import InferenceService

router = APIRouter(tags=["CAM"])

# ==================== CAM FOR AN IMAGE ====================

@router.post(
    "/cam",
    response_model=CamResponse,
    summary="Class activation maps for an image"
)
async def cam_for_image(request: CamRequest):
    """
    Controller for CAM inference on a posted image.
    Delegates to InferenceService.
    """
    service = InferenceService(get_model_store())
    return await service.cam_for_image(request)


# ==================== CAM FOR A DATASET SAMPLE ====================

@router.get(
    "/samples/{split}/{sample_id}",
    response_model=SampleCamResponse,
    summary="Class activation maps and IoU for a dataset sample"
)
async def cam_for_sample(
    split: str = Path(..., description="Dataset split", examples=["train", "val"]),
    sample_id: int = Path(..., description="Sample index within the split")
):
    """
    Controller for CAM inference on a stored sample, scored against its mask.
    """
    service = InferenceService(get_model_store())
    return await service.cam_for_sample(split, sample_id)
