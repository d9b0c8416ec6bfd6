from typing import Optional

import numpy as np
from fastapi import HTTPException, status
from starlette.concurrency import run_in_threadpool

from classnet import ResponseMap, normalize_maps
from diffcore import Tensor, no_grad
from diffcore import ops
from errors import FormatError, LabelError, MixcamError, ShapeError, UnknownSampleError
from evalkit import iou, pseudo_labels
from logger import logger
from model_store import ModelStore
from models import CamRequest, CamResponse, SampleCamResponse
from synthdata import SPLITS


class InferenceService:
    """
    Service layer for CAM inference over the loaded model.
    Translates toolkit errors into HTTP errors for the route layer.
    """

    def __init__(self, store: Optional[ModelStore]):
        """
        Initialize with the model store.

        Args:
            store: loaded model store, or None before startup finished
        """
        self.store = store

    def _require_model(self):
        if self.store is None or self.store.net is None:
            logger.warning("⚠️  CAM requested but no model is loaded")
            raise HTTPException(status_code=status.HTTP_503_SERVICE_UNAVAILABLE, detail="No model loaded")
        return self.store.net

    def _compute(self, image: np.ndarray, labels: Optional[np.ndarray]) -> CamResponse:
        net = self._require_model()
        cfg = net.config
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if image.shape != expected:
            raise ShapeError("cam", [image.shape, expected], "image must be 3×H×W at the model resolution")
        if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
            raise FormatError("image values must lie in [0, 1]")

        with no_grad():
            logits, cam = net.forward(Tensor(image))
            probabilities = ops.sigmoid(logits).data

        if labels is None:
            valid = [int(c) for c in np.flatnonzero(probabilities >= 0.5)]
        else:
            if labels.shape != (cfg.num_classes,):
                raise LabelError(f"label vector must have {cfg.num_classes} entries, got {labels.shape[0]}")
            if labels.min() < 0.0 or labels.max() > 1.0:
                raise LabelError("label entries must lie in [0, 1]")
            valid = [int(c) for c in np.flatnonzero(labels > 0)]

        response = ResponseMap(raw=cam, valid=tuple(valid))
        response.normalized = normalize_maps(cam)
        mask, empty = pseudo_labels(response, valid, self.store.config.pseudo_label_config(), cfg.image_size)
        return CamResponse(
            logits=logits.data.tolist(),
            probabilities=probabilities.tolist(),
            valid_classes=valid,
            normalized_maps=response.normalized.data.tolist(),
            pseudo_label=mask.astype(int).tolist(),
            no_valid_classes=empty,
        )

    async def cam_for_image(self, request: CamRequest) -> CamResponse:
        """
        CAM, probabilities and pseudo label for a posted image.
        """
        try:
            image = np.asarray(request.image, dtype=np.float64)
        except ValueError:
            logger.warning("⚠️  Ragged image payload")
            raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail="image must be a 3×H×W array")
        labels = None if request.labels is None else np.asarray(request.labels, dtype=np.float64)
        logger.info(f"🔥 CAM request for image of shape {image.shape}")

        try:
            result = await run_in_threadpool(self._compute, image, labels)
        except (ShapeError, LabelError, FormatError) as e:
            logger.warning(f"⚠️  Rejected CAM request: {e}")
            raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
        except HTTPException:
            raise
        except Exception as e:
            logger.error(f"❌ Error computing CAM: {e}")
            raise

        logger.info(f"✅ CAM computed: valid classes {result.valid_classes}")
        return result

    async def cam_for_sample(self, split: str, sample_id: int) -> SampleCamResponse:
        """
        CAM for a dataset sample using its image-level label, plus IoU
        of the pseudo label against the ground-truth mask.
        """
        net = self._require_model()
        if self.store.dataset is None:
            logger.warning("⚠️  Sample requested but no dataset is loaded")
            raise HTTPException(status_code=status.HTTP_503_SERVICE_UNAVAILABLE, detail="No dataset loaded")
        if split not in SPLITS:
            raise HTTPException(
                status_code=status.HTTP_404_NOT_FOUND,
                detail=f"Unknown split '{split}', expected one of {', '.join(SPLITS)}",
            )

        try:
            sample = self.store.dataset.split(split).get(sample_id)
        except UnknownSampleError as e:
            logger.warning(f"⚠️  {e}")
            raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=str(e))

        try:
            result = await run_in_threadpool(self._compute, sample.image, sample.label.astype(np.float64))
            report = iou(np.asarray(result.pseudo_label), sample.mask, net.config.num_classes)
        except (ShapeError, LabelError, FormatError) as e:
            logger.warning(f"⚠️  Sample {split}/{sample_id} does not fit the model: {e}")
            raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
        except MixcamError as e:
            logger.error(f"❌ Error computing CAM for sample {split}/{sample_id}: {e}")
            raise

        logger.info(f"✅ Sample {split}/{sample_id}: mIoU {report.miou:.4f}")
        return SampleCamResponse(
            **result.model_dump(),
            split=split,
            sample_id=sample_id,
            label=[int(v) for v in sample.label],
            iou=report,
        )
