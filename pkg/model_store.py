from dataclasses import dataclass
from typing import Optional

from classnet import ClassNet
from config import RunConfig, ServeSettings, resolve_config, run_config_for_checkpoint
from logger import logger
from synthdata import SceneDataset, load_dataset
from services.evaluation_service import load_net


@dataclass
class ModelStore:
    """Everything the HTTP app serves from: a trained net, its config and optional dataset."""
    config: RunConfig
    net: Optional[ClassNet] = None
    dataset: Optional[SceneDataset] = None


# Global store, set up by the app lifespan
store: Optional[ModelStore] = None


async def load_model_store(settings: Optional[ServeSettings] = None):
    """
    Load the checkpoint and dataset named by MIXCAM_CHECKPOINT / MIXCAM_DATA.
    Without MIXCAM_RUN_CONFIG the checkpoint's run directory supplies the config.

    Missing settings are not fatal: the app starts and the CAM endpoints
    answer 503 until a model is available.
    """
    global store
    settings = settings or ServeSettings()
    try:
        run_config = settings.run_config
        if run_config is None and settings.checkpoint:
            run_config = run_config_for_checkpoint(settings.checkpoint)
            if run_config is not None:
                logger.info(f"📄 Using run config {run_config}")
        config = resolve_config(run_config)
        net = None
        if settings.checkpoint:
            net = load_net(settings.checkpoint, config)
        else:
            logger.warning("⚠️  No checkpoint configured (MIXCAM_CHECKPOINT); CAM endpoints will return 503")
        dataset = load_dataset(settings.data) if settings.data else None
        store = ModelStore(config=config, net=net, dataset=dataset)
        logger.info(
            f"✅ Model store ready: model={'yes' if net else 'no'}, dataset={'yes' if dataset else 'no'}"
        )
    except Exception as e:
        logger.error(f"❌ Error loading model store: {e}")
        raise


async def close_model_store():
    global store
    if store:
        store = None
        logger.info("✅ Model store released")


def get_model_store() -> Optional[ModelStore]:
    return store
