import pytest
import pytest_asyncio
import numpy as np
from httpx import AsyncClient, ASGITransport
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Configure pytest-asyncio
pytest_plugins = ('pytest_asyncio',)

# Small enough for a full train/eval cycle in a few seconds
TINY_SETTINGS = {
    "num_classes": 3,
    "image_size": 16,
    "shapes_min": 1,
    "shapes_max": 2,
    "train_size": 16,
    "val_size": 8,
    "block_channels": (4, 8),
    "block_strides": (2, 2),
    "epochs": 1,
    "batch_size": 4,
    "workers": 2,
    "seed": 3,
}


@pytest.fixture
def rng():
    """Seeded generator so every test sees the same draws."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config(tmp_path):
    """
    Run configuration for a 16px, 3-class problem writing into tmp_path.
    """
    from config import build_config
    return build_config({**TINY_SETTINGS, "out_dir": str(tmp_path / "run")})


@pytest.fixture
def tiny_dataset(tiny_config):
    from synthdata import generate_dataset
    return generate_dataset(tiny_config.dataset_config(), workers=tiny_config.workers)


@pytest.fixture
def tiny_net(tiny_config):
    from classnet import ClassNet
    return ClassNet(tiny_config.net_config(), seed=tiny_config.seed)


@pytest_asyncio.fixture(scope="function")
async def test_client(tiny_config, tiny_net, tiny_dataset):
    """
    Create a test client for API testing.
    The app's model store is replaced by the tiny network and dataset.
    """
    from main import app
    import model_store

    model_store.store = model_store.ModelStore(config=tiny_config, net=tiny_net, dataset=tiny_dataset)

    # ASGITransport does not run the lifespan, so the store above stays in place
    transport = ASGITransport(app=app)
    async with AsyncClient(transport=transport, base_url="http://test") as client:
        yield client

    model_store.store = None
