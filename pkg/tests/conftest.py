import numpy as np
import pytest
import torch

from mixdet.data import DatasetSpec, generate
from mixdet.model import DecoderVariant, ModelConfig


@pytest.fixture(scope="session", autouse=True)
def _single_thread_torch():
    # Keeps timing stable and runs deterministic on this box.
    torch.set_num_threads(1)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(
        num_queries=8,
        num_classes=3,
        embed_dim=32,
        num_heads=4,
        num_encoder_layers=1,
        num_decoder_layers=2,
        ffn_dim=64,
        image_size=32,
        backbone_channels=(16, 24, 32),
        variant=DecoderVariant(order="ca_sa_ffn", tap="internal"),
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture()
def smoke_scenes():
    return generate(DatasetSpec(seed=11, num_scenes=10, height=32, width=32, max_objects=3))


def random_boxes(rng: np.random.Generator, count: int) -> torch.Tensor:
    """Valid center-form boxes fully inside the canvas, as float64."""
    w = rng.uniform(0.05, 0.4, size=count)
    h = rng.uniform(0.05, 0.4, size=count)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return torch.from_numpy(np.stack([cx, cy, w, h], axis=1))
