import numpy as np
import pytest

from model.backbone import build_model
from model.config import get_preset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_cfg():
    return get_preset("micro")


@pytest.fixture
def micro_model(micro_cfg):
    return build_model(micro_cfg, seed=0)


def perturb(model, scale=0.05, seed=7):
    """打破零初始化，让输出与梯度都非平凡"""
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        p.data += (rng.normal(size=p.shape) * scale).astype(p.dtype)
    return model


@pytest.fixture
def trained_like_model(micro_cfg):
    return perturb(build_model(micro_cfg, seed=3))


@pytest.fixture
def app_config_path(tmp_path):
    return tmp_path / "config.json"
