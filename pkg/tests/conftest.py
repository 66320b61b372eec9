import numpy as np
import pytest
import torch
from hypothesis import settings

from muvie import toyscenes
from muvie.config import Config
from muvie.dataset import load_dataset

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def scene_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("scene") / "scene_000"
    toyscenes.generate_dataset(toyscenes.random_scene(3), 16, toyscenes.Orbit(), path)
    return path


@pytest.fixture(scope="session")
def scene(scene_dir):
    return load_dataset(scene_dir)


@pytest.fixture
def tiny_config():
    cfg = Config()
    m = cfg.model
    m.d_scene, m.d_task, m.d_prompt, m.d_hidden, m.n_heads = 8, 8, 4, 16, 2
    m.n_samples = 8
    m.cva_depth, m.cta_depth = 2, 1
    m.unet_widths = (4, 8, 8)
    cfg.train.rays_per_batch = 32
    cfg.train.n_views = 3
    cfg.train.stage1_iters, cfg.train.stage2_iters = 2, 2
    return cfg


def central_difference(f, x: torch.Tensor, eps: float = 1e-4) -> torch.Tensor:
    """Numerical gradient of a scalar function by central differences."""
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(f())
            flat[i] = orig - eps
            lo = float(f())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
    return g


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-8) -> float:
    """Norm-wise relative error. ``floor`` keeps gradients that vanish analytically
    (e.g. a bias shared by every softmax logit) from dividing rounding noise by ~0."""
    num = float((analytic - numeric).norm())
    den = max(float(numeric.norm()), float(analytic.norm()), floor)
    return num / den
