"""Stratified ray sampling and differentiable volume rendering.

Everything here works on the trailing "sample" axis, so a single ray is an
``(M,)`` tensor and a batch of rays is ``(R, M)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


class RenderError(ValueError):
    pass


@dataclass
class RaySampleBatch:
    """Per-ray samples: positions ``t`` (..., M), gaps ``delta`` (..., M), densities
    ``sigma`` (..., M) and per-task values ``values[name]`` of shape (..., M, C)."""

    t: torch.Tensor
    delta: torch.Tensor
    sigma: torch.Tensor
    values: dict[str, torch.Tensor] = field(default_factory=dict)


@dataclass
class Composite:
    rendered: dict[str, torch.Tensor]
    weights: torch.Tensor
    opacity: torch.Tensor


def stratified_sample(t_near: float, t_far: float, n_samples: int, jitter: bool = False,
                      seed: int | None = None, batch_shape: tuple = (),
                      generator: torch.Generator | None = None,
                      dtype=torch.float32) -> torch.Tensor:
    """One sample per equal-width bin of [t_near, t_far]; bin midpoints when not jittered.

    ``seed`` builds a private generator so repeated calls agree; ``generator``
    lets a training loop share one stream.
    """
    if not (t_far > t_near >= 0):
        raise RenderError(f"need t_far > t_near >= 0, got ({t_near}, {t_far})")
    if n_samples < 1:
        raise RenderError("n_samples must be >= 1")
    edges = torch.linspace(t_near, t_far, n_samples + 1, dtype=torch.float64)
    lo, width = edges[:-1], edges[1:] - edges[:-1]
    shape = tuple(batch_shape) + (n_samples,)
    if jitter:
        if generator is None and seed is not None:
            generator = torch.Generator().manual_seed(seed)
        u = torch.rand(shape, generator=generator, dtype=torch.float64)
    else:
        u = torch.full(shape, 0.5, dtype=torch.float64)
    # keep samples strictly inside their bins so they stay strictly increasing
    u = u.clamp(1e-6, 1 - 1e-6)
    return (lo + u * width).to(dtype)


def sample_gaps(t: torch.Tensor, t_far: float) -> torch.Tensor:
    """delta_m = t_{m+1} - t_m, with the final gap filled up to the far bound."""
    last = (t_far - t[..., -1:]).clamp_min(0)
    return torch.cat([t[..., 1:] - t[..., :-1], last], dim=-1)


def transmittance(sigma: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """T(t_m) = exp(-sum_{j<m} delta_j sigma_j); the first entry is always 1."""
    sigma, delta = torch.as_tensor(sigma), torch.as_tensor(delta)
    if sigma.shape != delta.shape:
        raise RenderError(f"sigma {tuple(sigma.shape)} and delta {tuple(delta.shape)} differ")
    if (sigma < 0).any() or (delta < 0).any():
        raise RenderError("sigma and delta must be non-negative")
    return _transmittance(sigma, delta)


def _transmittance(sigma, delta):
    tau = sigma * delta
    excl = torch.cumsum(tau, dim=-1) - tau
    return torch.exp(-excl)


def composite(samples: RaySampleBatch, background: dict[str, torch.Tensor] | None = None) -> Composite:
    """Volume-render every entry of ``samples.values``.

    Returns the rendered values, the per-sample weights
    ``T(t_m) (1 - exp(-delta_m sigma_m))`` and the accumulated opacity. When
    ``background`` has an entry for a task, the unaccumulated mass
    ``1 - opacity`` is assigned to it.
    """
    sigma, delta = samples.sigma, samples.delta
    if sigma.shape != delta.shape:
        raise RenderError(f"sigma {tuple(sigma.shape)} and delta {tuple(delta.shape)} differ")
    tau = sigma * delta
    # T_m * alpha_m == exp(-S_{m-1}) - exp(-S_m); the product form keeps gradients simple
    weights = _transmittance(sigma, delta) * (1.0 - torch.exp(-tau))
    opacity = weights.sum(-1)
    rendered = {}
    for name, y in samples.values.items():
        if y.shape[:-1] != sigma.shape:
            raise RenderError(f"values[{name!r}] has shape {tuple(y.shape)}, expected {tuple(sigma.shape)} + (C,)")
        out = (weights[..., None] * y).sum(-2)
        if background is not None and name in background:
            out = out + (1.0 - opacity)[..., None] * background[name]
        rendered[name] = out
    return Composite(rendered, weights, opacity)
