"""Cross-view / cross-task attention decoder.

Per query point the decoder sees V view tokens (features gathered from the
source views plus an encoding of the view angle) and produces

* a density ``sigma`` from the mean-pooled cross-view features, and
* a ``(K+1) x V`` matrix of convex weights, one row per task, used to blend the
  source-view annotations into the point's prediction.

Shapes follow ``(P, ...)`` with P query points. Masks are boolean ``(P, V)``
with True for views that see the point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import positional_encoding


class DecoderError(ValueError):
    pass


def mlp(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.ReLU(), nn.Linear(d_hidden, d_out))


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate query and key/value widths.

    The output has the query width so it can be added back residually.
    """

    def __init__(self, d_query: int, d_kv: int, n_heads: int, d_attn: int | None = None):
        super().__init__()
        d_attn = d_attn or d_query
        if d_attn % n_heads:
            raise DecoderError(f"attention width {d_attn} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q = nn.Linear(d_query, d_attn)
        self.k = nn.Linear(d_kv, d_attn)
        self.v = nn.Linear(d_kv, d_attn)
        self.o = nn.Linear(d_attn, d_query)

    def forward(self, query, kv, key_mask=None):
        # query (..., Nq, dq), kv (..., Nk, dkv), key_mask (..., Nk)
        h = self.n_heads
        q = self.q(query).unflatten(-1, (h, -1)).transpose(-2, -3)
        k = self.k(kv).unflatten(-1, (h, -1)).transpose(-2, -3)
        v = self.v(kv).unflatten(-1, (h, -1)).transpose(-2, -3)
        logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[..., None, None, :], float("-inf"))
        out = torch.softmax(logits, dim=-1) @ v
        return self.o(out.transpose(-2, -3).flatten(-2))


class AttentionUnion(nn.Module):
    """``MLP(x + MHA(x, x))``; the MLP may change the width."""

    def __init__(self, d_in: int, d_out: int, n_heads: int, d_hidden: int):
        super().__init__()
        self.attn = MultiHeadAttention(d_in, d_in, n_heads)
        self.mlp = mlp(d_in, d_hidden, d_out)

    def forward(self, x, mask=None):
        return self.mlp(x + self.attn(x, x, mask))


class PointwiseUnion(nn.Module):
    """Attention-free stand-in used by the ablations: identity pass-through plus the MLP."""

    def __init__(self, d_in: int, d_out: int, d_hidden: int):
        super().__init__()
        self.mlp = mlp(d_in, d_hidden, d_out)

    def forward(self, x, mask=None):
        return self.mlp(x)


def _require_views(mask):
    if mask is not None and not bool(mask.any(-1).all()):
        raise DecoderError("every view is masked for at least one point; nothing to attend to")


class CrossViewAttention(nn.Module):
    def __init__(self, d_scene: int, d_task: int, n_heads: int, d_hidden: int,
                 depth: int = 4, pe_freqs: int = 6, attention: bool = True):
        super().__init__()
        self.pe_freqs = pe_freqs
        d_in = d_scene + 2 * pe_freqs
        if attention:
            dims = [d_in] + [d_task] * depth
            self.blocks = nn.ModuleList(
                AttentionUnion(dims[i], dims[i + 1], n_heads if dims[i] % n_heads == 0 else 1, d_hidden)
                for i in range(depth))
        else:
            self.blocks = nn.ModuleList([PointwiseUnion(d_in, d_task, d_hidden)])

    def forward(self, scene_feature, angles, mask=None):
        """scene_feature (P, V, d_scene), angles (P, V) -> (P, V, d_task)."""
        _require_views(mask)
        x = torch.cat([scene_feature, positional_encoding(angles[..., None], self.pe_freqs)], dim=-1)
        for block in self.blocks:
            x = block(x, mask)
        return x


class TaskBroadcast(nn.Module):
    """One MLP per task turns the shared (P, V, d) features into (P, K+1, V, d)."""

    def __init__(self, n_tasks: int, d_task: int, d_hidden: int):
        super().__init__()
        self.heads = nn.ModuleList(mlp(d_task, d_hidden, d_task) for _ in range(n_tasks))

    def forward(self, f_cva):
        return torch.stack([head(f_cva) for head in self.heads], dim=-3)


class CrossTaskAttention(nn.Module):
    """Two-stage task mixing through shared learnable prompts.

    Stage 1: each task branch (V tokens) cross-attends to all prompt rows, with a
    residual, then every token is concatenated with its own task's prompt.
    Stage 2: the (K+1)*V tokens of a point attend jointly through ``depth``
    self-attention unions, projecting back to ``d_task``.
    """

    def __init__(self, n_tasks: int, d_task: int, d_prompt: int, n_heads: int, d_hidden: int,
                 depth: int = 2):
        super().__init__()
        self.prompts = nn.Parameter(torch.randn(n_tasks, d_prompt) * 0.1)
        self.cross = MultiHeadAttention(d_task, d_prompt, n_heads)
        dims = [d_task + d_prompt] + [d_task] * depth
        self.blocks = nn.ModuleList(
            AttentionUnion(dims[i], dims[i + 1], n_heads if dims[i] % n_heads == 0 else 1, d_hidden)
            for i in range(depth))

    def self_attention_parameters(self):
        """Parameters of the stage-2 self-attention modules (frozen in the first training stage)."""
        for block in self.blocks:
            yield from block.attn.parameters()

    def forward(self, f_task, mask=None):
        """f_task (P, T, V, d) -> (P, T, V, d)."""
        p, t, v, _ = f_task.shape
        # the prompt keys/values broadcast over points and task branches
        stage1 = f_task + self.cross(f_task, self.prompts)
        x = torch.cat([stage1, self.prompts[None, :, None, :].expand(p, t, v, -1)], dim=-1)
        x = x.reshape(p, t * v, -1)
        token_mask = None if mask is None else mask[:, None, :].expand(p, t, v).reshape(p, t * v)
        for block in self.blocks:
            x = block(x, token_mask)
        return x.reshape(p, t, v, -1)


class PointwiseTaskMixer(nn.Module):
    """Ablation stand-in for cross-task attention."""

    def __init__(self, d_task: int, d_hidden: int):
        super().__init__()
        self.mlp = mlp(d_task, d_hidden, d_task)

    def self_attention_parameters(self):
        return iter(())

    def forward(self, f_task, mask=None):
        return self.mlp(f_task)


def masked_mean(x, mask):
    """Mean over the view axis (-2) of x (P, V, d) restricted to unmasked views."""
    if mask is None:
        return x.mean(-2)
    m = mask.to(x.dtype)[..., None]
    return (x * m).sum(-2) / m.sum(-2).clamp_min(1.0)


class DensityHead(nn.Module):
    def __init__(self, d_task: int, d_hidden: int):
        super().__init__()
        self.mlp = mlp(d_task, d_hidden, 1)

    def forward(self, f_cva, mask=None):
        _require_views(mask)
        return F.softplus(self.mlp(masked_mean(f_cva, mask))[..., 0])


class WeightHead(nn.Module):
    def __init__(self, d_task: int, d_hidden: int):
        super().__init__()
        self.mlp = mlp(d_task, d_hidden, 1)

    def forward(self, f_stage2, mask=None):
        """(P, T, V, d) -> convex weights (P, T, V), softmax over unmasked views."""
        logits = self.mlp(f_stage2)[..., 0]
        return normalize_weights(logits, mask)


def normalize_weights(logits, mask=None):
    if mask is not None:
        logits = logits.masked_fill(~mask[:, None, :], float("-inf"))
    return torch.softmax(logits, dim=-1)


def compose_prediction(weights, source_values):
    """Blend source-view annotations with per-task convex weights.

    ``weights`` is (..., T, V); ``source_values`` is a list of T tensors shaped
    (..., V, C_j). Returns a list of (..., C_j) tensors.
    """
    if weights.shape[-2] != len(source_values):
        raise DecoderError(f"{weights.shape[-2]} weight rows for {len(source_values)} tasks")
    out = []
    for j, y in enumerate(source_values):
        if y.shape[:-1] != weights.shape[:-2] + weights.shape[-1:]:
            raise DecoderError(f"task {j} values {tuple(y.shape)} do not match weights {tuple(weights.shape)}")
        out.append((weights[..., j, :, None] * y).sum(-2))
    return out


@dataclass
class DecoderOutput:
    sigma: torch.Tensor      # (P,)
    weights: torch.Tensor    # (P, T, V)


class MultiTaskDecoder(nn.Module):
    def __init__(self, n_tasks: int, d_scene: int, d_task: int = 32, d_prompt: int = 16,
                 n_heads: int = 4, d_hidden: int = 64, cva_depth: int = 4, cta_depth: int = 2,
                 pe_freqs: int = 6, ablate: str | None = None):
        super().__init__()
        if ablate not in (None, "no-cta", "no-cva"):
            raise DecoderError(f"unknown ablation {ablate!r}")
        self.n_tasks = n_tasks
        self.cva = CrossViewAttention(d_scene, d_task, n_heads, d_hidden, cva_depth, pe_freqs,
                                      attention=ablate != "no-cva")
        self.broadcast = TaskBroadcast(n_tasks, d_task, d_hidden)
        if ablate == "no-cta":
            self.cta = PointwiseTaskMixer(d_task, d_hidden)
        else:
            self.cta = CrossTaskAttention(n_tasks, d_task, d_prompt, n_heads, d_hidden, cta_depth)
        self.density = DensityHead(d_task, d_hidden)
        self.weight = WeightHead(d_task, d_hidden)

    def forward(self, scene_feature, angles, mask=None) -> DecoderOutput:
        f_cva = self.cva(scene_feature, angles, mask)
        sigma = self.density(f_cva, mask)
        f_stage2 = self.cta(self.broadcast(f_cva), mask)
        return DecoderOutput(sigma, self.weight(f_stage2, mask))
