"""Pixel-adaptive map refinement (mean-field style local averaging).

Each pixel's features are repeatedly replaced by a convex combination of
the features in a set of dilated 3x3 neighbourhoods (the centre is counted
once, with score 0). Neighbour ``q`` of pixel ``p`` gets the score
``-||I(p) - I(q)||^2 / temperature`` and the scores are softmax-normalised
over the neighbourhood. Out-of-range neighbours use border replication.

Refinement runs coarse to fine over an image pyramid; features are
bilinearly resampled between levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .grids import GridError


@dataclass(frozen=True)
class PamrConfig:
    ratios: tuple[int, ...] = (4, 2, 1)
    dilations: tuple[int, ...] = (1, 3, 5)
    iterations: int = 20
    divisor: int = 2
    temperature: float = 0.1

    def validate(self) -> None:
        if not self.ratios or self.ratios[-1] != 1:
            raise GridError(f"pyramid must end at ratio 1, got {self.ratios}")
        if any(a <= b for a, b in zip(self.ratios, self.ratios[1:])):
            raise GridError(f"pyramid ratios must strictly decrease, got {self.ratios}")
        if not self.dilations or min(self.dilations) < 1:
            raise GridError(f"dilations must be positive, got {self.dilations}")
        if self.iterations < 1 or self.divisor < 1:
            raise GridError("iterations and divisor must be >= 1")
        if self.temperature <= 0:
            raise GridError("temperature must be positive")

    def schedule(self) -> list[int]:
        """Iteration count per pyramid level, coarsest first."""
        counts, n = [], self.iterations
        for _ in self.ratios:
            counts.append(max(1, n))
            n //= self.divisor
        return counts


def _offsets(dilations) -> list[tuple[int, int]]:
    offs = [(0, 0)]
    for d in dilations:
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy or dx:
                    offs.append((dy * d, dx * d))
    return offs


def _to_bchw(x) -> tuple[torch.Tensor, bool]:
    if isinstance(x, torch.Tensor):
        if x.dim() == 3:
            return x.unsqueeze(0), False
        return x, False
    a = np.asarray(x)
    if a.ndim == 2:
        a = a[..., None]
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float64)).permute(2, 0, 1)[None], True


def _neighbours(x: torch.Tensor, offsets, pad: int) -> torch.Tensor:
    """Stack shifted copies: (B, C, H, W) -> (B, K, C, H, W)."""
    h, w = x.shape[-2:]
    xp = F.pad(x, (pad, pad, pad, pad), mode="replicate")
    return torch.stack([xp[..., pad + dy:pad + dy + h, pad + dx:pad + dx + w]
                        for dy, dx in offsets], dim=1)


def _check_size(h: int, w: int, dilations) -> None:
    need = 2 * max(dilations) + 1
    if h < need or w < need:
        raise GridError(f"image {h}x{w} smaller than the {need}x{need} dilated stencil")


def affinity_weights(image, dilations=(1, 3, 5), temperature: float = 0.1):
    """Per-pixel neighbourhood weights, shape (B, K, H, W) with K = 1 + 8 * len(dilations).

    Index 0 is the centre; the rest follow ``dilations`` and, within one
    dilation, row-major order of the 3x3 offsets. Numpy input returns (H, W, K).
    """
    img, was_numpy = _to_bchw(image)
    _check_size(img.shape[-2], img.shape[-1], dilations)
    offs = _offsets(dilations)
    nb = _neighbours(img, offs, max(dilations))
    score = -((nb - img.unsqueeze(1)) ** 2).sum(2) / temperature
    w = torch.softmax(score, dim=1)
    if was_numpy:
        return w[0].permute(1, 2, 0).numpy()
    return w


def _resize(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def _average_step(f: torch.Tensor, w: torch.Tensor, offsets, pad: int) -> torch.Tensor:
    h, wd = f.shape[-2:]
    fp = F.pad(f, (pad, pad, pad, pad), mode="replicate")
    # residual form f + sum_k w_k (f_q - f): constant maps stay bit-exact
    out = f.clone()
    for k, (dy, dx) in enumerate(offsets[1:], start=1):
        out.addcmul_(fp[..., pad + dy:pad + dy + h, pad + dx:pad + dx + wd] - f, w[:, k:k + 1])
    return out


def refine_level(features: torch.Tensor, image: torch.Tensor, dilations, temperature,
                 n_iter: int, on_iteration=None, level: int = 0) -> torch.Tensor:
    offs = _offsets(dilations)
    w = affinity_weights(image, dilations, temperature).to(features.dtype)
    f = features
    for i in range(n_iter):
        f = _average_step(f, w, offs, max(dilations))
        if on_iteration is not None:
            on_iteration(level, i, f)
    return f


@torch.no_grad()
def pamr_refine(features, image, cfg: PamrConfig = PamrConfig(), on_iteration=None):
    """Coarse-to-fine refinement of ``features`` guided by ``image``.

    Accepts (H, W, C) numpy grids or (B, C, H, W) tensors; returns the same kind.
    ``on_iteration(level, i, f)`` is called after every iteration.
    """
    cfg.validate()
    f, was_numpy = _to_bchw(features)
    img, _ = _to_bchw(image)
    img = img.to(f.dtype)
    if f.shape[-2:] != img.shape[-2:] or f.shape[0] != img.shape[0]:
        raise GridError(f"features {tuple(f.shape)} and image {tuple(img.shape)} disagree")
    h, w = f.shape[-2:]
    for level, (ratio, n_iter) in enumerate(zip(cfg.ratios, cfg.schedule())):
        size = (max(1, h // ratio), max(1, w // ratio))
        _check_size(*size, cfg.dilations)
        f = _resize(f, size)
        f = refine_level(f, _resize(img, size), cfg.dilations, cfg.temperature,
                         n_iter, on_iteration, level)
    if was_numpy:
        return f[0].permute(1, 2, 0).numpy()
    return f
