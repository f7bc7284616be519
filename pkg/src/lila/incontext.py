"""Closed-form ridge fit on the context frame and the query-side losses.

Spatial tensors are channels-last: ``(..., H, W, C)``. The ridge problem
flattens them to ``(..., N, C)``. All functions are differentiable with
respect to the feature tensors; cue targets are expected to be detached.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class RidgeSolveError(RuntimeError):
    pass


class SolveStats:
    """Counts Gram factorizations, one per (batch element) ridge solve."""

    def __init__(self):
        self.count = 0
        self.last_shapes: list[tuple] = []

    def reset(self):
        self.count = 0
        self.last_shapes = []


SOLVE_STATS = SolveStats()

DEFAULT_RELATIVE_LAMBDA = 0.01


@dataclass
class RidgeProblem:
    x0: torch.Tensor            # (..., N, d)
    g_context: torch.Tensor     # (..., N, m)
    lam: float | torch.Tensor | None = None   # None: relative policy
    add_bias: bool = True
    regularize_bias: bool = True
    relative_lambda: float = DEFAULT_RELATIVE_LAMBDA

    def validate(self) -> None:
        if self.x0.shape[:-1] != self.g_context.shape[:-1]:
            raise ValueError(f"row mismatch: x0 {tuple(self.x0.shape)} vs "
                             f"g_context {tuple(self.g_context.shape)}")
        if self.lam is not None and float(torch.as_tensor(self.lam).min()) < 0:
            raise ValueError("lambda must be >= 0")


@dataclass
class RidgeSolution:
    w_star: torch.Tensor        # (..., d_aug, m), float64
    add_bias: bool = True


@dataclass
class LossWeights:
    gamma: float = 1.0
    sigma: float | None = None  # None: median of the query cue gradients

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be > 0")


def augment(x: torch.Tensor) -> torch.Tensor:
    return torch.cat([x, torch.ones_like(x[..., :1])], dim=-1)


def flatten_spatial(x: torch.Tensor) -> torch.Tensor:
    """(..., H, W, C) -> (..., H*W, C)."""
    return x.reshape(*x.shape[:-3], -1, x.shape[-1])


def solve_ridge(p: RidgeProblem) -> RidgeSolution:
    """W* = (X^T X + lambda R)^-1 X^T G through a Cholesky factorisation of the
    d_aug x d_aug Gram matrix, in float64."""
    p.validate()
    x = p.x0.double()
    if p.add_bias:
        x = augment(x)
    g = p.g_context.double()
    d = x.shape[-1]
    xt = x.transpose(-1, -2)
    gram = xt @ x
    if p.lam is None:
        lam = p.relative_lambda * torch.diagonal(gram, dim1=-2, dim2=-1).sum(-1) / d
    else:
        lam = torch.as_tensor(p.lam, dtype=torch.float64)
    lam = lam[..., None, None] if lam.dim() else lam
    reg = torch.eye(d, dtype=torch.float64)
    if p.add_bias and not p.regularize_bias:
        reg[-1, -1] = 0.0
    a = gram + lam * reg
    chol, info = torch.linalg.cholesky_ex(a)
    n_solves = int(torch.tensor(a.shape[:-2]).prod()) if a.dim() > 2 else 1
    SOLVE_STATS.count += n_solves
    SOLVE_STATS.last_shapes.append(tuple(x.shape))
    piv = torch.diagonal(chol, dim1=-2, dim2=-1).reshape(-1, d) ** 2
    # without regularisation a numerically singular Gram may still factorise
    near_singular = piv.min(-1).values <= 1e-13 * piv.max(-1).values.clamp_min(1e-300)
    bad = (info.reshape(-1) > 0) | (near_singular & (lam.reshape(-1) == 0))
    if bad.any():
        idx = torch.nonzero(bad).flatten().tolist()
        raise RidgeSolveError(
            f"Gram matrix is singular for batch element(s) {idx}; use a positive lambda")
    w = torch.cholesky_solve(xt @ g, chol)
    return RidgeSolution(w, p.add_bias)


def predict(x: torch.Tensor, sol: RidgeSolution) -> torch.Tensor:
    """x @ W* on (..., N, d) or (..., H, W, d); the result takes x's dtype."""
    xa = augment(x) if sol.add_bias else x
    if xa.shape[-1] != sol.w_star.shape[-2]:
        raise ValueError(f"feature width {xa.shape[-1]} does not match W* "
                         f"{tuple(sol.w_star.shape)}")
    if xa.dim() == sol.w_star.dim() + 1:
        # spatial layout: contract over the channel axis only
        out = torch.einsum("...hwd,...dm->...hwm", xa.double(), sol.w_star)
    else:
        out = xa.double() @ sol.w_star
    return out.to(x.dtype)


def downsample_context(x0: torch.Tensor, g_context: torch.Tensor, factor: int = 7):
    """Bilinearly shrink both (..., H, W, C) grids by ``factor`` (floor of the size)."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    h, w = x0.shape[-3:-1]
    if g_context.shape[-3:-1] != (h, w):
        raise ValueError("x0 and g_context must share spatial size")
    if factor > h or factor > w:
        raise ValueError(f"factor {factor} larger than grid {h}x{w}")
    if factor == 1:
        return x0, g_context
    size = (h // factor, w // factor)

    def shrink(t):
        lead = t.shape[:-3]
        b = t.reshape(-1, *t.shape[-3:]).permute(0, 3, 1, 2)
        b = F.interpolate(b, size=size, mode="bilinear", align_corners=False)
        return b.permute(0, 2, 3, 1).reshape(*lead, *size, t.shape[-1])

    return shrink(x0), shrink(g_context)


def gradient_abs(t: torch.Tensor, axis: str) -> torch.Tensor:
    """|forward difference| along x (columns) or y (rows), last difference replicated."""
    dim = {"x": -2, "y": -3}[axis]
    d = torch.diff(t, dim=dim).abs()
    last = d.narrow(dim, d.shape[dim] - 1, 1)
    return torch.cat([d, last], dim=dim)


def edge_weight(g_query: torch.Tensor, axis: str, sigma: float) -> torch.Tensor:
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    return 1.0 - torch.exp(-gradient_abs(g_query, axis) / sigma)


def median_sigma(g_query: torch.Tensor, floor: float = 1e-6) -> float:
    with torch.no_grad():
        mags = torch.cat([gradient_abs(g_query, "x").flatten(),
                          gradient_abs(g_query, "y").flatten()])
        return max(float(mags.median()), floor)


def loss_l1(pred: torch.Tensor, g_query: torch.Tensor) -> torch.Tensor:
    if pred.shape != g_query.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(g_query.shape)}")
    return (pred - g_query).abs().mean()


def loss_grad(pred: torch.Tensor, g_query: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    if pred.shape != g_query.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(g_query.shape)}")
    sigma = weights.sigma if weights.sigma is not None else median_sigma(g_query)
    total = pred.new_zeros(())
    for axis in ("x", "y"):
        w = edge_weight(g_query, axis, sigma)
        diff = gradient_abs(pred, axis) - gradient_abs(g_query, axis)
        total = total + (w * diff.abs()).mean()
    return total


def loss_total(pred: torch.Tensor, g_query: torch.Tensor,
               weights: LossWeights = LossWeights()) -> torch.Tensor:
    l1 = loss_l1(pred, g_query)
    if weights.gamma == 0:
        return l1
    return l1 + weights.gamma * loss_grad(pred, g_query, weights)


def in_context_loss(x0: torch.Tensor, x_delta: torch.Tensor, g_context: torch.Tensor,
                    g_query: torch.Tensor, weights: LossWeights = LossWeights(),
                    factor: int = 1, lam=None, add_bias: bool = True,
                    relative_lambda: float = DEFAULT_RELATIVE_LAMBDA,
                    regularize_bias: bool = True):
    """Fit W* on the (downsampled) context and score it on the full-size query.

    Spatial inputs are (..., H, W, C). Returns (loss, W*, query prediction).
    """
    xs, gs = downsample_context(x0, g_context, factor)
    sol = solve_ridge(RidgeProblem(flatten_spatial(xs), flatten_spatial(gs), lam, add_bias,
                                   regularize_bias, relative_lambda))
    pred = predict(x_delta, sol)
    return loss_total(pred, g_query, weights), sol, pred
