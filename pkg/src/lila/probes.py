"""Evaluation probes and their metrics.

Feature maps are channels-last numpy arrays or torch tensors, ``(H, W, d)``
per frame. Label masks are integer ``(H, W)`` grids.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .grids import GridError, raster_read

log = logging.getLogger(__name__)

IGNORE_ID = 255
DELTA_THRESHOLDS = (11.25, 22.5, 30.0)


# -- segmentation and boundary metrics -----------------------------------------

def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    """Region IoU of two boolean masks; two empty masks score 1."""
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise GridError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary(mask: np.ndarray) -> np.ndarray:
    """One-pixel inner boundary: mask minus its 4-connected erosion."""
    mask = np.asarray(mask, bool)
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def boundary_tolerance(shape) -> int:
    return int(math.ceil(0.008 * math.hypot(*shape[:2])))


def f_boundary(pred: np.ndarray, gt: np.ndarray, tolerance: int | None = None) -> float:
    """Boundary F-measure with a square matching band of ``tolerance`` pixels."""
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise GridError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    r = boundary_tolerance(gt.shape) if tolerance is None else tolerance
    bp, bg = boundary(pred), boundary(gt)
    if not bp.any() and not bg.any():
        return 1.0
    if not bp.any() or not bg.any():
        return 0.0
    band = np.ones((2 * r + 1, 2 * r + 1), bool)
    gt_dil = ndimage.binary_dilation(bg, band)
    pred_dil = ndimage.binary_dilation(bp, band)
    precision = (bp & gt_dil).sum() / bp.sum()
    recall = (bg & pred_dil).sum() / bg.sum()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


@dataclass
class VosScore:
    j: float
    f: float

    @property
    def jf(self) -> float:
        return 0.5 * (self.j + self.f)


def vos_score(pred_seq, gt_seq, skip_first: bool = True) -> VosScore:
    """Mean J and F over objects (ids > 0 in frame 0) and evaluated frames."""
    gt0 = np.asarray(gt_seq[0])
    objects = [o for o in np.unique(gt0) if o != 0 and o != IGNORE_ID]
    frames = range(1 if skip_first and len(gt_seq) > 1 else 0, len(gt_seq))
    js, fs = [], []
    for o in objects:
        jo = [jaccard(pred_seq[t] == o, gt_seq[t] == o) for t in frames]
        fo = [f_boundary(pred_seq[t] == o, gt_seq[t] == o) for t in frames]
        js.append(np.mean(jo))
        fs.append(np.mean(fo))
    if not objects:
        return VosScore(1.0, 1.0)
    return VosScore(float(np.mean(js)), float(np.mean(fs)))


def harmonic(seen: float, unseen: float) -> float:
    if seen + unseen == 0:
        return 0.0
    return 2 * seen * unseen / (seen + unseen)


def seg_metrics(pred: np.ndarray, gt: np.ndarray, n_classes: int,
                ignore: int = IGNORE_ID) -> dict[str, float]:
    """mIoU over classes present in prediction or ground truth, and pixel accuracy."""
    pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
    keep = gt != ignore
    pred, gt = pred[keep], gt[keep]
    if gt.size == 0:
        raise GridError("no labelled pixels")
    conf = np.bincount(gt * n_classes + pred, minlength=n_classes ** 2).reshape(n_classes, -1)
    inter = np.diag(conf)
    union = conf.sum(0) + conf.sum(1) - inter
    present = union > 0
    return {"miou": float((inter[present] / union[present]).mean()),
            "pacc": float(inter.sum() / conf.sum())}


def angular_error_deg(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pn = pred / np.linalg.norm(pred, axis=-1, keepdims=True).clip(1e-12)
    gn = gt / np.linalg.norm(gt, axis=-1, keepdims=True).clip(1e-12)
    cos = np.clip((pn * gn).sum(-1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def normal_metrics(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None
                   ) -> dict[str, float]:
    """RMSE of the angular error in degrees and inlier ratios at 11.25/22.5/30 degrees."""
    err = angular_error_deg(np.asarray(pred, float), np.asarray(gt, float))
    if valid is not None:
        err = err[np.asarray(valid, bool)]
    err = err.ravel()
    if err.size == 0:
        raise GridError("no valid pixels for normal evaluation")
    out = {"rmse": float(np.sqrt(np.mean(err ** 2)))}
    for i, th in enumerate(DELTA_THRESHOLDS, start=1):
        out[f"delta{i}"] = float(np.mean(err < th))
    return out


# -- VOS: linear probe ------------------------------------------------------------

@dataclass
class VosLinear:
    weights: np.ndarray          # (d + 1, n_classes)
    classes: np.ndarray

    def logits(self, features: np.ndarray) -> np.ndarray:
        f = np.asarray(features, float)
        f = np.concatenate([f, np.ones(f.shape[:-1] + (1,))], -1)
        return f @ self.weights

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.classes[self.logits(features).argmax(-1)]


def fit_vos_linear(features: np.ndarray, mask: np.ndarray) -> VosLinear:
    """Least-squares fit of one-hot frame-0 labels from features (plus bias)."""
    f = np.asarray(features, float)
    m = np.asarray(mask)
    if f.shape[:-1] != m.shape:
        raise GridError(f"features {f.shape} and mask {m.shape} disagree")
    keep = m.ravel() != IGNORE_ID
    x = f.reshape(-1, f.shape[-1])[keep]
    y = m.ravel()[keep]
    classes = np.unique(y)
    if classes.size < 2:
        warnings.warn("single-class mask: degenerate fit, constant classifier", RuntimeWarning)
    onehot = (y[:, None] == classes[None]).astype(float)
    xa = np.concatenate([x, np.ones((x.shape[0], 1))], 1)
    w, *_ = np.linalg.lstsq(xa, onehot, rcond=None)
    return VosLinear(w, classes)


# -- VOS: local k-NN propagation ----------------------------------------------------

@dataclass(frozen=True)
class KnnConfig:
    k: int = 5
    context_frames: int = 7
    radius: int = 12
    temperature: float = 0.07

    def validate(self) -> None:
        if self.k < 1 or self.context_frames < 1 or self.temperature <= 0:
            raise ValueError("k, context frames and temperature must be positive")
        if self.radius < 1:
            raise ValueError("window radius must be >= 1")


def _window_mask(h: int, w: int, radius: int) -> torch.Tensor:
    ys, xs = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
    ys, xs = ys.flatten(), xs.flatten()
    return ((ys[:, None] - ys[None]).abs() <= radius) & ((xs[:, None] - xs[None]).abs() <= radius)


def knn_propagate(features, mask0: np.ndarray, cfg: KnnConfig = KnnConfig(),
                  chunk: int = 512) -> list[np.ndarray]:
    """Autoregressive label propagation from frame 0.

    For each pixel of frame t the top-k most similar (cosine) pixels inside a
    square window of ``radius`` are taken from frame 0 and the previous
    ``context_frames`` frames; their soft labels are averaged with weights
    exp(sim / temperature). Returns one mask per frame, frame 0 unchanged.
    """
    cfg.validate()
    feats = [torch.as_tensor(np.asarray(f), dtype=torch.float64) for f in features]
    if len(feats) < 2:
        raise GridError("label propagation needs at least two frames")
    h, w, _ = feats[0].shape
    mask0 = np.asarray(mask0)
    if mask0.shape != (h, w):
        raise GridError(f"mask {mask0.shape} does not match features {(h, w)}")
    classes = np.unique(mask0)
    onehot0 = torch.from_numpy((mask0.ravel()[:, None] == classes[None]).astype(np.float64))
    flat = [F.normalize(f.reshape(-1, f.shape[-1]), dim=-1) for f in feats]
    window = _window_mask(h, w, cfg.radius)
    labels = [onehot0]
    out = [mask0.copy()]
    for t in range(1, len(feats)):
        ctx = sorted({0} | set(range(max(0, t - cfg.context_frames), t)))
        keys = torch.cat([flat[s] for s in ctx], 0)
        labs = torch.cat([labels[s] for s in ctx], 0)
        k = min(cfg.k, keys.shape[0])
        hard = torch.empty(h * w, dtype=torch.long)
        # row chunks bound the dense similarity block
        for a in range(0, h * w, chunk):
            b = min(a + chunk, h * w)
            win = window[a:b].repeat(1, len(ctx))
            sims = torch.where(win, flat[t][a:b] @ keys.T, -torch.inf)
            top, idx = sims.topk(k, dim=1)
            wts = torch.exp((top - top[:, :1]) / cfg.temperature)
            wts = torch.where(torch.isfinite(top), wts, 0.0)
            soft = (wts[..., None] * labs[idx]).sum(1)
            hard[a:b] = soft.argmax(1)
        labels.append(F.one_hot(hard, len(classes)).double())
        out.append(classes[hard.numpy()].reshape(h, w))
    return out


# -- surface normals ------------------------------------------------------------------

class NormalProbe(nn.Module):
    """5x5 convolution on decoder features plus an upsampled 1x1 encoder branch."""

    def __init__(self, dec_dim: int, enc_dim: int | None):
        super().__init__()
        self.dec = nn.Conv2d(dec_dim, 3, 5, padding=2)
        self.enc = nn.Conv2d(enc_dim, 3, 1) if enc_dim else None

    def forward(self, dec: torch.Tensor, enc: torch.Tensor | None = None) -> torch.Tensor:
        out = self.dec(dec)
        if self.enc is not None and enc is not None:
            out = out + F.interpolate(self.enc(enc), size=dec.shape[-2:], mode="bilinear",
                                      align_corners=False)
        return F.normalize(out, dim=1, eps=1e-8)


def angular_loss(pred: torch.Tensor, target: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    cos = (pred * target).sum(1).clamp(-1 + 1e-6, 1 - 1e-6)
    return torch.acos(cos)[valid].mean()


def probe_normals(dec: torch.Tensor, enc: torch.Tensor | None, targets: torch.Tensor,
                  valid: torch.Tensor | None = None, steps: int = 300, lr: float = 1e-2,
                  seed: int = 0, eval_set=None):
    """Fit the normal probe on (B, d, H, W) features and (B, 3, H, W) unit targets.

    Returns (probe, metrics); metrics are computed on ``eval_set`` =
    (dec, enc, targets, valid) when given, else on the fitting data.
    """
    valid = torch.ones(targets.shape[0], *targets.shape[2:], dtype=torch.bool) if valid is None else valid
    if not valid.any():
        raise GridError("no valid pixels for the normal probe")
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    probe = NormalProbe(dec.shape[1], enc.shape[1] if enc is not None else None).to(dec.dtype)
    torch.random.set_rng_state(gen_state)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        loss = angular_loss(probe(dec, enc), targets, valid)
        loss.backward()
        opt.step()
    d2, e2, t2, v2 = eval_set if eval_set is not None else (dec, enc, targets, valid)
    with torch.no_grad():
        pred = probe(d2, e2).permute(0, 2, 3, 1).numpy()
    metrics = normal_metrics(pred, t2.permute(0, 2, 3, 1).numpy(), v2.numpy())
    return probe, metrics


# -- attention segmentation probe -------------------------------------------------------

def prototype_logits(features: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Per-pixel scalar products: (B, d, H, W) x (B or 1, C, d) -> (B, C, H, W)."""
    return torch.einsum("bdhw,bcd->bchw", features, prototypes.expand(features.shape[0], -1, -1))


class SegAttentionProbe(nn.Module):
    """C learned queries cross-attend over a pooled feature grid to form prototypes."""

    def __init__(self, dim: int, n_classes: int, enc_dim: int | None = None, downsample: int = 4):
        super().__init__()
        if n_classes < 2:
            raise ValueError("need at least two classes")
        self.n_classes = n_classes
        self.downsample = downsample
        self.queries = nn.Parameter(torch.randn(n_classes, dim) / dim ** 0.5)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.enc = nn.Conv2d(enc_dim, n_classes, 1) if enc_dim else None

    def prototypes(self, features: torch.Tensor) -> torch.Tensor:
        pooled = F.avg_pool2d(features, self.downsample) if self.downsample > 1 else features
        tokens = pooled.flatten(2).transpose(1, 2)                  # (B, n, d)
        att = torch.softmax(self.queries @ self.key(tokens).transpose(1, 2)
                            / tokens.shape[-1] ** 0.5, dim=-1)      # (B, C, n)
        return att @ self.value(tokens)

    def forward(self, features: torch.Tensor, enc: torch.Tensor | None = None) -> torch.Tensor:
        logits = prototype_logits(features, self.prototypes(features))
        if self.enc is not None and enc is not None:
            logits = logits + F.interpolate(self.enc(enc), size=features.shape[-2:],
                                            mode="bilinear", align_corners=False)
        return logits


def probe_seg_attention(features: torch.Tensor, labels: torch.Tensor, n_classes: int,
                        enc: torch.Tensor | None = None, steps: int = 300, lr: float = 1e-2,
                        downsample: int = 4, seed: int = 0, eval_set=None):
    """Train the attention probe with per-pixel cross-entropy; returns (probe, metrics)."""
    present = torch.unique(labels[labels != IGNORE_ID])
    if present.numel() and int(present.max()) >= n_classes:
        raise ValueError(f"label id {int(present.max())} outside {n_classes} classes")
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    probe = SegAttentionProbe(features.shape[1], n_classes,
                              enc.shape[1] if enc is not None else None, downsample).to(features.dtype)
    torch.random.set_rng_state(gen_state)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        loss = F.cross_entropy(probe(features, enc), labels, ignore_index=IGNORE_ID)
        loss.backward()
        opt.step()
    f2, e2, l2 = eval_set if eval_set is not None else (features, enc, labels)
    with torch.no_grad():
        pred = probe(f2, e2).argmax(1).numpy()
    return probe, seg_metrics(pred, l2.numpy(), n_classes)


# -- zero-shot probe -------------------------------------------------------------------

@dataclass
class ZeroShotDiagnostics:
    guarded_pixels: int = 0


ZS_DIAGNOSTICS = ZeroShotDiagnostics()


def unit_rows(t: torch.Tensor) -> torch.Tensor:
    return t / t.norm(dim=-1, keepdim=True)


def _cosine_to_text(f: torch.Tensor, text: torch.Tensor, eps: float) -> torch.Tensor:
    norm = f.norm(dim=-1, keepdim=True)
    small = norm < eps
    if small.any():
        n = int(small.sum())
        ZS_DIAGNOSTICS.guarded_pixels += n
        log.warning("zero-shot probe: %d projected feature(s) below norm %g", n, eps)
    return (f / norm.clamp_min(eps)) @ text.to(f.dtype).T


def zero_shot_logits(f_enc: torch.Tensor, f_dec: torch.Tensor, text: torch.Tensor,
                     alpha_enc, alpha_dec, gamma, p_enc=None, p_dec=None,
                     eps: float = 1e-12) -> torch.Tensor:
    """exp(gamma) * (alpha_enc * cos(P_enc f_enc, t_c) + alpha_dec * cos(P_dec f_dec, t_c)).

    Features are channels-last; the projections default to identity.
    """
    pe = p_enc(f_enc) if p_enc is not None else f_enc
    pd = p_dec(f_dec) if p_dec is not None else f_dec
    le = _cosine_to_text(pe, text, eps)
    ld = _cosine_to_text(pd, text, eps)
    return torch.exp(torch.as_tensor(gamma, dtype=le.dtype)) * (alpha_enc * le + alpha_dec * ld)


@dataclass(frozen=True)
class Partition:
    seen: tuple[int, ...]
    unseen: tuple[int, ...]

    def validate(self, n_classes: int) -> None:
        if set(self.seen) & set(self.unseen):
            raise ValueError("seen and unseen classes overlap")
        if any(c < 0 or c >= n_classes for c in self.seen + self.unseen):
            raise ValueError("partition names a class outside the label set")


def zero_shot_loss(logits: torch.Tensor, labels: torch.Tensor, partition: Partition) -> torch.Tensor:
    """0.1 * CE on seen-labelled pixels + mean squared seen-class mass on unseen pixels.

    Without unseen-labelled pixels the result is the cross-entropy alone.
    Logits are (N, C) over all classes; labels (N,) with IGNORE_ID for void.
    """
    n_classes = logits.shape[-1]
    partition.validate(n_classes)
    seen = torch.tensor(partition.seen, dtype=torch.long)
    unseen = torch.tensor(partition.unseen, dtype=torch.long)
    lab = torch.isin(labels, seen)
    ign = torch.isin(labels, unseen)
    if not lab.any():
        raise ValueError("no pixels carry a seen label")
    ce = F.cross_entropy(logits[lab], labels[lab])
    if not ign.any():
        return ce
    p = torch.softmax(logits[ign], dim=-1)
    neg = (p[:, seen].sum(-1) ** 2).mean()
    return 0.1 * ce + neg


class ZeroShotProbe(nn.Module):
    """Projection heads for both branches; the text classifier stays fixed."""

    def __init__(self, enc_dim: int, dec_dim: int, text: torch.Tensor, partition: Partition):
        super().__init__()
        partition.validate(text.shape[0])
        self.partition = partition
        self.register_buffer("text", unit_rows(text))
        self.p_enc = nn.Linear(enc_dim, text.shape[1])
        self.p_dec = nn.Linear(dec_dim, text.shape[1])
        self.alpha_enc = nn.Parameter(torch.tensor(1.0))
        self.alpha_dec = nn.Parameter(torch.tensor(1.0))
        self.gamma = nn.Parameter(torch.tensor(math.log(10.0)))

    def forward(self, f_enc: torch.Tensor, f_dec: torch.Tensor) -> torch.Tensor:
        return zero_shot_logits(f_enc, f_dec, self.text, self.alpha_enc, self.alpha_dec,
                                self.gamma, self.p_enc, self.p_dec)


def probe_zero_shot(f_enc: torch.Tensor, f_dec: torch.Tensor, labels: torch.Tensor,
                    text: torch.Tensor, partition: Partition, steps: int = 300,
                    lr: float = 1e-2, seed: int = 0, eval_set=None):
    """Train on seen labels; report mIoU on seen and unseen classes and their harmonic mean.

    Features are channels-last and at label resolution: (B, H, W, c).
    """
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    probe = ZeroShotProbe(f_enc.shape[-1], f_dec.shape[-1], text, partition).to(f_dec.dtype)
    torch.random.set_rng_state(gen_state)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    flat_lab = labels.reshape(-1)
    for _ in range(steps):
        opt.zero_grad()
        logits = probe(f_enc, f_dec).reshape(-1, text.shape[0])
        zero_shot_loss(logits, flat_lab, partition).backward()
        opt.step()
    e2, d2, l2 = eval_set if eval_set is not None else (f_enc, f_dec, labels)
    with torch.no_grad():
        pred = probe(e2, d2).argmax(-1).numpy()
    gt = l2.numpy()
    scores = {}
    for name, cls in (("seen", partition.seen), ("unseen", partition.unseen)):
        ious = [jaccard(pred == c, gt == c) for c in cls if (gt == c).any()]
        scores[f"miou_{name}"] = float(np.mean(ious)) if ious else 0.0
    scores["harmonic"] = harmonic(scores["miou_seen"], scores["miou_unseen"])
    return probe, scores


def load_text_embeddings(path) -> torch.Tensor:
    """Read a 1 x C x dim LGRD raster of class embeddings, unit-normalised per row."""
    g = raster_read(path)
    if g.shape[0] != 1:
        raise GridError(f"text embeddings must be a 1 x C x dim raster, got {g.shape}")
    return unit_rows(torch.from_numpy(g[0].astype(np.float64)))


def random_text_embeddings(n_classes: int, dim: int, seed: int = 0) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return unit_rows(torch.randn(n_classes, dim, generator=gen, dtype=torch.float64))
