"""Synthetic video scenes with analytic depth and bidirectional flow.

Scenes are layered: a textured background that pans with the camera and a
set of elliptical sprites that translate rigidly in image space. Every sprite
carries a smooth analytic texture and a planar depth attached to its own
local coordinates, so moving a sprite moves its colour, depth and normals
together and the flow between any two frames is an exact translation.

Flow rasters have two channels ``(dx, dy)`` in pixels of the grid they live
on. ``flow_fwd`` is defined on frame ``t`` and points into frame ``t + delta``;
``flow_bwd`` is defined on frame ``t + delta`` and points back. Occluded
pixels carry the flow of whatever is visible there.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .grids import CropSpec, GridError, as_grid, crop_apply, raster_read, raster_write


class SceneConfigError(ValueError):
    pass


class IngestionError(ValueError):
    pass


# Normal vectors are normalize(-gain * dD/dx, -gain * dD/dy, 1).
NORMAL_GAIN = 20.0
N_WAVES = 3


@dataclass(frozen=True)
class Sprite:
    center: tuple[float, float]          # (x, y) at frame 0, pixels
    velocity: tuple[float, float]        # (dx, dy) per frame
    radius: tuple[float, float]          # (rx, ry) ellipse semi-axes
    depth: float
    texture_seed: int
    category: int = 1
    depth_slope: tuple[float, float] = (0.0, 0.0)
    flicker: float = 0.0                 # relative brightness modulation amplitude


@dataclass(frozen=True)
class SceneConfig:
    height: int
    width: int
    sprites: tuple[Sprite, ...]
    background_seed: int = 0
    background_depth: float = 10.0
    background_depth_slope: tuple[float, float] = (0.0, 0.0)
    camera_velocity: tuple[float, float] = (0.0, 0.0)
    n_frames: int = 16
    bounce: bool = True
    seed: int = 0

    @property
    def sprite_count(self) -> int:
        return len(self.sprites)

    def validate(self) -> None:
        if self.height < 2 or self.width < 2:
            raise SceneConfigError(f"canvas too small: {self.height}x{self.width}")
        if self.n_frames < 1:
            raise SceneConfigError("n_frames must be >= 1")
        if self.background_depth <= 0:
            raise SceneConfigError("background depth must be positive")
        for k, s in enumerate(self.sprites):
            if s.depth <= 0:
                raise SceneConfigError(f"sprite {k}: depth must be positive, got {s.depth}")
            if min(s.radius) <= 0:
                raise SceneConfigError(f"sprite {k}: radius must be positive")
            if s.depth >= self.background_depth:
                raise SceneConfigError(f"sprite {k}: must lie in front of the background")


@dataclass(frozen=True)
class NoiseModel:
    flow_sigma: float = 0.0
    depth_sigma: float = 0.0
    blur_radius: int = 0
    dropout_prob: float = 0.0
    patch_size: int = 8
    corruption_value: float = 0.0

    def validate(self) -> None:
        if self.flow_sigma < 0 or self.depth_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")
        if self.blur_radius < 0:
            raise ValueError("blur radius must be >= 0")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout probability must lie in [0, 1]")
        if self.patch_size < 1:
            raise ValueError("patch size must be >= 1")

    @property
    def is_zero(self) -> bool:
        return (self.flow_sigma == 0 and self.depth_sigma == 0 and self.blur_radius == 0
                and self.dropout_prob == 0)


@dataclass
class FramePairSample:
    frame_t: np.ndarray
    frame_td: np.ndarray
    flow_fwd: np.ndarray
    flow_bwd: np.ndarray
    depth_t: np.ndarray
    depth_td: np.ndarray
    delta: int
    labels_t: np.ndarray | None = None
    labels_td: np.ndarray | None = None
    provenance: str = "synthetic"

    RASTERS = ("frame_t", "frame_td", "flow_fwd", "flow_bwd", "depth_t", "depth_td")

    @property
    def shape(self) -> tuple[int, int]:
        return self.frame_t.shape[:2]

    def equals(self, other: "FramePairSample") -> bool:
        return self.delta == other.delta and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in self.RASTERS)


@dataclass
class FrameRender:
    image: np.ndarray      # H x W x 3 in [0, 1]
    depth: np.ndarray      # H x W x 1
    ids: np.ndarray        # H x W int, 0 = background, k = sprite k-1
    categories: np.ndarray  # H x W int semantic class, 0 = background
    normals: np.ndarray    # H x W x 3 unit vectors


def _texture_params(seed: int, category: int | None):
    rng = np.random.default_rng(seed)
    if category is None:
        base = rng.uniform(0.25, 0.75, size=3)
    else:
        palette = np.random.default_rng(10_000 + category)
        base = np.clip(palette.uniform(0.1, 0.9, size=3) + rng.normal(0, 0.03, size=3), 0, 1)
    # low spatial frequencies keep bilinear warping error small
    period = rng.uniform(6.0, 16.0, size=N_WAVES)
    angle = rng.uniform(0, 2 * np.pi, size=N_WAVES)
    freq = np.stack([np.cos(angle), np.sin(angle)], axis=1) / period[:, None]
    amp = rng.uniform(0.04, 0.12, size=(N_WAVES, 3))
    phase = rng.uniform(0, 2 * np.pi, size=N_WAVES)
    flicker_period = rng.uniform(6.0, 14.0)
    flicker_phase = rng.uniform(0, 2 * np.pi)
    return base, freq, amp, phase, flicker_period, flicker_phase


def _texture(params, lx: np.ndarray, ly: np.ndarray) -> np.ndarray:
    base, freq, amp, phase, _, _ = params
    out = np.broadcast_to(base, lx.shape + (3,)).copy()
    for k in range(N_WAVES):
        wave = np.sin(2 * np.pi * (freq[k, 0] * lx + freq[k, 1] * ly) + phase[k])
        out += wave[..., None] * amp[k]
    return out


def _reflect(x, lo: float, hi: float):
    span = hi - lo
    if span <= 0:
        return np.full_like(np.asarray(x, dtype=float), lo)
    m = np.mod(np.asarray(x, dtype=float) - lo, 2 * span)
    return lo + np.where(m <= span, m, 2 * span - m)


def sprite_position(cfg: SceneConfig, k: int, t: float) -> np.ndarray:
    s = cfg.sprites[k]
    x = s.center[0] + s.velocity[0] * t
    y = s.center[1] + s.velocity[1] * t
    if cfg.bounce:
        x = float(_reflect(x, 0.0, cfg.width - 1.0))
        y = float(_reflect(y, 0.0, cfg.height - 1.0))
    return np.array([x, y], dtype=np.float64)


def _check_on_canvas(cfg: SceneConfig, k: int, pos: np.ndarray, t: int) -> None:
    s = cfg.sprites[k]
    if (pos[0] + s.radius[0] < 0 or pos[0] - s.radius[0] > cfg.width - 1
            or pos[1] + s.radius[1] < 0 or pos[1] - s.radius[1] > cfg.height - 1):
        raise SceneConfigError(f"sprite {k} is fully off-canvas at frame {t}")


def render_frame(cfg: SceneConfig, t: int) -> FrameRender:
    cfg.validate()
    h, w = cfg.height, cfg.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    cam = np.asarray(cfg.camera_velocity, dtype=np.float64) * t
    bx, by = xs - cam[0], ys - cam[1]
    image = _texture(_texture_params(cfg.background_seed, None), bx, by)
    gx, gy = cfg.background_depth_slope
    depth = cfg.background_depth + gx * bx + gy * by
    slope_x = np.full((h, w), float(gx))
    slope_y = np.full((h, w), float(gy))
    ids = np.zeros((h, w), dtype=np.int64)
    categories = np.zeros((h, w), dtype=np.int64)

    # painter's order: far sprites first
    order = sorted(range(cfg.sprite_count), key=lambda k: -cfg.sprites[k].depth)
    for k in order:
        s = cfg.sprites[k]
        pos = sprite_position(cfg, k, t)
        _check_on_canvas(cfg, k, pos, t)
        lx, ly = xs - pos[0], ys - pos[1]
        inside = (lx / s.radius[0]) ** 2 + (ly / s.radius[1]) ** 2 <= 1.0
        params = _texture_params(s.texture_seed, s.category)
        color = _texture(params, lx, ly)
        if s.flicker:
            _, _, _, _, period, phase = params
            color = color * (1.0 + s.flicker * np.sin(2 * np.pi * t / period + phase))
        image = np.where(inside[..., None], color, image)
        depth = np.where(inside, s.depth + s.depth_slope[0] * lx + s.depth_slope[1] * ly, depth)
        slope_x = np.where(inside, s.depth_slope[0], slope_x)
        slope_y = np.where(inside, s.depth_slope[1], slope_y)
        ids = np.where(inside, k + 1, ids)
        categories = np.where(inside, s.category, categories)

    normals = np.stack([-NORMAL_GAIN * slope_x, -NORMAL_GAIN * slope_y, np.ones((h, w))], -1)
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    return FrameRender(np.clip(image, 0.0, 1.0), np.maximum(depth, 1e-3)[..., None],
                       ids, categories, normals)


def _displacements(cfg: SceneConfig, t_from: int, t_to: int) -> np.ndarray:
    """Row 0 is the background, row k the displacement of sprite k-1."""
    rows = [np.asarray(cfg.camera_velocity, dtype=np.float64) * (t_to - t_from)]
    for k in range(cfg.sprite_count):
        rows.append(sprite_position(cfg, k, t_to) - sprite_position(cfg, k, t_from))
    return np.stack(rows)


def render_pair(cfg: SceneConfig, t: int, delta: int) -> FramePairSample:
    """Render frames ``t`` and ``t + delta`` with exact flows and depths.

    ``delta = 0`` yields the same frame twice with zero flow.
    """
    if t < 0 or delta < 0:
        raise SceneConfigError(f"need t >= 0 and delta >= 0, got t={t}, delta={delta}")
    if t + delta > cfg.n_frames - 1:
        raise SceneConfigError(f"frame {t + delta} beyond clip length {cfg.n_frames}")
    return pair_from_renders(cfg, render_frame(cfg, t), render_frame(cfg, t + delta), t, delta)


def pair_from_renders(cfg: SceneConfig, a: FrameRender, b: FrameRender, t: int,
                      delta: int) -> FramePairSample:
    """Assemble a pair from already rendered frames ``t`` and ``t + delta``."""
    fwd = _displacements(cfg, t, t + delta)[a.ids]
    bwd = _displacements(cfg, t + delta, t)[b.ids]
    return FramePairSample(
        frame_t=a.image, frame_td=b.image, flow_fwd=fwd, flow_bwd=bwd,
        depth_t=a.depth, depth_td=b.depth, delta=delta,
        labels_t=a.ids, labels_td=b.ids)


def random_scene(seed: int, height: int = 48, width: int = 48, n_sprites: int = 3,
                 n_frames: int = 16, max_speed: float = 2.0, camera_speed: float = 0.5,
                 flicker: float = 0.0, n_categories: int = 4, slope: float = 0.0) -> SceneConfig:
    rng = np.random.default_rng(seed)
    sprites = []
    for _ in range(n_sprites):
        r = rng.uniform(0.15, 0.3, size=2) * min(height, width)
        c = (rng.uniform(0.2, 0.8) * (width - 1), rng.uniform(0.2, 0.8) * (height - 1))
        v = rng.uniform(-max_speed, max_speed, size=2)
        sprites.append(Sprite(
            center=(float(c[0]), float(c[1])), velocity=(float(v[0]), float(v[1])),
            radius=(float(r[0]), float(r[1])), depth=float(rng.uniform(1.0, 8.0)),
            texture_seed=int(rng.integers(1 << 30)),
            category=int(rng.integers(1, n_categories + 1)),
            depth_slope=tuple(float(s) for s in rng.uniform(-slope, slope, size=2)),
            flicker=float(flicker)))
    cam = rng.uniform(-camera_speed, camera_speed, size=2)
    bg_slope = (0.0, float(rng.uniform(0, slope))) if slope else (0.0, 0.0)
    return SceneConfig(height=height, width=width, sprites=tuple(sprites),
                       background_seed=int(rng.integers(1 << 30)), background_depth=10.0,
                       background_depth_slope=bg_slope,
                       camera_velocity=(float(cam[0]), float(cam[1])),
                       n_frames=n_frames, seed=seed)


# -- consistency utilities ---------------------------------------------------

def warp_bilinear(src, flow) -> np.ndarray:
    """Sample ``src`` at ``p + flow(p)`` for every pixel ``p`` (border-clamped)."""
    src = as_grid(src, "src")
    flow = as_grid(flow, "flow")
    h, w, _ = src.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    x = np.clip(xs + flow[..., 0], 0, w - 1)
    y = np.clip(ys + flow[..., 1], 0, h - 1)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def mutually_visible(ids_src: np.ndarray, ids_dst: np.ndarray, flow) -> np.ndarray:
    """Pixels of the source frame whose target position lands inside the canvas
    with all four bilinear neighbours showing the same object."""
    h, w = ids_src.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    x = xs + flow[..., 0]
    y = ys + flow[..., 1]
    ok = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc, yc = np.clip(x, 0, w - 1), np.clip(y, 0, h - 1)
    x0, y0 = np.floor(xc).astype(int), np.floor(yc).astype(int)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
        ok &= ids_dst[yy, xx] == ids_src
    return ok


# -- estimator noise ----------------------------------------------------------

def _dropout(g: np.ndarray, nm: NoiseModel, rng) -> np.ndarray:
    h, w, _ = g.shape
    ph, pw = -(-h // nm.patch_size), -(-w // nm.patch_size)
    drop = rng.random((ph, pw)) < nm.dropout_prob
    mask = np.repeat(np.repeat(drop, nm.patch_size, 0), nm.patch_size, 1)[:h, :w]
    return np.where(mask[..., None], nm.corruption_value, g)


def _perturb(g: np.ndarray, sigma: float, nm: NoiseModel, rng) -> np.ndarray:
    out = g.astype(np.float64, copy=True)
    if nm.blur_radius > 0:
        size = (2 * nm.blur_radius + 1, 2 * nm.blur_radius + 1, 1)
        out = ndimage.uniform_filter(out, size=size, mode="nearest")
    if sigma > 0:
        out = out + rng.normal(0.0, sigma, size=out.shape)
    if nm.dropout_prob > 0:
        out = _dropout(out, nm, rng)
    return out


def inject_noise(sample: FramePairSample, nm: NoiseModel, rng) -> FramePairSample:
    """Perturb the four cue rasters independently; frames are left untouched."""
    nm.validate()
    if nm.is_zero:
        return replace(sample)
    return replace(
        sample,
        flow_fwd=_perturb(sample.flow_fwd, nm.flow_sigma, nm, rng),
        flow_bwd=_perturb(sample.flow_bwd, nm.flow_sigma, nm, rng),
        depth_t=_perturb(sample.depth_t, nm.depth_sigma, nm, rng),
        depth_td=_perturb(sample.depth_td, nm.depth_sigma, nm, rng),
    )


# -- external cue rasters -----------------------------------------------------

_CHANNELS = {"frame_t": 3, "frame_td": 3, "flow_fwd": 2, "flow_bwd": 2, "depth_t": 1, "depth_td": 1}
_WHAT = {"frame_t": "frame", "frame_td": "frame", "flow_fwd": "flow", "flow_bwd": "flow",
         "depth_t": "depth", "depth_td": "depth"}


def ingest_external_cues(frame_t, frame_td, flow_fwd, flow_bwd, depth_t, depth_td,
                         delta: int = 1) -> FramePairSample:
    """Load six LGRD rasters into a sample without resampling or noise."""
    paths = dict(frame_t=frame_t, frame_td=frame_td, flow_fwd=flow_fwd, flow_bwd=flow_bwd,
                 depth_t=depth_t, depth_td=depth_td)
    rasters = {}
    for key, path in paths.items():
        if not Path(path).exists():
            raise IngestionError(f"{key}: missing raster {path}")
        g = raster_read(path)
        want = _CHANNELS[key]
        if g.shape[2] != want:
            raise IngestionError(
                f"{_WHAT[key]} must have {want} channels ({key}: {path} has {g.shape[2]})")
        rasters[key] = g
    ref = rasters["frame_t"].shape[:2]
    for key, g in rasters.items():
        if g.shape[:2] != ref:
            raise IngestionError(
                f"size mismatch: {paths[key]} is {g.shape[0]}x{g.shape[1]}, "
                f"{paths['frame_t']} is {ref[0]}x{ref[1]}")
    return FramePairSample(delta=int(delta), provenance="external", **rasters)


def export_sample(sample: FramePairSample, directory, prefix: str) -> dict:
    """Write a sample as six LGRD rasters; returns the manifest record."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    record = {}
    for key in FramePairSample.RASTERS:
        name = f"{prefix}.{key}.lgrd"
        raster_write(getattr(sample, key), directory / name)
        record[key] = name
    record["delta"] = int(sample.delta)
    return record


MANIFEST_KEYS = ("frame_t", "frame_td", "flow_fwd", "flow_bwd", "depth_t", "depth_td", "delta")


def write_manifest(records: list[dict], path) -> None:
    Path(path).write_text(json.dumps(records, indent=1))


def read_manifest(path) -> list[dict]:
    path = Path(path)
    records = json.loads(path.read_text())
    if not isinstance(records, list):
        raise IngestionError(f"{path}: manifest must be a list of records")
    out = []
    for i, rec in enumerate(records):
        missing = [k for k in MANIFEST_KEYS if k not in rec]
        if missing:
            raise IngestionError(f"{path}: record {i} lacks keys {missing}")
        resolved = {k: str(path.parent / rec[k]) for k in MANIFEST_KEYS if k != "delta"}
        resolved["delta"] = int(rec["delta"])
        out.append(resolved)
    return out


def load_manifest_sample(record: dict) -> FramePairSample:
    return ingest_external_cues(**record)


# -- cue stacks ---------------------------------------------------------------

def normalize_depth_pair(d_a: np.ndarray, d_b: np.ndarray):
    """Joint min-max normalisation of the two depth maps of a pair to [0, 1]."""
    lo = min(d_a.min(), d_b.min())
    hi = max(d_a.max(), d_b.max())
    if hi - lo < 1e-12:
        return np.zeros_like(d_a), np.zeros_like(d_b)
    return (d_a - lo) / (hi - lo), (d_b - lo) / (hi - lo)


def standardize_features_pair(f_a: np.ndarray, f_b: np.ndarray, eps: float = 1e-6):
    """Channel-wise zero mean / unit variance over both feature maps of a pair."""
    both = np.concatenate([f_a.reshape(-1, f_a.shape[-1]), f_b.reshape(-1, f_b.shape[-1])])
    mu = both.mean(0)
    sd = both.std(0)
    return (f_a - mu) / (sd + eps), (f_b - mu) / (sd + eps)


def assemble_cues(F, D, U, direction: str, crop: CropSpec) -> np.ndarray:
    """Concatenate (features, depth, flow), negate the flow for queries, then crop.

    Flow channels are rescaled to pixels of the cropped grid. ``F`` may be
    ``None`` when the feature cue is switched off.
    """
    D = as_grid(D, "D")
    U = as_grid(U, "U")
    F = np.zeros(D.shape[:2] + (0,)) if F is None else as_grid(F, "F")
    if not (F.shape[:2] == D.shape[:2] == U.shape[:2]):
        raise GridError(f"cue size mismatch: F {F.shape[:2]}, D {D.shape[:2]}, U {U.shape[:2]}")
    if D.shape[2] != 1 or U.shape[2] != 2:
        raise GridError("depth needs 1 channel and flow 2 channels")
    if direction == "query":
        U = -U
    elif direction != "context":
        raise GridError(f"direction must be 'context' or 'query', got {direction!r}")
    stack = np.concatenate([F, D, U], axis=-1)
    out = crop_apply(stack, crop)
    out[..., -2] *= crop.scale_x
    out[..., -1] *= crop.scale_y
    return out
