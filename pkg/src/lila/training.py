"""LILA training loop, the ERM distillation baseline, and checkpointing.

One step: sample temporal pairs, cut two independent crops, run both crops
through the shared model, build cue targets (refined encoder features,
depth, flow), fit the ridge readout on the context crop and score it on the
query crop.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .grids import CropSpec, crop_apply
from .incontext import (
    LossWeights, RidgeProblem, downsample_context, flatten_spatial,
    in_context_loss, loss_l1, loss_total, predict, solve_ridge,
)
from .model import DecoderSpec, EncoderSpec, LilaModel
from .pamr import PamrConfig, pamr_refine
from .scenes import (
    FramePairSample, FrameRender, NoiseModel, SceneConfig, assemble_cues, inject_noise,
    load_manifest_sample, normalize_depth_pair, pair_from_renders, random_scene, read_manifest,
    render_frame,
)

log = logging.getLogger(__name__)

CUE_GROUPS = ("sd", "depth", "flow")
CHECKPOINT_VERSION = 1
_MAGIC = b"LILACKPT"


class TrainConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    # optimisation
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 8
    max_steps: int = 1000
    mode: str = "lila"                       # lila | erm
    seed: int = 0
    # sampling and crops
    delta_max: int = 5                       # 0: single-image ablation
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_size: int = 48
    use_crop: bool = True
    # loss and solve
    gamma: float = 1.0
    sigma: float | None = None               # None: batch median of cue gradients
    lam: float | None = None                 # None: relative policy below
    lambda_rel: float = 0.01
    add_bias: bool = True
    regularize_bias: bool = True
    context_factor: int = 7
    # cue preparation
    cues: tuple[str, ...] = CUE_GROUPS
    use_pamr: bool = True
    pamr_iterations: int = 20
    # synthetic data
    frame_size: int = 64
    n_scenes: int = 64
    n_sprites: int = 3
    n_frames: int = 16
    max_speed: float = 2.0
    camera_speed: float = 0.5
    flicker: float = 0.0
    flow_sigma: float = 0.0
    depth_sigma: float = 0.0
    blur_radius: int = 0
    dropout_prob: float = 0.0
    # model
    patch_size: int = 8
    enc_width: int = 64
    enc_blocks: int = 4
    enc_heads: int = 4
    enc_seed: int = 0
    dec_widths: tuple[int, ...] = (48, 64, 96, 128)
    out_dim: int = 128
    dec_seed: int = 1
    deterministic: bool = False              # float64 + deterministic kernels

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise TrainConfigError("learning rate must be positive and weight decay >= 0")
        if self.batch_size < 1 or self.max_steps < 0:
            raise TrainConfigError("batch size must be >= 1 and max steps >= 0")
        if self.mode not in ("lila", "erm"):
            raise TrainConfigError(f"mode must be 'lila' or 'erm', got {self.mode!r}")
        if self.delta_max < 0:
            raise TrainConfigError("delta_max must be >= 0")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise TrainConfigError(f"crop scale range {self.crop_scale} must lie in (0, 1]")
        if self.crop_size % self.patch_size:
            raise TrainConfigError("crop size must be divisible by the patch size")
        if self.crop_size > self.frame_size * hi:
            raise TrainConfigError(
                f"crop output {self.crop_size} exceeds frame {self.frame_size} x max scale {hi}")
        if not self.cues or any(c not in CUE_GROUPS for c in self.cues):
            raise TrainConfigError(f"cues must be a nonempty subset of {CUE_GROUPS}, got {self.cues}")
        if self.gamma < 0 or (self.sigma is not None and self.sigma <= 0):
            raise TrainConfigError("gamma must be >= 0 and sigma > 0")
        if self.context_factor < 1 or self.context_factor > self.crop_size:
            raise TrainConfigError("context factor must lie in [1, crop size]")
        if self.delta_max > self.n_frames - 1:
            raise TrainConfigError("delta_max exceeds the clip length")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.deterministic else torch.float32

    def noise_model(self) -> NoiseModel:
        return NoiseModel(self.flow_sigma, self.depth_sigma, self.blur_radius, self.dropout_prob)

    def pamr_config(self) -> PamrConfig:
        return PamrConfig(iterations=self.pamr_iterations)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def config_from_dict(d: dict) -> TrainConfig:
    known = {f.name: f for f in fields(TrainConfig)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise TrainConfigError(f"unknown config keys: {unknown}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    cfg = TrainConfig(**kw)
    cfg.validate()
    return cfg


def load_config(path) -> TrainConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))


def build_model(cfg: TrainConfig) -> LilaModel:
    enc = EncoderSpec(patch_size=cfg.patch_size, width=cfg.enc_width, blocks=cfg.enc_blocks,
                      taps=tuple(range(cfg.enc_blocks - 3, cfg.enc_blocks + 1)),
                      heads=cfg.enc_heads, seed=cfg.enc_seed)
    dec = DecoderSpec(widths=tuple(cfg.dec_widths), out_dim=cfg.out_dim, seed=cfg.dec_seed)
    return LilaModel(enc, dec).to(cfg.dtype)


# -- data -----------------------------------------------------------------------

class SceneDataset:
    """Synthetic clips; frames are rendered once and cached."""

    def __init__(self, scenes: list[SceneConfig]):
        if not scenes:
            raise TrainConfigError("dataset is empty")
        self.scenes = scenes
        self._frames: dict[tuple[int, int], FrameRender] = {}

    @classmethod
    def synthetic(cls, cfg: TrainConfig, split: str = "train", n: int | None = None):
        offset = {"train": 0, "test": 1_000_003}[split]
        n = cfg.n_scenes if n is None else n
        return cls([random_scene(cfg.seed * 7919 + offset + i, height=cfg.frame_size,
                                 width=cfg.frame_size, n_sprites=cfg.n_sprites,
                                 n_frames=cfg.n_frames, max_speed=cfg.max_speed,
                                 camera_speed=cfg.camera_speed, flicker=cfg.flicker)
                    for i in range(n)])

    def __len__(self) -> int:
        return len(self.scenes)

    def max_delta(self) -> int:
        return min(s.n_frames for s in self.scenes) - 1

    def _frame(self, index: int, t: int) -> FrameRender:
        key = (index, t)
        if key not in self._frames:
            r = render_frame(self.scenes[index], t)
            # normals and categories are not needed for training pairs
            self._frames[key] = FrameRender(r.image, r.depth, r.ids, None, None)
        return self._frames[key]

    def pair(self, index: int, t: int, delta: int) -> FramePairSample:
        cfg = self.scenes[index]
        s = pair_from_renders(cfg, self._frame(index, t), self._frame(index, t + delta), t, delta)
        s.depth_t, s.depth_td = normalize_depth_pair(s.depth_t, s.depth_td)
        return s

    def draw(self, delta: int, rng) -> FramePairSample:
        i = int(rng.integers(len(self.scenes)))
        t = int(rng.integers(self.scenes[i].n_frames - delta))
        return self.pair(i, t, delta)


class ManifestDataset:
    """Externally produced pairs listed in a manifest; the gap is fixed per record."""

    def __init__(self, manifest_path):
        self.records = read_manifest(manifest_path)
        if not self.records:
            raise TrainConfigError("manifest lists no pairs")
        self._cache: dict[int, FramePairSample] = {}

    def __len__(self) -> int:
        return len(self.records)

    def max_delta(self) -> int:
        return max(r["delta"] for r in self.records)

    def draw(self, delta: int, rng) -> FramePairSample:
        i = int(rng.integers(len(self.records)))
        if i not in self._cache:
            s = load_manifest_sample(self.records[i])
            s.depth_t, s.depth_td = normalize_depth_pair(s.depth_t, s.depth_td)
            self._cache[i] = s
        return self._cache[i]


def sample_pair(dataset, cfg: TrainConfig, rng) -> tuple[FramePairSample, int]:
    """Draw a gap uniformly from {1..delta_max} (0 when delta_max = 0) and a pair."""
    if len(dataset) == 0:
        raise TrainConfigError("dataset is empty")
    delta = 0 if cfg.delta_max == 0 else int(rng.integers(1, cfg.delta_max + 1))
    sample = dataset.draw(delta, rng)
    return sample, sample.delta


def _random_square(h: int, w: int, cfg: TrainConfig, rng) -> CropSpec:
    out = cfg.crop_size
    if not cfg.use_crop:
        side = min(h, w)
        return CropSpec((h - side) // 2, (w - side) // 2, side, side, out, out)
    lo, hi = cfg.crop_scale
    side = int(round(rng.uniform(lo, hi) * min(h, w)))
    side = min(max(side, 1), min(h, w))
    top = int(rng.integers(h - side + 1))
    left = int(rng.integers(w - side + 1))
    return CropSpec(top, left, side, side, out, out)


def make_crops(sample: FramePairSample, cfg: TrainConfig, rng):
    """Two independent aspect-preserving crops, one per frame."""
    h, w = sample.shape
    if cfg.crop_size > min(h, w) * cfg.crop_scale[1] and cfg.use_crop:
        raise TrainConfigError(f"crop {cfg.crop_size} impossible on a {h}x{w} frame")
    s0 = _random_square(h, w, cfg, rng)
    sd = _random_square(h, w, cfg, rng)
    return crop_apply(sample.frame_t, s0), s0, crop_apply(sample.frame_td, sd), sd


@dataclass
class Batch:
    c0: torch.Tensor            # (B, 3, H, W)
    cd: torch.Tensor
    cue0: torch.Tensor          # (B, H, W, 3): depth, flow (context convention)
    cued: torch.Tensor          # (B, H, W, 3): depth, negated backward flow
    clean0: torch.Tensor
    cleand: torch.Tensor
    deltas: list[int]
    specs: list[tuple[CropSpec, CropSpec]]

    @property
    def size(self) -> int:
        return self.c0.shape[0]


def make_batch(dataset, cfg: TrainConfig, rng) -> Batch:
    nm = cfg.noise_model()
    c0, cd, q0, qd, k0, kd, deltas, specs = [], [], [], [], [], [], [], []
    for _ in range(cfg.batch_size):
        clean, delta = sample_pair(dataset, cfg, rng)
        noisy = inject_noise(clean, nm, rng)
        a, s0, b, sd = make_crops(clean, cfg, rng)
        c0.append(a)
        cd.append(b)
        q0.append(assemble_cues(None, noisy.depth_t, noisy.flow_fwd, "context", s0))
        qd.append(assemble_cues(None, noisy.depth_td, noisy.flow_bwd, "query", sd))
        k0.append(assemble_cues(None, clean.depth_t, clean.flow_fwd, "context", s0))
        kd.append(assemble_cues(None, clean.depth_td, clean.flow_bwd, "query", sd))
        deltas.append(delta)
        specs.append((s0, sd))

    def stack(xs, chw=False):
        t = torch.from_numpy(np.stack(xs)).to(cfg.dtype)
        return t.permute(0, 3, 1, 2).contiguous() if chw else t

    return Batch(stack(c0, True), stack(cd, True), stack(q0), stack(qd), stack(k0), stack(kd),
                 deltas, specs)


# -- targets --------------------------------------------------------------------

def _standardize_pair(fa: torch.Tensor, fb: torch.Tensor, eps: float = 1e-6):
    """Per-element channel standardisation over both crops, channels-last (B, H, W, C)."""
    both = torch.cat([fa, fb], dim=1)
    mu = both.mean(dim=(1, 2), keepdim=True)
    sd = both.std(dim=(1, 2), keepdim=True, unbiased=False)
    return (fa - mu) / (sd + eps), (fb - mu) / (sd + eps)


@torch.no_grad()
def prepare_targets(batch: Batch, levels: list[torch.Tensor], cfg: TrainConfig,
                    clean: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """(G_context, G_query) as detached channels-last tensors.

    ``levels`` are the encoder outputs for ``cat(c0, cd)``; the refined last
    level becomes the feature cue.
    """
    b = batch.size
    h, w = batch.c0.shape[-2:]
    parts0, partsd = [], []
    if "sd" in cfg.cues:
        feat = F.interpolate(levels[-1], size=(h, w), mode="bilinear", align_corners=False)
        if cfg.use_pamr:
            feat = pamr_refine(feat, torch.cat([batch.c0, batch.cd]), cfg.pamr_config())
        feat = feat.permute(0, 2, 3, 1)
        f0, fd = _standardize_pair(feat[:b], feat[b:])
        parts0.append(f0)
        partsd.append(fd)
    q0, qd = (batch.clean0, batch.cleand) if clean else (batch.cue0, batch.cued)
    if "depth" in cfg.cues:
        parts0.append(q0[..., :1])
        partsd.append(qd[..., :1])
    if "flow" in cfg.cues:
        parts0.append(q0[..., 1:])
        partsd.append(qd[..., 1:])
    return torch.cat(parts0, -1).detach(), torch.cat(partsd, -1).detach()


def target_channels(cfg: TrainConfig) -> int:
    return (cfg.enc_width if "sd" in cfg.cues else 0) + ("depth" in cfg.cues) + 2 * ("flow" in cfg.cues)


# -- state and steps --------------------------------------------------------------

@dataclass
class TrainState:
    cfg: TrainConfig
    model: LilaModel
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    head: torch.Tensor | None = None         # fixed ERM head, (m, d)
    step: int = 0
    losses: list[float] = field(default_factory=list)


def _erm_head(cfg: TrainConfig) -> torch.Tensor:
    gen = torch.Generator().manual_seed(cfg.dec_seed + 7)
    m = target_channels(cfg)
    return (torch.randn(m, cfg.out_dim, generator=gen, dtype=torch.float64)
            / cfg.out_dim ** 0.5).to(cfg.dtype)


def set_determinism(on: bool) -> None:
    torch.use_deterministic_algorithms(on)


def init_state(cfg: TrainConfig) -> TrainState:
    cfg.validate()
    set_determinism(cfg.deterministic)
    torch.manual_seed(cfg.seed)
    model = build_model(cfg)
    opt = torch.optim.AdamW(model.decoder_parameters(), lr=cfg.learning_rate,
                            weight_decay=cfg.weight_decay)
    head = _erm_head(cfg) if cfg.mode == "erm" else None
    return TrainState(cfg, model, opt, np.random.default_rng(cfg.seed), head)


def _features(model: LilaModel, batch: Batch):
    images = torch.cat([batch.c0, batch.cd])
    x, levels = model(images, return_levels=True)
    x = x.permute(0, 2, 3, 1)
    b = batch.size
    return x[:b], x[b:], levels


def lila_loss(x0, xd, g0, gd, cfg: TrainConfig):
    """Ridge fit on the downsampled context, loss on the full-size query."""
    weights = LossWeights(cfg.gamma, cfg.sigma)
    loss, _, pred = in_context_loss(x0, xd, g0, gd, weights, cfg.context_factor, cfg.lam,
                                    cfg.add_bias, cfg.lambda_rel, cfg.regularize_bias)
    return loss, pred


def lila_objective(state: TrainState, batch: Batch):
    x0, xd, levels = _features(state.model, batch)
    g0, gd = prepare_targets(batch, levels, state.cfg)
    return lila_loss(x0, xd, g0, gd, state.cfg)


def erm_objective(state: TrainState, batch: Batch):
    cfg = state.cfg
    x0, xd, levels = _features(state.model, batch)
    g0, gd = prepare_targets(batch, levels, cfg)
    weights = LossWeights(cfg.gamma, cfg.sigma)
    p0 = x0 @ state.head.T
    pd = xd @ state.head.T
    loss = 0.5 * (loss_total(p0, g0, weights) + loss_total(pd, gd, weights))
    return loss, pd


def _step(state: TrainState, batch: Batch, objective) -> float:
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    loss, _ = objective(state, batch)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at step {state.step}")
    loss.backward()
    state.optimizer.step()
    state.step += 1
    value = float(loss.detach())
    state.losses.append(value)
    return value


def train_step_lila(state: TrainState, batch: Batch) -> float:
    return _step(state, batch, lila_objective)


def train_step_erm(state: TrainState, batch: Batch) -> float:
    return _step(state, batch, erm_objective)


def train_step(state: TrainState, dataset) -> float:
    batch = make_batch(dataset, state.cfg, state.rng)
    fn = train_step_lila if state.cfg.mode == "lila" else train_step_erm
    return fn(state, batch)


def train(cfg: TrainConfig, dataset=None, state: TrainState | None = None,
          on_step=None, log_every: int = 50) -> TrainState:
    state = state or init_state(cfg)
    dataset = dataset or SceneDataset.synthetic(cfg)
    while state.step < cfg.max_steps:
        loss = train_step(state, dataset)
        if on_step is not None:
            on_step(state.step, loss)
        if log_every and state.step % log_every == 0:
            log.info("step %d loss %.5f", state.step, loss)
    return state


# -- held-out evaluation ----------------------------------------------------------

@torch.no_grad()
def heldout_cue_error(state: TrainState, dataset, n_batches: int = 8, seed: int = 12345,
                      readout: str = "native") -> float:
    """Mean absolute error of predicted depth/flow against clean query cues.

    readout "native" scores each mode's own cue predictor: the in-context
    ridge fit on noisy context cues for LILA, the fixed head for ERM.
    readout "ridge" applies the in-context fit to either model's features.
    """
    if readout not in ("native", "ridge"):
        raise ValueError(f"unknown readout {readout!r}")
    cfg = state.cfg
    rng = np.random.default_rng(seed)
    state.model.eval()
    errs = []
    with torch.no_grad():
        for _ in range(n_batches):
            batch = make_batch(dataset, cfg, rng)
            x0, xd, _ = _features(state.model, batch)
            if readout == "native" and cfg.mode == "erm":
                pred = (xd @ state.head.T)[..., -batch.cleand.shape[-1]:]
            else:
                xs, gs = downsample_context(x0, batch.cue0, cfg.context_factor)
                sol = solve_ridge(RidgeProblem(flatten_spatial(xs), flatten_spatial(gs), cfg.lam,
                                               cfg.add_bias, cfg.regularize_bias, cfg.lambda_rel))
                pred = predict(xd, sol)
            errs.append(float(loss_l1(pred.double(), batch.cleand.double())))
    return float(np.mean(errs))


# -- checkpoints ------------------------------------------------------------------

def checkpoint_save(state: TrainState, path) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config_hash": state.cfg.config_hash(),
        "config": state.cfg.to_dict(),
        "step": state.step,
        "decoder": state.model.decoder.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "head": state.head,
        "rng": state.rng.bit_generator.state,
        "torch_rng": torch.random.get_rng_state(),
        "losses": list(state.losses),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    Path(path).write_bytes(_MAGIC + hashlib.sha256(body).digest() + body)


def checkpoint_load(path, cfg: TrainConfig) -> TrainState:
    raw = Path(path).read_bytes()
    if raw[:len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    digest, body = raw[len(_MAGIC):len(_MAGIC) + 32], raw[len(_MAGIC) + 32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: integrity check failed (checksum mismatch)")
    payload = torch.load(io.BytesIO(body), weights_only=False)
    if payload["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {payload['version']}, "
                              f"expected {CHECKPOINT_VERSION}")
    if payload["config_hash"] != cfg.config_hash():
        raise CheckpointError(f"{path}: config hash mismatch: checkpoint "
                              f"{payload['config_hash']} vs current {cfg.config_hash()}")
    state = init_state(cfg)
    state.model.decoder.load_state_dict(payload["decoder"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.head = payload["head"]
    state.rng.bit_generator.state = payload["rng"]
    torch.random.set_rng_state(payload["torch_rng"])
    state.step = payload["step"]
    state.losses = list(payload["losses"])
    return state
