"""Frozen patch-transformer encoder and a trainable DPT-style decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .grids import GridError, as_grid, raster_read, raster_write

OUTPUT_DIMS = {"small": 128, "base": 192, "large": 256}


@dataclass(frozen=True)
class EncoderSpec:
    patch_size: int = 8
    width: int = 64
    blocks: int = 4
    taps: tuple[int, ...] = (1, 2, 3, 4)   # 1-based block indices
    heads: int = 4
    seed: int = 0
    frozen: bool = True
    weight_source: str = "random-seeded"

    def validate(self) -> None:
        if len(self.taps) != 4:
            raise ValueError("exactly four level taps are required")
        if any(a >= b for a, b in zip(self.taps, self.taps[1:])):
            raise ValueError(f"taps must strictly increase, got {self.taps}")
        if self.taps[0] < 1 or self.taps[-1] > self.blocks:
            raise ValueError(f"taps {self.taps} outside 1..{self.blocks}")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")


@dataclass(frozen=True)
class DecoderSpec:
    widths: tuple[int, ...] = (48, 64, 96, 128)
    out_dim: int = OUTPUT_DIMS["small"]
    seed: int = 1

    def validate(self) -> None:
        if len(self.widths) != 4:
            raise ValueError("decoder needs four fusion stages")
        if self.out_dim <= 0:
            raise ValueError("output dimensionality must be positive")


def _sincos_2d(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sine-cosine position table, shape (h * w, dim)."""
    quarter = dim // 4
    omega = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float64) / max(quarter, 1)))
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64),
                            torch.arange(w, dtype=torch.float64), indexing="ij")
    parts = []
    for coord in (ys.flatten(), xs.flatten()):
        arg = coord[:, None] * omega[None]
        parts += [torch.sin(arg), torch.cos(arg)]
    table = torch.cat(parts, dim=1)
    if table.shape[1] < dim:
        table = F.pad(table, (0, dim - table.shape[1]))
    return table


class PatchEncoder(nn.Module):
    """Small ViT returning the token grids after four tapped blocks."""

    def __init__(self, spec: EncoderSpec = EncoderSpec()):
        super().__init__()
        spec.validate()
        self.spec = spec
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(spec.seed)
        self.patch_embed = nn.Conv2d(3, spec.width, spec.patch_size, stride=spec.patch_size)
        self.blocks = nn.ModuleList([
            nn.TransformerEncoderLayer(spec.width, spec.heads, dim_feedforward=2 * spec.width,
                                       dropout=0.0, batch_first=True, norm_first=True)
            for _ in range(spec.blocks)])
        torch.random.set_rng_state(gen_state)
        if spec.frozen:
            self.requires_grad_(False)
            self.eval()

    def train(self, mode: bool = True):
        # frozen encoders stay in inference mode
        return super().train(mode and not self.spec.frozen)

    def token_grid(self, h: int, w: int) -> tuple[int, int]:
        p = self.spec.patch_size
        if h % p or w % p:
            raise GridError(f"image {h}x{w} not divisible by patch size {p}")
        return h // p, w // p

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        b, _, h, w = image.shape
        gh, gw = self.token_grid(h, w)
        x = self.patch_embed(image).flatten(2).transpose(1, 2)
        x = x + _sincos_2d(gh, gw, self.spec.width).to(x.dtype)
        levels = []
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x)
            if i in self.spec.taps:
                levels.append(x.transpose(1, 2).reshape(b, -1, gh, gw))
        return levels


class ResidualConvUnit(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


class FusionBlock(nn.Module):
    def __init__(self, in_ch: int | None, ch: int):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, ch, 1) if in_ch is not None else None
        self.skip_unit = ResidualConvUnit(ch)
        self.out_unit = ResidualConvUnit(ch)

    def forward(self, skip, deeper=None):
        x = self.skip_unit(skip)
        if deeper is not None:
            deeper = F.interpolate(self.proj(deeper), size=skip.shape[-2:], mode="bilinear",
                                   align_corners=False)
            x = x + deeper
        return self.out_unit(x)


# reassembly scale of each level relative to the token grid
LEVEL_SCALES = (4.0, 2.0, 1.0, 0.5)


class DPTDecoder(nn.Module):
    """Reassemble four token grids at 4x/2x/1x/0.5x, fuse deep-to-shallow, project to d."""

    def __init__(self, in_width: int, spec: DecoderSpec = DecoderSpec()):
        super().__init__()
        spec.validate()
        self.spec = spec
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(spec.seed)
        w = spec.widths
        self.reassemble = nn.ModuleList([nn.Conv2d(in_width, c, 1) for c in w])
        self.fusion = nn.ModuleList([
            FusionBlock(w[i + 1] if i < 3 else None, w[i]) for i in range(4)])
        self.head = nn.Sequential(
            nn.Conv2d(w[0], w[0], 3, padding=1), nn.ReLU(), nn.Conv2d(w[0], spec.out_dim, 1))
        torch.random.set_rng_state(gen_state)

    def forward(self, levels: list[torch.Tensor], size: tuple[int, int]) -> torch.Tensor:
        if len(levels) != 4:
            raise GridError(f"decoder needs four levels, got {len(levels)}")
        ref = levels[0].shape
        for lv in levels[1:]:
            if lv.shape != ref:
                raise GridError(f"level shape mismatch: {tuple(lv.shape)} vs {tuple(ref)}")
        gh, gw = ref[-2:]
        feats = []
        for conv, lv, scale in zip(self.reassemble, levels, LEVEL_SCALES):
            tgt = (max(1, round(gh * scale)), max(1, round(gw * scale)))
            feats.append(F.interpolate(conv(lv), size=tgt, mode="bilinear",
                                       align_corners=False))
        x = None
        for i in (3, 2, 1, 0):
            x = self.fusion[i](feats[i], x)
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return self.head(x)


class LilaModel(nn.Module):
    """Encoder-decoder pair; only the decoder is trainable."""

    def __init__(self, encoder: EncoderSpec = EncoderSpec(), decoder: DecoderSpec = DecoderSpec()):
        super().__init__()
        self.encoder = PatchEncoder(encoder)
        self.decoder = DPTDecoder(encoder.width, decoder)

    @property
    def out_dim(self) -> int:
        return self.decoder.spec.out_dim

    def encode(self, image: torch.Tensor) -> list[torch.Tensor]:
        with torch.no_grad():
            return self.encoder(image)

    def decode(self, levels, size) -> torch.Tensor:
        return self.decoder(levels, size)

    def forward(self, image: torch.Tensor, return_levels: bool = False):
        levels = self.encode(image)
        out = self.decode(levels, image.shape[-2:])
        return (out, levels) if return_levels else out

    def decoder_parameters(self):
        return self.decoder.parameters()

    def encoder_bytes(self) -> bytes:
        return b"".join(p.detach().cpu().numpy().tobytes() for p in self.encoder.parameters())


# -- grid-level wrappers ------------------------------------------------------

def _image_tensor(image, dtype) -> torch.Tensor:
    g = as_grid(image, "image")
    if g.shape[2] != 3:
        raise GridError("image must have 3 channels")
    return torch.from_numpy(np.ascontiguousarray(g)).permute(2, 0, 1)[None].to(dtype)


def _dtype(model: LilaModel) -> torch.dtype:
    return next(model.decoder.parameters()).dtype


def encode(model: LilaModel, image) -> list[np.ndarray]:
    levels = model.encode(_image_tensor(image, _dtype(model)))
    return [lv[0].permute(1, 2, 0).numpy() for lv in levels]


def decode(model: LilaModel, levels: list[np.ndarray], size) -> np.ndarray:
    ts = [torch.from_numpy(np.ascontiguousarray(lv)).permute(2, 0, 1)[None].to(_dtype(model))
          for lv in levels]
    with torch.no_grad():
        return model.decode(ts, tuple(size))[0].permute(1, 2, 0).numpy()


def forward(model: LilaModel, image) -> np.ndarray:
    with torch.no_grad():
        return model(_image_tensor(image, _dtype(model)))[0].permute(1, 2, 0).numpy()


def export_levels(levels: list[np.ndarray], directory, image_id: str) -> None:
    for k, lv in enumerate(levels):
        raster_write(lv, Path(directory) / f"{image_id}.lvl{k}.lgrd")


def load_external_levels(directory, image_id: str) -> list[np.ndarray]:
    """Read externally exported per-level embeddings ``<id>.lvl{0..3}.lgrd``."""
    levels = [raster_read(Path(directory) / f"{image_id}.lvl{k}.lgrd") for k in range(4)]
    for lv in levels[1:]:
        if lv.shape != levels[0].shape:
            raise GridError(f"{image_id}: embedding levels disagree in shape")
    return levels
