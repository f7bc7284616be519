"""Synthetic evaluation sets built from the scene generator, and model-level evaluators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model import LilaModel
from .probes import (
    KnnConfig, Partition, fit_vos_linear, knn_propagate, probe_normals, probe_seg_attention,
    probe_zero_shot, random_text_embeddings, vos_score,
)
from .scenes import random_scene, render_frame

N_CATEGORIES = 4          # sprite categories; 0 is background


@dataclass
class BenchmarkConfig:
    size: int = 48
    n_sequences: int = 6
    n_frames: int = 12
    n_sprites: int = 3
    max_speed: float = 2.0
    camera_speed: float = 0.5
    flicker: float = 0.0
    n_images: int = 12
    probe_steps: int = 200
    seed: int = 0


@dataclass
class Sequence:
    frames: np.ndarray       # (T, H, W, 3)
    masks: np.ndarray        # (T, H, W) sprite ids, 0 = background


def vos_sequences(bc: BenchmarkConfig) -> list[Sequence]:
    out = []
    for i in range(bc.n_sequences):
        cfg = random_scene(bc.seed * 10_007 + 500_000 + i, height=bc.size, width=bc.size,
                           n_sprites=bc.n_sprites, n_frames=bc.n_frames,
                           max_speed=bc.max_speed, camera_speed=bc.camera_speed,
                           flicker=bc.flicker)
        renders = [render_frame(cfg, t) for t in range(bc.n_frames)]
        out.append(Sequence(np.stack([r.image for r in renders]),
                            np.stack([r.ids for r in renders])))
    return out


def still_images(bc: BenchmarkConfig, split: str):
    """Single frames of sloped sprites: images, normals and semantic categories."""
    offset = {"train": 700_000, "test": 800_000}[split]
    imgs, normals, cats = [], [], []
    for i in range(bc.n_images):
        cfg = random_scene(bc.seed * 10_007 + offset + i, height=bc.size, width=bc.size,
                           n_sprites=bc.n_sprites, n_frames=1, slope=0.08,
                           n_categories=N_CATEGORIES)
        r = render_frame(cfg, 0)
        imgs.append(r.image)
        normals.append(r.normals)
        cats.append(r.categories)
    return np.stack(imgs), np.stack(normals), np.stack(cats)


@torch.no_grad()
def model_features(model: LilaModel, frames: np.ndarray, batch: int = 8):
    """Decoder features (T, H, W, d) and last encoder level (T, c, h, w) for a frame stack."""
    dtype = next(model.decoder.parameters()).dtype
    model.eval()
    dec, enc = [], []
    for a in range(0, len(frames), batch):
        x = torch.from_numpy(np.ascontiguousarray(frames[a:a + batch])).permute(0, 3, 1, 2).to(dtype)
        out, levels = model(x, return_levels=True)
        dec.append(out)
        enc.append(levels[-1])
    return torch.cat(dec), torch.cat(enc)


def eval_vos_knn(model: LilaModel, seqs: list[Sequence], knn: KnnConfig = KnnConfig()):
    scores = []
    for s in seqs:
        dec, _ = model_features(model, s.frames)
        pred = knn_propagate(list(dec.permute(0, 2, 3, 1).numpy()), s.masks[0], knn)
        scores.append(vos_score(pred, list(s.masks)))
    j = float(np.mean([v.j for v in scores]))
    f = float(np.mean([v.f for v in scores]))
    return {"J": j, "F": f, "JF": 0.5 * (j + f)}


def eval_vos_linear(model: LilaModel, seqs: list[Sequence]):
    scores = []
    for s in seqs:
        dec, _ = model_features(model, s.frames)
        feats = dec.permute(0, 2, 3, 1).numpy()
        probe = fit_vos_linear(feats[0], s.masks[0])
        scores.append(vos_score([probe.predict(f) for f in feats], list(s.masks)))
    j = float(np.mean([v.j for v in scores]))
    f = float(np.mean([v.f for v in scores]))
    return {"J": j, "F": f, "JF": 0.5 * (j + f)}


def _to_tensor(a: np.ndarray, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a)).to(dtype)


def eval_normals(model: LilaModel, bc: BenchmarkConfig):
    dtype = next(model.decoder.parameters()).dtype
    sets = []
    for split in ("train", "test"):
        imgs, normals, _ = still_images(bc, split)
        dec, enc = model_features(model, imgs)
        sets.append((dec, enc, _to_tensor(normals, dtype).permute(0, 3, 1, 2),
                     torch.ones(len(imgs), bc.size, bc.size, dtype=torch.bool)))
    _, metrics = probe_normals(*sets[0], steps=bc.probe_steps, seed=bc.seed, eval_set=sets[1])
    return metrics


def eval_segmentation(model: LilaModel, bc: BenchmarkConfig):
    sets = []
    for split in ("train", "test"):
        imgs, _, cats = still_images(bc, split)
        dec, enc = model_features(model, imgs)
        sets.append((dec, enc, torch.from_numpy(cats)))
    f, e, lab = sets[0]
    _, metrics = probe_seg_attention(f, lab, N_CATEGORIES + 1, enc=e, steps=bc.probe_steps,
                                     seed=bc.seed, eval_set=sets[1])
    return metrics


ZERO_SHOT_PARTITION = Partition(seen=(0, 1, 2), unseen=(3, 4))


def eval_zero_shot(model: LilaModel, bc: BenchmarkConfig, text: torch.Tensor | None = None):
    text = random_text_embeddings(N_CATEGORIES + 1, 16, seed=bc.seed) if text is None else text
    sets = []
    for split in ("train", "test"):
        imgs, _, cats = still_images(bc, split)
        dec, enc = model_features(model, imgs)
        enc_up = torch.nn.functional.interpolate(enc, size=dec.shape[-2:], mode="bilinear",
                                                 align_corners=False)
        sets.append((enc_up.permute(0, 2, 3, 1), dec.permute(0, 2, 3, 1), torch.from_numpy(cats)))
    _, metrics = probe_zero_shot(*sets[0], text.to(sets[0][1].dtype), ZERO_SHOT_PARTITION,
                                 steps=bc.probe_steps, seed=bc.seed, eval_set=sets[1])
    return metrics
