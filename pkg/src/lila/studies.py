"""Toy-scale trend studies: noise suppression against ERM and the temporal-gap sweep."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch

from .benchmarks import BenchmarkConfig, eval_vos_knn, vos_sequences
from .training import SceneDataset, TrainConfig, heldout_cue_error, train

# desk-scale model: a single CPU trains one run in a couple of minutes
TOY = dict(enc_width=16, enc_heads=2, dec_widths=(16, 24, 32, 48), out_dim=32,
           learning_rate=1e-3, context_factor=4, flow_sigma=1.0, depth_sigma=0.05)


def toy_config(**kw) -> TrainConfig:
    return TrainConfig(**{**TOY, **kw})


@dataclass
class NoiseStudyRow:
    seed: int
    lila: float           # held-out error of each mode's own cue readout
    erm: float
    lila_ridge: float     # same in-context ridge readout applied to both
    erm_ridge: float

    @property
    def lila_wins(self) -> bool:
        return self.lila < self.erm


def noise_study(seeds=range(5), steps: int = 300, n_test: int = 16, n_batches: int = 4,
                on_row=None, **overrides) -> list[NoiseStudyRow]:
    """Paired LILA / ERM runs per seed, scored against clean held-out cues."""
    rows = []
    for seed in seeds:
        errs = {}
        for mode in ("lila", "erm"):
            cfg = toy_config(max_steps=steps, seed=seed, mode=mode, **overrides)
            state = train(cfg, log_every=0)
            test = SceneDataset.synthetic(cfg, "test", n_test)
            errs[mode] = heldout_cue_error(state, test, n_batches)
            errs[mode + "_ridge"] = heldout_cue_error(state, test, n_batches, readout="ridge")
        rows.append(NoiseStudyRow(seed, **errs))
        if on_row is not None:
            on_row(rows[-1])
    return rows


@dataclass
class GapStudyRow:
    seed: int
    axis: tuple[int, ...]
    jf: tuple[float, ...]

    @property
    def interior_max(self) -> bool:
        best = max(self.jf[1:-1])
        return best > self.jf[0] and best > self.jf[-1]


def gap_study(seeds=range(5), axis=(1, 3, 5, 10), steps: int = 300,
              bench: BenchmarkConfig | None = None, on_row=None, **overrides) -> list[GapStudyRow]:
    """k-NN propagation JF after training with each sampling window; fresh model per point."""
    bench = bench or BenchmarkConfig()
    n_frames = max(TrainConfig.n_frames, max(axis) + 1)
    rows = []
    for seed in seeds:
        seqs = vos_sequences(dataclasses.replace(bench, seed=seed))
        scores = []
        for delta in axis:
            cfg = toy_config(max_steps=steps, seed=seed, delta_max=delta, n_frames=n_frames,
                             **overrides)
            state = train(cfg, log_every=0)
            with torch.no_grad():
                scores.append(eval_vos_knn(state.model, seqs)["JF"])
        rows.append(GapStudyRow(seed, tuple(axis), tuple(scores)))
        if on_row is not None:
            on_row(rows[-1])
    return rows
