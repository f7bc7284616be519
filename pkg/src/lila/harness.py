"""Experiment orchestration: training runs, ablation matrices, gap sweeps and reports."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

from .benchmarks import (
    BenchmarkConfig, eval_normals, eval_segmentation, eval_vos_knn, eval_vos_linear,
    eval_zero_shot, vos_sequences,
)
from .training import TrainConfig, checkpoint_load, checkpoint_save, config_from_dict, train

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("run_id", "benchmark", "metric", "value", "seed", "config_hash")
CURVE_COLUMNS = ("run_id", "step", "loss")
RUN_COLUMNS = ("run_id", "name", "label", "reference", "seed", "config_hash", "steps", "wall_time")
DEFAULT_SWEEP = (1, 3, 5, 10, 15, 20)


class ExperimentError(RuntimeError):
    """A failure inside one stage of an experiment; `stage` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# -- benchmark registry -----------------------------------------------------------

def _vos_knn(model, bc):
    return eval_vos_knn(model, vos_sequences(bc))


def _vos_linear(model, bc):
    return eval_vos_linear(model, vos_sequences(bc))


BENCHMARKS = {
    "vos_knn": _vos_knn,
    "vos_linear": _vos_linear,
    "normals": eval_normals,
    "segmentation": eval_segmentation,
    "zero_shot": eval_zero_shot,
}


# -- specs ------------------------------------------------------------------------

@dataclass(frozen=True)
class Toggles:
    """Ablation switches layered on top of a training config."""
    sd: bool = True
    depth: bool = True
    flow: bool = True
    pamr: bool = True
    crop: bool = True
    temporal: bool = True
    edge_loss: bool = True
    mode: str = "lila"

    def cues(self) -> tuple[str, ...]:
        return tuple(c for c, on in (("sd", self.sd), ("depth", self.depth), ("flow", self.flow)) if on)

    def validate(self) -> None:
        if not self.cues():
            raise ExperimentError("validate", "at least one cue modality must be on")
        if self.mode not in ("lila", "erm"):
            raise ExperimentError("validate", f"unknown mode {self.mode!r}")

    def apply(self, cfg: TrainConfig) -> TrainConfig:
        self.validate()
        return dataclasses.replace(
            cfg, cues=self.cues(), use_pamr=cfg.use_pamr and self.pamr,
            use_crop=cfg.use_crop and self.crop,
            delta_max=cfg.delta_max if self.temporal else 0,
            gamma=cfg.gamma if self.edge_loss else 0.0, mode=self.mode)


@dataclass
class ExperimentSpec:
    name: str = "run"
    train: TrainConfig = field(default_factory=TrainConfig)
    benchmarks: tuple[str, ...] = ("vos_knn",)
    bench: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    toggles: Toggles = field(default_factory=Toggles)
    sweep_axis: tuple[int, ...] = DEFAULT_SWEEP
    out: str = "runs"
    checkpoint: str | None = None        # load instead of training
    save_checkpoint: bool = False

    def validate(self) -> None:
        self.toggles.validate()
        unknown = [b for b in self.benchmarks if b not in BENCHMARKS]
        if unknown:
            raise ExperimentError("validate", f"unknown benchmarks {unknown}; known {sorted(BENCHMARKS)}")
        if not self.sweep_axis or any(int(v) != v or v < 1 for v in self.sweep_axis):
            raise ExperimentError("validate", f"sweep values must be positive integers, got {self.sweep_axis}")
        try:
            self.config().validate()
        except ValueError as e:
            raise ExperimentError("validate", str(e)) from e

    def config(self) -> TrainConfig:
        return self.toggles.apply(self.train)


def spec_from_dict(d: dict) -> ExperimentSpec:
    d = dict(d)
    known = {f.name for f in dataclasses.fields(ExperimentSpec)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ExperimentError("config", f"unknown experiment keys {unknown}")
    if "train" in d:
        d["train"] = config_from_dict(d["train"])
    if "bench" in d:
        d["bench"] = BenchmarkConfig(**d["bench"])
    if "toggles" in d:
        d["toggles"] = Toggles(**d["toggles"])
    for key in ("benchmarks", "sweep_axis"):
        if key in d:
            d[key] = tuple(d[key])
    return ExperimentSpec(**d)


def load_spec(path) -> ExperimentSpec:
    """A JSON file holding either an experiment spec or a bare training config."""
    d = json.loads(Path(path).read_text())
    if "train" in d or "benchmarks" in d or "name" in d:
        return spec_from_dict(d)
    return ExperimentSpec(train=config_from_dict(d))


# -- results ----------------------------------------------------------------------

@dataclass
class RunResult:
    run_id: str
    name: str
    seed: int
    config_hash: str
    metrics: dict[str, dict[str, float]]
    losses: list[float]
    wall_time: float = 0.0
    label: str = ""
    reference: bool = False


@dataclass
class ReportBundle:
    runs: list[RunResult] = field(default_factory=list)
    sweep_key: str | None = None
    sweep_values: tuple = ()

    def metric_rows(self) -> list[dict]:
        rows = []
        for r in self.runs:
            for bench, metrics in r.metrics.items():
                for metric, value in metrics.items():
                    rows.append(dict(run_id=r.run_id, benchmark=bench, metric=metric, value=value,
                                     seed=r.seed, config_hash=r.config_hash))
        return rows


def run_id(name: str, cfg: TrainConfig) -> str:
    return f"{name}-{cfg.config_hash()[:10]}"


def _check_finite(stage: str, values) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ExperimentError(stage, f"non-finite value {v}")


# -- operations -------------------------------------------------------------------

def run_experiment(spec: ExperimentSpec, label: str = "", reference: bool = False,
                   emit: bool = True) -> ReportBundle:
    """Train (or load), run every listed probe and write the report."""
    spec.validate()
    cfg = spec.config()
    rid = run_id(spec.name, cfg)
    result = RunResult(rid, spec.name, cfg.seed, cfg.config_hash(), {}, [], label=label,
                       reference=reference)
    bundle = ReportBundle([result])
    out = Path(spec.out)
    t0 = time.perf_counter()
    try:
        try:
            if spec.checkpoint:
                state = checkpoint_load(spec.checkpoint, cfg)
            else:
                state = train(cfg, log_every=0)
            result.losses = list(state.losses)
            _check_finite("train", result.losses)
            if spec.save_checkpoint:
                out.mkdir(parents=True, exist_ok=True)
                checkpoint_save(state, out / f"{rid}.ckpt")
        except ExperimentError:
            raise
        except Exception as e:
            raise ExperimentError("train", f"{type(e).__name__}: {e}") from e
        for name in spec.benchmarks:
            stage = f"probe:{name}"
            try:
                metrics = {k: float(v) for k, v in BENCHMARKS[name](state.model, spec.bench).items()}
            except Exception as e:
                raise ExperimentError(stage, f"{type(e).__name__}: {e}") from e
            _check_finite(stage, metrics.values())
            result.metrics[name] = metrics
    except ExperimentError:
        result.wall_time = time.perf_counter() - t0
        if emit:
            try:
                report_emit(bundle, out)     # flush what finished before the failure
            except ExperimentError as flush_error:
                log.warning("partial report not written: %s", flush_error)
        raise
    result.wall_time = time.perf_counter() - t0
    if emit:
        report_emit(bundle, out)
    return bundle


def cue_rows() -> list[tuple[str, Toggles, bool]]:
    """Every nonempty SD/depth/flow combination; the full row is the reference."""
    rows = []
    for sd in (True, False):
        for depth in (True, False):
            for flow in (True, False):
                t = Toggles(sd=sd, depth=depth, flow=flow)
                if t.cues():
                    rows.append(("+".join(t.cues()), t, sd and depth and flow))
    return rows


def component_rows() -> list[tuple[str, Toggles, bool]]:
    return [
        ("full", Toggles(), True),
        ("A:erm", Toggles(mode="erm"), False),
        ("B:no-pamr", Toggles(pamr=False), False),
        ("C:no-crop", Toggles(crop=False), False),
        ("D:no-temporal", Toggles(temporal=False), False),
        ("E:no-edge-loss", Toggles(edge_loss=False), False),
    ]


def ablation_matrix(spec: ExperimentSpec, table: str = "cues", rows=None) -> ReportBundle:
    """One run per row; every row is validated before any run starts."""
    if rows is None:
        rows = {"cues": cue_rows, "components": component_rows}[table]()
    specs = []
    for label, toggles, ref in rows:
        toggles.validate()
        s = dataclasses.replace(spec, name=f"{spec.name}-{label.replace(':', '-').replace('+', '-')}",
                                toggles=toggles)
        s.validate()
        specs.append((s, label, ref))
    bundle = ReportBundle()
    for s, label, ref in specs:
        bundle.runs += run_experiment(s, label=label, reference=ref, emit=False).runs
    report_emit(bundle, Path(spec.out))
    return bundle


def sweep(spec: ExperimentSpec, axis: tuple[int, ...] | None = None) -> ReportBundle:
    """Temporal-gap sweep over delta_max with a fresh model per point."""
    axis = tuple(axis or spec.sweep_axis)
    spec = dataclasses.replace(spec, sweep_axis=axis)
    spec.validate()
    # one clip length for every point so only the sampling window changes
    n_frames = max(spec.train.n_frames, max(axis) + 1)
    bundle = ReportBundle(sweep_key="delta_max", sweep_values=axis)
    for delta in axis:
        s = dataclasses.replace(spec, name=f"{spec.name}-d{delta}",
                                train=dataclasses.replace(spec.train, delta_max=delta,
                                                          n_frames=n_frames))
        bundle.runs += run_experiment(s, label=f"delta={delta}", emit=False).runs
    report_emit(bundle, Path(spec.out))
    return bundle


# -- reports ----------------------------------------------------------------------

def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def report_emit(bundle: ReportBundle, directory) -> list[Path]:
    """metrics.csv, curves.csv, runs.csv and SVG plots; returns the written paths."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ExperimentError("report", f"cannot create {directory}: {e}") from e
    _check_finite("report", [row["value"] for row in bundle.metric_rows()]
                  + [v for r in bundle.runs for v in r.losses])
    paths = [directory / "metrics.csv", directory / "curves.csv", directory / "runs.csv"]
    try:
        _write_csv(paths[0], METRIC_COLUMNS, bundle.metric_rows())
        _write_csv(paths[1], CURVE_COLUMNS,
                   [dict(run_id=r.run_id, step=i + 1, loss=v) for r in bundle.runs
                    for i, v in enumerate(r.losses)])
        _write_csv(paths[2], RUN_COLUMNS,
                   [dict(run_id=r.run_id, name=r.name, label=r.label, reference=int(r.reference),
                         seed=r.seed, config_hash=r.config_hash, steps=len(r.losses),
                         wall_time=round(r.wall_time, 3)) for r in bundle.runs])
        paths += _plots(bundle, directory)
    except OSError as e:
        raise ExperimentError("report", f"cannot write to {directory}: {e}") from e
    return paths


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["value"] = float(row["value"])
        row["seed"] = int(row["seed"])
    return rows


def _plots(bundle: ReportBundle, directory: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    plt.rcParams["svg.hashsalt"] = "lila"
    if any(r.losses for r in bundle.runs):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for r in bundle.runs:
            if r.losses:
                ax.plot(range(1, len(r.losses) + 1), r.losses, label=r.label or r.run_id, lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("training loss")
        ax.legend(fontsize=6)
        fig.tight_layout()
        written.append(directory / "curves.svg")
        fig.savefig(written[-1], metadata={"Date": None})
        plt.close(fig)
    if bundle.sweep_key and bundle.runs:
        series: dict[tuple[str, str], list[float]] = {}
        for r in bundle.runs:
            for bench, metrics in r.metrics.items():
                for metric, v in metrics.items():
                    series.setdefault((bench, metric), []).append(v)
        if series:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            xs = list(bundle.sweep_values)
            for (bench, metric), ys in series.items():
                ax.plot(xs[:len(ys)], ys, marker="o", label=f"{bench} {metric}")
            ax.set_xticks(xs)
            ax.set_xlabel(bundle.sweep_key)
            ax.set_ylabel("score")
            ax.legend(fontsize=6)
            fig.tight_layout()
            written.append(directory / "sweep.svg")
            fig.savefig(written[-1], metadata={"Date": None})
            plt.close(fig)
    return written
