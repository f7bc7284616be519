"""Command line: python -m lila <verb> [flags]; every TrainConfig field is also a flag."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .harness import (
    BENCHMARKS, DEFAULT_SWEEP, ExperimentError, ExperimentSpec, ablation_matrix, load_spec,
    report_emit, run_experiment, sweep, ReportBundle, RunResult, run_id,
)
from .scenes import export_sample, inject_noise, load_manifest_sample, read_manifest, write_manifest
from .training import (
    ManifestDataset, SceneDataset, TrainConfig, checkpoint_save, heldout_cue_error, train,
)

VERBS = ("train", "probe", "ablate", "sweep", "export-cues", "ingest")


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _coercer(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, tuple):
        elem = type(default[0]) if default else str
        return lambda text: tuple(elem(v) for v in text.split(",") if v)
    if default is None:
        return lambda text: None if text.lower() == "none" else float(text)
    return type(default)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(TrainConfig):
        if f.name == "deterministic":
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        p.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", default=None,
                       type=_coercer(default), metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lila", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", help="JSON experiment spec or training config")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--deterministic", action="store_true",
                       help="64-bit, bit-reproducible mode")
        p.add_argument("-v", "--verbose", action="store_true")
        _add_config_flags(p)
        if verb in ("train", "probe", "ablate", "sweep"):
            p.add_argument("--name", default=None)
            p.add_argument("--benchmarks", default=None,
                           help=f"comma list from {','.join(BENCHMARKS)}; empty for none")
        if verb == "train":
            p.add_argument("--manifest", help="train on ingested cues instead of synthetic scenes")
        if verb == "probe":
            p.add_argument("--checkpoint", help="probe this checkpoint instead of training")
        if verb == "ablate":
            p.add_argument("--table", choices=("cues", "components"), default="cues")
        if verb == "sweep":
            p.add_argument("--axis", default=",".join(map(str, DEFAULT_SWEEP)))
        if verb == "export-cues":
            p.add_argument("--n", type=int, default=8, help="number of pairs")
        if verb == "ingest":
            p.add_argument("--manifest", required=True)
    return parser


def spec_from_args(args) -> ExperimentSpec:
    spec = load_spec(args.config) if args.config else ExperimentSpec()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.deterministic:
        overrides["deterministic"] = True
    cfg = dataclasses.replace(spec.train, **overrides)
    changes = dict(train=cfg)
    if args.out is not None:
        changes["out"] = args.out
    if getattr(args, "name", None):
        changes["name"] = args.name
    if getattr(args, "benchmarks", None) is not None:
        changes["benchmarks"] = tuple(b for b in args.benchmarks.split(",") if b)
    if getattr(args, "checkpoint", None):
        changes["checkpoint"] = args.checkpoint
    return dataclasses.replace(spec, **changes)


def _cmd_train(spec: ExperimentSpec, args) -> None:
    cfg = spec.config()
    dataset = ManifestDataset(args.manifest) if args.manifest else SceneDataset.synthetic(cfg)
    state = train(cfg, dataset=dataset)
    out = Path(spec.out)
    rid = run_id(spec.name, cfg)
    bundle = ReportBundle([RunResult(rid, spec.name, cfg.seed, cfg.config_hash(), {},
                                     list(state.losses))])
    if not args.manifest and cfg.flow_sigma + cfg.depth_sigma > 0:
        err = heldout_cue_error(state, SceneDataset.synthetic(cfg, "test", 16))
        bundle.runs[0].metrics["heldout_cues"] = {"l1": err}
    report_emit(bundle, out)
    checkpoint_save(state, out / f"{rid}.ckpt")
    print(out / f"{rid}.ckpt")


def _cmd_export(spec: ExperimentSpec, args) -> None:
    cfg = spec.config()
    cfg.validate()
    dataset = SceneDataset.synthetic(cfg)
    rng = np.random.default_rng(cfg.seed)
    out = Path(spec.out)
    records = []
    for i in range(args.n):
        delta = int(rng.integers(1, max(cfg.delta_max, 1) + 1))
        sample = inject_noise(dataset.draw(delta, rng), cfg.noise_model(), rng)
        records.append(export_sample(sample, out, f"pair{i:04d}"))
    write_manifest(records, out / "manifest.json")
    print(out / "manifest.json")


def _cmd_ingest(args) -> None:
    records = read_manifest(args.manifest)
    for rec in records:
        s = load_manifest_sample(rec)
        print(json.dumps({"frame_t": rec["frame_t"], "delta": s.delta,
                          "shape": list(s.frame_t.shape)}))
    print(f"{len(records)} pairs ok")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "ingest":
            _cmd_ingest(args)
            return 0
        spec = spec_from_args(args)
        if args.verb == "train":
            _cmd_train(spec, args)
        elif args.verb == "probe":
            run_experiment(spec)
        elif args.verb == "ablate":
            ablation_matrix(spec, table=args.table)
        elif args.verb == "sweep":
            sweep(spec, tuple(int(v) for v in args.axis.split(",") if v))
        elif args.verb == "export-cues":
            _cmd_export(spec, args)
    except (ExperimentError, ValueError, OSError) as e:
        print(f"lila {args.verb}: {e}", file=sys.stderr)
        return 1
    if args.verb in ("probe", "ablate", "sweep"):
        print(Path(spec.out) / "metrics.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
