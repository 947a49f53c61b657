"""Command line: gen, train, eval, ablate.

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 bad artifact, 1 anything else (for example a diverged run).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from .config import INFERENCE_MODES, SEED_ENV, STAGES, RunConfig, load_config, resolve_seed
from .datagen import DOMAINS, generate_dataset, read_manifest
from .errors import BGDetError, ConfigError, exit_code
from .guidance import LEVEL_TAPS, GuidanceWeights, TotalLossWeights

log = logging.getLogger("bgdet")
_TAP_LEVELS = {v: k for k, v in LEVEL_TAPS.items()}


def _levels(text: str) -> tuple[int, ...]:
    out = []
    for part in filter(None, text.split(",")):
        part = part.strip()
        if part in _TAP_LEVELS:
            out.append(_TAP_LEVELS[part])
        elif part.isdigit() and int(part) in LEVEL_TAPS:
            out.append(int(part))
        else:
            raise argparse.ArgumentTypeError(f"unknown tap {part!r}; use {', '.join(_TAP_LEVELS)}")
    return tuple(sorted(set(out)))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML run config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="overrides the config seed and BGDET_SEED")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, value parsed as YAML; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bgdet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="render the synthetic dataset")
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset")

    t = sub.add_parser("train", parents=[common], help="train one stage")
    t.add_argument("--stage", required=True, choices=STAGES)
    t.add_argument("--eta2", type=float, help="guidance weight for stage D")
    t.add_argument("--levels", type=_levels, help="guided taps, e.g. conv1,conv2")
    t.add_argument("--resume", action="store_true", help="continue from last.bin")

    e = sub.add_parser("eval", parents=[common], help="evaluate one inference mode")
    e.add_argument("--mode", choices=INFERENCE_MODES)
    e.add_argument("--weights", help="checkpoint to evaluate instead of the run's own")
    e.add_argument("--out", help="output directory (default <run>/eval/<mode>)")
    e.add_argument("--no-fps", action="store_true", help="skip the speed benchmark")

    a = sub.add_parser("ablate", parents=[common], help="run a guidance ablation sweep")
    a.add_argument("--which", required=True, choices=("layers", "eta2"))
    a.add_argument("--jobs", type=int, default=1, help="arms trained in parallel")
    return p


def _config(args) -> RunConfig:
    import yaml

    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key] = yaml.safe_load(value)
    cfg = resolve_seed(load_config(args.config, overrides), args.seed)
    return cfg.validate()


def cmd_gen(cfg: RunConfig, force: bool, seed_overridden: bool) -> int:
    spec = cfg.dataset
    if seed_overridden:
        spec = dataclasses.replace(spec, seed=cfg.seed)
    root = Path(cfg.data_dir)
    existing = read_manifest(root)
    if existing is not None and not force:
        if (existing.get("seed") == spec.seed and existing["splits"]["train"]["count"] == spec.n_train
                and existing["splits"]["test"]["count"] == spec.n_test
                and tuple(existing["image_size"]) == tuple(spec.image_size)):
            print(f"dataset at {root} is up to date (seed {spec.seed})")
            return 0
        raise ConfigError(f"a different dataset exists at {root}; pass --force to overwrite")
    if force:
        for d in DOMAINS:
            shutil.rmtree(root / d, ignore_errors=True)
    manifest = generate_dataset(spec, cfg.degradation, root, cfg.clear_degradation)
    print(f"wrote {manifest['splits']['train']['count']} train / "
          f"{manifest['splits']['test']['count']} test images to {root} (seed {manifest['seed']})")
    return 0


def cmd_train(cfg: RunConfig, stage: str, eta2=None, levels=None, resume=False) -> int:
    from .trainer import run_stage

    if eta2 is not None:
        cfg = cfg.replace(total_loss=TotalLossWeights(cfg.total_loss.eta1, eta2))
    if levels is not None:
        g = cfg.guidance
        cfg = cfg.replace(guidance=GuidanceWeights(g.mu1, g.mu2, g.mu3, levels, g.normalization))
    cfg.validate()
    ck = run_stage(cfg, stage, resume=resume)
    print(f"stage {stage}: {ck.path} (checksum {ck.checksum[:16]})")
    return 0


def cmd_eval(cfg: RunConfig, mode=None, weights=None, out=None, fps=True) -> int:
    from .experiments import evaluate

    mode = mode or cfg.eval.mode
    out_dir = Path(out) if out else cfg.run_dir / "eval" / mode
    report = evaluate(cfg, mode, weights, out_dir, fps=fps)
    (out_dir / "config.snapshot").write_text(cfg.to_yaml())
    summary = {"mode": report.mode, "map50": report.map50, "map5095": report.map5095,
               "precision": report.precision, "recall": report.recall, "f1": report.f1,
               "fps": report.fps}
    print(json.dumps(summary, indent=2))
    return 0


def cmd_ablate(cfg: RunConfig, which: str, jobs: int = 1) -> int:
    from .experiments import ablate, read_table

    path = ablate(cfg, which, jobs)
    for row in read_table(path):
        print(f"{row['arm']:>24}  mAP50 {row['map50']:.4f}  mAP50:95 {row['map5095']:.4f}")
    print(f"table: {path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _config(args)
        if args.command == "gen":
            overridden = args.seed is not None or bool(os.environ.get(SEED_ENV))
            return cmd_gen(cfg, args.force, overridden)
        if args.command == "train":
            return cmd_train(cfg, args.stage, args.eta2, args.levels, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, args.mode, args.weights, args.out, not args.no_fps)
        return cmd_ablate(cfg, args.which, args.jobs)
    except BGDetError as exc:
        print(f"bgdet: error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
