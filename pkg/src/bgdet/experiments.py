"""Evaluation in the three inference modes and the two ablation sweeps."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint
from .config import INFERENCE_MODES, RunConfig
from .datagen import UNDERWATER, class_names, load_arrays
from .detector import Detection, DetectorNet, decode_and_nms, write_detections_csv
from .enhancer import Generator
from .errors import ArtifactError, ConfigError, PrerequisiteError
from .guidance import LEVEL_TAPS, LEVELS, GuidanceWeights, TotalLossWeights
from .metrics import EvalReport, evaluate_detections, export_report, fps_benchmark
from .trainer import (_load_u2a, build_detector, checkpoint_path, load_enhancement_branch,
                      train_detection_branch)

log = logging.getLogger(__name__)

# which stage's checkpoint drives each inference mode
MODE_STAGE = {"detect_only": "D", "separate": "B", "cascaded": "C"}
ABLATION_HEADER = ("arm", "levels", "eta2", "map50", "map5095", "precision", "recall", "f1")


@dataclass
class Pipeline:
    """A detector with an optional enhancer in front of it."""

    detector: DetectorNet
    enhancer: Generator | None
    checkpoints: dict[str, str]

    @torch.no_grad()
    def raw(self, x: torch.Tensor):
        if self.enhancer is not None:
            x = self.enhancer(x)
        return self.detector(x)[0]

    def detect(self, x: torch.Tensor, conf: float, iou: float, max_det: int) -> list[list[Detection]]:
        preds = self.raw(x)
        return decode_and_nms(preds, conf, iou, self.detector.anchors, self.detector.strides,
                              tuple(x.shape[-2:]), max_det)


def _load(path: Path, stage: str) -> Checkpoint:
    if not path.is_file():
        raise ArtifactError(f"weights not found: {path}")
    return load_checkpoint(path, expect_stage=stage)


def load_pipeline(cfg: RunConfig, mode: str, weights=None, num_classes: int | None = None) -> Pipeline:
    """Build the networks for ``mode``.

    detect_only reads only the detection-branch checkpoint; separate pairs
    the stage-A generator with the stage-B detector; cascaded runs the
    jointly trained stage-C branch.
    """
    if mode not in INFERENCE_MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {INFERENCE_MODES}")
    if num_classes is None:
        num_classes = len(class_names(cfg.data_dir, cfg.dataset.classes))
    stage = MODE_STAGE[mode]
    path = Path(weights) if weights is not None else checkpoint_path(cfg, stage)
    ck = _load(path, stage)
    try:
        if mode == "detect_only":
            det = build_detector(cfg, num_classes)
            det.load_state_dict(ck.weights["det"])
            pipe = Pipeline(det, None, {"D": ck.checksum})
        elif mode == "cascaded":
            branch = load_enhancement_branch(cfg, ck, num_classes)
            pipe = Pipeline(branch.dsn, branch.generator, {"C": ck.checksum})
        else:
            ck_a = _load(checkpoint_path(cfg, "A", cfg.stages.B.inputs), "A")
            det = build_detector(cfg, num_classes)
            det.load_state_dict(ck.weights["dsn"])
            pipe = Pipeline(det, _load_u2a(cfg, ck_a, "gen"), {"A": ck_a.checksum, "B": ck.checksum})
    except (KeyError, RuntimeError) as exc:
        raise ArtifactError(f"{path}: weights do not fit the configured model: {exc}") from exc
    pipe.detector.eval()
    if pipe.enhancer is not None:
        pipe.enhancer.eval()
    return pipe


def provenance(cfg: RunConfig) -> dict:
    return {
        "detection_loss": dataclasses.asdict(cfg.detection_loss),
        "guidance": dataclasses.asdict(cfg.guidance),
        "total_loss": dataclasses.asdict(cfg.total_loss),
        "conf_thresh": cfg.eval.conf_thresh,
        "iou_thresh": cfg.eval.iou_thresh,
        "max_det": cfg.eval.max_det,
        "seed": cfg.seed,
    }


def evaluate(cfg: RunConfig, mode: str | None = None, weights=None, out_dir=None,
             fps: bool = True, split: str = "test") -> EvalReport:
    """Detect on the test split, score it and (optionally) time batch-1 inference."""
    mode = mode or cfg.eval.mode
    try:
        x, boxes, ids = load_arrays(cfg.data_dir, split, UNDERWATER)
    except FileNotFoundError as exc:
        raise PrerequisiteError(f"no {split} images under {cfg.data_dir}: {exc}") from exc
    names = class_names(cfg.data_dir, cfg.dataset.classes)
    pipe = load_pipeline(cfg, mode, weights, len(names))
    images = torch.from_numpy(x)
    calls_before = Generator.forward_calls
    dets: list[list[Detection]] = []
    for i in range(0, len(images), 32):
        dets.extend(pipe.detect(images[i:i + 32], cfg.eval.conf_thresh, cfg.eval.iou_thresh,
                                cfg.eval.max_det))
    report = evaluate_detections(dets, boxes, names, interpolation=cfg.eval.ap_interpolation)
    report.mode = mode
    if fps:
        singles = [images[i:i + 1] for i in range(min(len(images), 16))]
        report.fps = fps_benchmark(pipe.raw, singles, cfg.eval.fps_warmup, cfg.eval.fps_iters)
    report.provenance.update(provenance(cfg))
    report.provenance.update({"checkpoints": pipe.checkpoints, "split": split,
                              "enhancer_calls": Generator.forward_calls - calls_before})
    if out_dir is not None:
        out = Path(out_dir)
        export_report(report, out)
        write_detections_csv(out / "detections.csv", ids, dets)
    return report


# --------------------------------------------------------------------------
# ablations

def layer_arms(cfg: RunConfig) -> list[dict]:
    """No-guidance baseline plus every non-empty subset of the tap layers."""
    arms = [{"arm": "baseline", "levels": (), "eta2": 0.0}]
    for r in range(1, len(LEVELS) + 1):
        for subset in itertools.combinations(LEVELS, r):
            arms.append({"arm": "+".join(LEVEL_TAPS[l] for l in subset), "levels": subset,
                         "eta2": cfg.ablation.layers_eta2})
    return arms


def eta2_arms(cfg: RunConfig) -> list[dict]:
    return [{"arm": f"eta2={v:g}", "levels": (1,), "eta2": float(v)}
            for v in cfg.ablation.eta2_values]


def arm_config(cfg: RunConfig, arm: dict) -> RunConfig:
    g = cfg.guidance
    levels = tuple(arm["levels"])
    guidance = GuidanceWeights(1.0, 1.0, 1.0, levels or g.enabled_levels, g.normalization)
    return cfg.replace(guidance=guidance,
                       total_loss=TotalLossWeights(cfg.total_loss.eta1, arm["eta2"]))


def _slug(name: str) -> str:
    return name.replace("=", "_").replace("+", "-")


def run_arm(cfg: RunConfig, arm: dict, root: Path) -> dict:
    acfg = arm_config(cfg, arm)
    out = root / _slug(arm["arm"])
    ck = train_detection_branch(acfg, out_dir=out, guidance=bool(arm["levels"]))
    report = evaluate(acfg, "detect_only", weights=ck.path, out_dir=out / "eval", fps=False)
    return {"arm": arm["arm"], "levels": "+".join(LEVEL_TAPS[l] for l in arm["levels"]) or "none",
            "eta2": arm["eta2"], "map50": report.map50, "map5095": report.map5095,
            "precision": report.precision, "recall": report.recall, "f1": report.f1}


def _run_arm_job(args):
    cfg_dict, arm, root = args
    torch.set_num_threads(1)
    return run_arm(RunConfig.from_dict(cfg_dict), arm, Path(root))


def ablate(cfg: RunConfig, which: str, jobs: int = 1, out_dir=None) -> Path:
    """Train and score one detection branch per arm; returns the summary CSV path."""
    if which not in ("layers", "eta2"):
        raise ConfigError(f"unknown ablation {which!r}; expected 'layers' or 'eta2'")
    c_path = checkpoint_path(cfg, "C", cfg.stages.D.inputs)
    if not c_path.is_file():
        raise PrerequisiteError(f"ablation needs stages A-C; missing {c_path}")
    arms = layer_arms(cfg) if which == "layers" else eta2_arms(cfg)
    root = Path(out_dir) if out_dir is not None else cfg.run_dir / "ablate" / which
    root.mkdir(parents=True, exist_ok=True)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_arm_job, [(cfg.to_dict(), a, str(root)) for a in arms]))
    else:
        rows = [run_arm(cfg, a, root) for a in arms]
    for r in rows:
        if not all(math.isfinite(r[k]) for k in ("map50", "map5095")):
            raise ArtifactError(f"arm {r['arm']} produced non-finite metrics")
    path = root / f"ablate_{which}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (float(v) if k not in ("arm", "levels") else v) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def summary(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0
