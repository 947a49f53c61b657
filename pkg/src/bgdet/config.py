"""Run configuration: one YAML file describing data, models, losses and stages.

Loading is strict: every mapping is checked against its dataclass and
unknown keys raise :class:`ConfigError` before any work starts.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .datagen import DatasetSpec, DegradationParams
from .detector import DEFAULT_ANCHORS, FULL_SCALE_ANCHORS, DetectionLossWeights
from .enhancer import EnhancerLossWeights
from .errors import ConfigError
from .guidance import GuidanceWeights, TotalLossWeights

STAGES = ("A", "B", "C", "D")
STAGE_NAMES = {"A": "A_enhancer", "B": "B_dsn_pretrain", "C": "C_joint_enh_branch",
               "D": "D_guided_detection"}
INFERENCE_MODES = ("detect_only", "separate", "cascaded")
SEED_ENV = "BGDET_SEED"


@dataclass
class ModelConfig:
    widths: tuple[int, int, int, int, int] = (16, 32, 32, 64, 128)
    width_multiple: float = 1.0
    anchors: tuple = DEFAULT_ANCHORS
    gen_base: int = 8
    gen_res_blocks: int = 3
    disc_base: int = 16


@dataclass
class StagePlan:
    stage: str
    epochs: int
    batch_size: int
    optimizer: str = "sgd"
    lr: float = 1e-2
    lrf: float = 1e-2
    momentum: float = 0.937    # beta1 for adam
    weight_decay: float = 5e-4
    warmup_epochs: float = 0.0
    seed: int | None = None    # None: use the run seed
    augment_flip: bool = True
    cache_enhanced: bool = False
    inputs: dict[str, str] = field(default_factory=dict)
    frozen_sets: tuple[str, ...] = ()

    def validate(self) -> "StagePlan":
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(f"stage {self.stage}: epochs >= 0 and batch_size >= 1 required")
        if not self.lr > 0:
            raise ConfigError(f"stage {self.stage}: lr must be > 0")
        if not 0 < self.lrf <= 1:
            raise ConfigError(f"stage {self.stage}: lrf must lie in (0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"stage {self.stage}: unknown optimizer {self.optimizer!r}")
        return self


@dataclass
class StagePlans:
    A: StagePlan = field(default_factory=lambda: StagePlan(
        "A", epochs=5, batch_size=2, optimizer="adam", lr=2e-4, lrf=1.0, momentum=0.5,
        weight_decay=0.0, augment_flip=False))
    B: StagePlan = field(default_factory=lambda: StagePlan("B", epochs=30, batch_size=16))
    C: StagePlan = field(default_factory=lambda: StagePlan("C", epochs=20, batch_size=16, lr=1e-3, lrf=1e-3))
    D: StagePlan = field(default_factory=lambda: StagePlan("D", epochs=30, batch_size=16))

    def __getitem__(self, stage: str) -> StagePlan:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        return getattr(self, stage)


@dataclass
class EvalConfig:
    conf_thresh: float = 0.001
    iou_thresh: float = 0.6
    max_det: int = 100
    mode: str = "detect_only"
    ap_interpolation: str = "all_point"
    fps_warmup: int = 5
    fps_iters: int = 30


@dataclass
class AblationConfig:
    layers_eta2: float = 1.0
    eta2_values: tuple[float, ...] = (1.0, 0.5, 0.1, 0.05, 0.01)


@dataclass
class RunConfig:
    run_id: str = "desk"
    output_dir: str = "runs"
    data_dir: str = "data/synthetic"
    seed: int = 0
    num_threads: int | None = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    degradation: DegradationParams = field(default_factory=DegradationParams)
    clear_degradation: DegradationParams = field(default_factory=DegradationParams.mild)
    model: ModelConfig = field(default_factory=ModelConfig)
    enhancer_loss: EnhancerLossWeights = field(default_factory=EnhancerLossWeights)
    adversarial: str = "log"
    detection_loss: DetectionLossWeights = field(default_factory=DetectionLossWeights)
    guidance: GuidanceWeights = field(default_factory=lambda: GuidanceWeights(enabled_levels=(1,)))
    total_loss: TotalLossWeights = field(default_factory=TotalLossWeights)
    stages: StagePlans = field(default_factory=StagePlans)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self) -> "RunConfig":
        self.dataset.validate()
        self.degradation.validate()
        self.clear_degradation.validate()
        self.enhancer_loss.validate()
        self.detection_loss.validate()
        self.guidance.validate()
        self.total_loss.validate()
        for s in STAGES:
            plan = self.stages[s]
            if plan.stage != s:
                raise ConfigError(f"stages.{s}.stage must be {s!r}, got {plan.stage!r}")
            plan.validate()
        if self.adversarial not in ("log", "lsgan"):
            raise ConfigError(f"adversarial must be 'log' or 'lsgan', got {self.adversarial!r}")
        if self.eval.mode not in INFERENCE_MODES:
            raise ConfigError(f"eval.mode must be one of {INFERENCE_MODES}")
        if self.eval.ap_interpolation not in ("all_point", "101_point"):
            raise ConfigError(f"unknown ap_interpolation {self.eval.ap_interpolation!r}")
        return self

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_id

    def stage_seed(self, stage: str) -> int:
        s = self.stages[stage].seed
        return self.seed if s is None else s

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data or {}, "").validate()

    @classmethod
    def full_scale(cls) -> "RunConfig":
        """Hyperparameters of the full-scale protocol (416 px, 300-epoch detector stages)."""
        return cls(
            run_id="full",
            dataset=DatasetSpec(n_train=3765, n_test=942, image_size=(416, 416)),
            model=ModelConfig(widths=(32, 64, 64, 128, 256), anchors=FULL_SCALE_ANCHORS,
                              gen_base=64, gen_res_blocks=9, disc_base=64),
            stages=StagePlans(
                A=StagePlan("A", epochs=50, batch_size=2, optimizer="adam", lr=1e-4, lrf=1.0,
                            momentum=0.5, weight_decay=0.0, augment_flip=False),
                B=StagePlan("B", epochs=300, batch_size=16, lr=1e-2, lrf=1e-2),
                C=StagePlan("C", epochs=300, batch_size=16, lr=1e-3, lrf=1e-3),
                D=StagePlan("D", epochs=300, batch_size=16, lr=1e-2, lrf=1e-2),
            ),
        )


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _tupleize(value):
    if isinstance(value, list):
        return tuple(_tupleize(v) for v in value)
    return value


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(path + k for k in unknown)}")
    kwargs = {}
    defaults = cls() if cls not in (StagePlan,) else None
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            base = getattr(defaults, name) if defaults is not None else None
            merged = dataclasses.asdict(base) if base is not None else {}
            merged.update(value or {})
            # nested dataclasses are rebuilt from their (possibly partial) mapping
            kwargs[name] = _build(hint, _plain(merged) if base is not None else value, f"{path}{name}.")
        elif hint is tuple or typing.get_origin(hint) is tuple or (
                typing.get_origin(hint) in (typing.Union, getattr(__import__("types"), "UnionType", None))
                and any(typing.get_origin(a) is tuple for a in typing.get_args(hint))):
            kwargs[name] = _tupleize(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML run config (defaults when ``path`` is None) and apply overrides.

    ``overrides`` maps dotted keys to values, e.g. ``{"total_loss.eta2": 0}``.
    """
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for key, value in (overrides or {}).items():
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return RunConfig.from_dict(data)


def resolve_seed(cfg: RunConfig, cli_seed: int | None = None) -> RunConfig:
    """Apply the seed precedence: ``--seed`` flag, then ``BGDET_SEED``, then the file."""
    if cli_seed is not None:
        return cfg.replace(seed=int(cli_seed))
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return cfg.replace(seed=int(env))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return cfg
