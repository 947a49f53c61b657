"""Four-stage training: enhancer (A), detector on enhanced images (B), joint
enhancement branch (C) and the guided detection branch (D).

Every stage writes ``checkpoint.bin``, ``loss.csv`` and ``config.snapshot``
under ``<output_dir>/<run_id>/<stage dir>/`` plus a rolling ``last.bin``
used for resuming and for recovery after divergence.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import (Checkpoint, load_checkpoint, save_checkpoint,
                         weights_checksum)
from .config import STAGE_NAMES, STAGES, RunConfig, StagePlan
from .datagen import CLEAR, UNDERWATER, class_names, load_arrays, read_manifest
from .detector import DetectorNet, detection_loss, targets_from_boxes
from .enhancer import (DiscriminatorPair, Generator, GeneratorPair, PerceptualExtractor,
                       adversarial_loss, cycle_l1, discriminator_loss, feature_sq_error,
                       generator_adversarial_loss)
from .errors import ConfigError, ContractError, PrerequisiteError, TrainingDiverged
from .guidance import (LEVELS, EnhancementBranch, extract_pair, feature_consistency_loss,
                       full_guided_loss, total_loss)

log = logging.getLogger(__name__)

A_HEADER = ("epoch", "step", "l_gan_u2a", "l_gan_a2u", "l_cyc", "l_cp", "total")
DET_HEADER = ("epoch", "step", "l_obj", "l_loc", "l_cls", "total")
D_HEADER = ("step", "l_con1", "l_con2", "l_con3", "l_fgm", "l_det", "total")
PREREQUISITES = {"A": (), "B": ("A",), "C": ("A", "B"), "D": ("C",)}

# named parameter sets; each entry is a module path inside the mapping given to freeze()
PARAM_SETS = {
    "perceptual": ("phi",),
    "generators": ("gen",),
    "discriminators": ("disc",),
    "generator": ("generator",),
    "dsn": ("dsn",),
    "enhancement_branch": ("generator", "dsn"),
    "detection_branch": ("det",),
}


def lr_schedule(lr0: float, lrf: float, epoch: int, total_epochs: int) -> float:
    """Cosine decay from ``lr0`` at epoch 0 to ``lr0 * lrf`` at the last epoch."""
    if not 0 <= epoch < max(total_epochs, 1):
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs})")
    if total_epochs <= 1:
        return lr0
    frac = (1 - math.cos(math.pi * epoch / (total_epochs - 1))) / 2
    return lr0 * (frac * (lrf - 1) + 1)


# --------------------------------------------------------------------------
# freezing

@dataclass
class FrozenHandle:
    param_set: str
    modules: dict[str, nn.Module]
    checksum: str

    def current(self) -> str:
        return weights_checksum({k: m.state_dict() for k, m in self.modules.items()})

    def verify(self) -> str:
        now = self.current()
        if now != self.checksum:
            raise ContractError(f"frozen parameter set {self.param_set!r} changed "
                                f"({self.checksum[:12]} -> {now[:12]})")
        return now


def _resolve(modules: Mapping[str, nn.Module], path: str) -> nn.Module:
    head, _, rest = path.partition(".")
    if head not in modules:
        raise ConfigError(f"unknown module {head!r}; have {sorted(modules)}")
    try:
        return modules[head].get_submodule(rest) if rest else modules[head]
    except AttributeError as exc:
        raise ConfigError(f"unknown subtree {path!r}") from exc


def freeze(modules: Mapping[str, nn.Module], param_set: str) -> FrozenHandle:
    """Put ``param_set`` in eval mode without gradients and record its checksum.

    ``param_set`` is a key of :data:`PARAM_SETS` or a dotted module path
    such as ``"gen.u2a"``.
    """
    paths = PARAM_SETS.get(param_set, (param_set,))
    picked = {p.split(".")[-1] if len(paths) > 1 else p: _resolve(modules, p) for p in paths}
    for m in picked.values():
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)
    return FrozenHandle(param_set, picked, weights_checksum({k: m.state_dict() for k, m in picked.items()}))


# --------------------------------------------------------------------------
# data

@dataclass
class TrainData:
    images: torch.Tensor                # (N, 3, H, W) underwater
    boxes: list[np.ndarray]
    ids: list[str]
    classes: list[str]
    clear: torch.Tensor | None = None   # unpaired clear pool (stage A only)
    content: dict = field(default_factory=dict)


def load_train_data(cfg: RunConfig, with_clear: bool = False, split: str = "train") -> TrainData:
    root = Path(cfg.data_dir)
    manifest = read_manifest(root)
    if manifest is None and not (root / UNDERWATER).is_dir() and not (root / "images").is_dir():
        raise PrerequisiteError(f"no dataset at {root}; run `bgdet gen` first")
    try:
        x, boxes, ids = load_arrays(root, split, UNDERWATER)
        clear = torch.from_numpy(load_arrays(root, split, CLEAR)[0]) if with_clear else None
    except FileNotFoundError as exc:
        raise PrerequisiteError(f"dataset at {root} is incomplete: {exc}") from exc
    content = (manifest or {}).get("content_sha256", {})
    return TrainData(torch.from_numpy(x), boxes, ids, class_names(root, cfg.dataset.classes),
                     clear, content)


def _flip_boxes(b: np.ndarray) -> np.ndarray:
    b = b.copy()
    if len(b):
        b[:, 1] = 1.0 - b[:, 1]
    return b


def _epoch_order(seed: int, stage: str, epoch: int, n: int, flip: bool, n_aux: int = 0):
    rng = np.random.default_rng([seed, STAGES.index(stage), epoch])
    perm = rng.permutation(n)
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    aux = rng.permutation(n_aux) if n_aux else None
    return perm, flips, aux


def _batch(data: TrainData, idx: np.ndarray, flips: np.ndarray):
    x = data.images[torch.from_numpy(idx)]
    boxes = [data.boxes[i] for i in idx]
    if flips.any():
        f = torch.from_numpy(flips)
        x = torch.where(f[:, None, None, None], x.flip(-1), x)
        boxes = [_flip_boxes(b) if fl else b for b, fl in zip(boxes, flips)]
    return x, targets_from_boxes(boxes)


# --------------------------------------------------------------------------
# model construction

def build_detector(cfg: RunConfig, num_classes: int) -> DetectorNet:
    m = cfg.model
    return DetectorNet(num_classes, m.widths, m.width_multiple, m.anchors)


def build_generators(cfg: RunConfig) -> GeneratorPair:
    return GeneratorPair(cfg.model.gen_base, cfg.model.gen_res_blocks)


def build_generator(cfg: RunConfig) -> Generator:
    return Generator(cfg.model.gen_base, cfg.model.gen_res_blocks)


def _optimizer(params_of: Sequence[nn.Module], plan: StagePlan):
    decay, no_decay = [], []
    for module in params_of:
        for name, p in module.named_parameters():
            if not p.requires_grad:
                continue
            (decay if p.dim() > 1 else no_decay).append(p)
    groups = [{"params": decay, "weight_decay": plan.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    if plan.optimizer == "adam":
        return torch.optim.Adam(groups, lr=plan.lr, betas=(plan.momentum, 0.999))
    return torch.optim.SGD(groups, lr=plan.lr, momentum=plan.momentum, nesterov=True)


# --------------------------------------------------------------------------
# generic loop

@dataclass
class _Loop:
    stage: str
    cfg: RunConfig
    plan: StagePlan
    out_dir: Path
    modules: dict[str, nn.Module]          # saved in checkpoints
    optimizers: dict[str, torch.optim.Optimizer]
    header: tuple[str, ...]
    step_fn: Callable                      # (epoch, step, batch_index) -> dict of floats
    n_steps: Callable                      # epoch -> number of steps
    meta: dict = field(default_factory=dict)
    frozen: list[FrozenHandle] = field(default_factory=list)

    def _weights(self):
        return {k: m.state_dict() for k, m in self.modules.items()}

    def _save_last(self, epoch_done: int, step: int):
        return save_checkpoint(self.out_dir / "last.bin", self.stage, self._weights(),
                               {k: o.state_dict() for k, o in self.optimizers.items()},
                               self.cfg.to_dict(), {"epoch_done": epoch_done, "step": step, **self.meta})

    def _set_lr(self, epoch: int, step_in_epoch: int, steps_per_epoch: int):
        lr = lr_schedule(self.plan.lr, self.plan.lrf, epoch, self.plan.epochs)
        warm = self.plan.warmup_epochs * steps_per_epoch
        done = epoch * steps_per_epoch + step_in_epoch
        if warm > 0 and done < warm:
            lr *= (done + 1) / warm
        for opt in self.optimizers.values():
            for g in opt.param_groups:
                g["lr"] = lr

    def run(self, resume: bool = False, stop_after: int | None = None) -> Checkpoint | None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "config.snapshot").write_text(self.cfg.to_yaml())
        csv_path = self.out_dir / "loss.csv"
        start_epoch, step = 0, 0
        last = self.out_dir / "last.bin"
        rows: list[list] = []
        if resume and last.is_file():
            ck = load_checkpoint(last, expect_stage=self.stage)
            for k, m in self.modules.items():
                m.load_state_dict(ck.weights[k])
            for k, o in self.optimizers.items():
                o.load_state_dict(ck.optimizer[k])
            start_epoch, step = ck.meta["epoch_done"], ck.meta["step"]
            if csv_path.is_file():
                with open(csv_path, newline="") as fh:
                    rd = csv.reader(fh)
                    next(rd, None)
                    col = self.header.index("step")
                    rows = [r for r in rd if int(r[col]) < step]
            log.info("stage %s: resuming at epoch %d, step %d", self.stage, start_epoch, step)
        else:
            self._save_last(0, 0)

        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header)
            writer.writerows(rows)
            for epoch in range(start_epoch, self.plan.epochs):
                if stop_after is not None and epoch >= stop_after:
                    return None
                n = self.n_steps(epoch)
                for k in range(n):
                    self._set_lr(epoch, k, n)
                    values = self.step_fn(epoch, step, k)
                    bad = [name for name, v in values.items() if not math.isfinite(v)]
                    if bad:
                        fh.flush()
                        raise TrainingDiverged(
                            f"stage {self.stage}: non-finite {', '.join(bad)} at epoch {epoch}, "
                            f"step {step} ({values}); last finite state in {last}", last)
                    values = {**values, "epoch": epoch, "step": step}
                    writer.writerow([_fmt(values.get(c)) for c in self.header])
                    step += 1
                fh.flush()
                self._save_last(epoch + 1, step)
                log.info("stage %s: epoch %d/%d done", self.stage, epoch + 1, self.plan.epochs)

        meta = {**self.meta, "epochs": self.plan.epochs, "steps": step,
                "frozen": {h.param_set: h.checksum for h in self.frozen},
                "frozen_after": {h.param_set: h.verify() for h in self.frozen}}
        return save_checkpoint(self.out_dir / "checkpoint.bin", self.stage, self._weights(),
                               {k: o.state_dict() for k, o in self.optimizers.items()},
                               self.cfg.to_dict(), meta)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


# --------------------------------------------------------------------------
# stage paths and prerequisites

def stage_dir(cfg: RunConfig, stage: str) -> Path:
    return cfg.run_dir / STAGE_NAMES[stage]


def checkpoint_path(cfg: RunConfig, stage: str, plan_inputs: Mapping[str, str] | None = None) -> Path:
    inputs = plan_inputs or {}
    if stage in inputs:
        return Path(inputs[stage])
    return stage_dir(cfg, stage) / "checkpoint.bin"


def require(cfg: RunConfig, stage: str, needed: str, inputs: Mapping[str, str] | None = None) -> Checkpoint:
    """Load the stage-``needed`` checkpoint that ``stage`` depends on."""
    path = checkpoint_path(cfg, needed, inputs)
    if not path.is_file():
        raise PrerequisiteError(f"stage {stage} needs the stage-{needed} checkpoint at {path}; "
                                f"run `bgdet train --stage {needed}` first")
    return load_checkpoint(path, expect_stage=needed)


# --------------------------------------------------------------------------
# stage A

def train_enhancer(cfg: RunConfig, out_dir: Path | None = None, resume: bool = False,
                   stop_after: int | None = None) -> Checkpoint | None:
    """Unpaired adversarial training of both generators and discriminators."""
    plan = cfg.stages.A
    seed = cfg.stage_seed("A")
    data = load_train_data(cfg, with_clear=True)
    torch.manual_seed(seed)
    gen = build_generators(cfg)
    disc = DiscriminatorPair(cfg.model.disc_base)
    phi = PerceptualExtractor()
    frozen = [freeze({"phi": phi}, "perceptual")]
    opt_g = _optimizer([gen], plan)
    opt_d = _optimizer([disc], plan)
    w = cfg.enhancer_loss
    mode = cfg.adversarial
    n_u, n_a = len(data.images), len(data.clear)
    bs = plan.batch_size
    cache: dict = {}

    def order(epoch):
        if cache.get("epoch") != epoch:
            perm, flips, aux = _epoch_order(seed, "A", epoch, n_u, plan.augment_flip, n_a)
            cache.update(epoch=epoch, perm=perm, flips=flips, aux=aux)
        return cache

    def step_fn(epoch, step, k):
        o = order(epoch)
        idx = o["perm"][k * bs:(k + 1) * bs]
        x_u = data.images[torch.from_numpy(idx)]
        x_a = data.clear[torch.from_numpy(o["aux"][np.arange(k * bs, k * bs + len(idx)) % n_a])]
        if o["flips"][idx].any():
            f = torch.from_numpy(o["flips"][idx])[:, None, None, None]
            x_u = torch.where(f, x_u.flip(-1), x_u)
            x_a = torch.where(f, x_a.flip(-1), x_a)
        gen.train()
        disc.train()
        fake_a = gen.u2a(x_u)
        fake_u = gen.a2u(x_a)
        rec_u = gen.a2u(fake_a)
        rec_a = gen.u2a(fake_u)
        disc.requires_grad_(False)
        adv = (generator_adversarial_loss(disc.d_a(fake_a), mode)
               + generator_adversarial_loss(disc.d_u(fake_u), mode))
        cyc = cycle_l1(rec_u, x_u, rec_a, x_a)
        cp = feature_sq_error(phi, x_u, rec_u) + feature_sq_error(phi, x_a, rec_a)
        loss_g = adv + w.lambda1 * cyc + w.lambda2 * cp
        opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        opt_g.step()

        disc.requires_grad_(True)
        fa, fu = fake_a.detach(), fake_u.detach()
        sa_real, sa_fake = disc.d_a(x_a), disc.d_a(fa)
        su_real, su_fake = disc.d_u(x_u), disc.d_u(fu)
        loss_d = (discriminator_loss(sa_real, sa_fake, mode)
                  + discriminator_loss(su_real, su_fake, mode))
        opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        opt_d.step()
        with torch.no_grad():
            g_u2a = float(adversarial_loss(sa_real, sa_fake))
            g_a2u = float(adversarial_loss(su_real, su_fake))
        c, p = cyc.item(), cp.item()
        return {"l_gan_u2a": g_u2a, "l_gan_a2u": g_a2u, "l_cyc": c, "l_cp": p,
                "total": g_u2a + g_a2u + w.lambda1 * c + w.lambda2 * p}

    loop = _Loop("A", cfg, plan, out_dir or stage_dir(cfg, "A"), {"gen": gen, "disc": disc},
                 {"gen": opt_g, "disc": opt_d}, A_HEADER, step_fn,
                 lambda e: math.ceil(n_u / bs), meta={"seed": seed, "data": data.content},
                 frozen=frozen)
    return loop.run(resume, stop_after)


# --------------------------------------------------------------------------
# stages B and C

def _load_u2a(cfg: RunConfig, ck: Checkpoint, key: str) -> Generator:
    g = build_generator(cfg)
    state = ck.weights[key]
    if key == "gen":
        state = {k[len("u2a."):]: v for k, v in state.items() if k.startswith("u2a.")}
    g.load_state_dict(state)
    return g


def _det_step_fn(model, optimizer, data, seed, stage, plan, w, enhancer=None, train_enhancer=False,
                 cached=None):
    bs = plan.batch_size
    n = len(data.images)
    cache: dict = {}

    def step_fn(epoch, step, k):
        if cache.get("epoch") != epoch:
            perm, flips, _ = _epoch_order(seed, stage, epoch, n, plan.augment_flip)
            cache.update(epoch=epoch, perm=perm, flips=flips)
        idx = cache["perm"][k * bs:(k + 1) * bs]
        flips = cache["flips"][idx]
        if cached is not None:
            src = TrainData(cached, data.boxes, data.ids, data.classes)
            x, targets = _batch(src, idx, flips)
        elif enhancer is not None and not train_enhancer:
            raw = data.images[torch.from_numpy(idx)]
            with torch.no_grad():
                enh = enhancer(raw)
            x, targets = _batch(TrainData(enh, [data.boxes[i] for i in idx], [], []),
                                np.arange(len(idx)), flips)
        else:
            x, targets = _batch(data, idx, flips)
        model.train()
        if enhancer is not None and train_enhancer:
            enhancer.train()
            x = enhancer(x)
        preds, _ = model(x)
        loss, parts = detection_loss(preds, targets, w, model.anchors, model.strides)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        return {"l_obj": float(parts["obj"]), "l_loc": float(parts["loc"]),
                "l_cls": float(parts["cls"]), "total": loss.item()}

    return step_fn


def train_dsn(cfg: RunConfig, out_dir: Path | None = None, resume: bool = False,
              stop_after: int | None = None) -> Checkpoint | None:
    """Stage B: the enhancement branch's detector learns on enhanced images."""
    plan = cfg.stages.B
    ck_a = require(cfg, "B", "A", plan.inputs)
    seed = cfg.stage_seed("B")
    data = load_train_data(cfg)
    gen = _load_u2a(cfg, ck_a, "gen")
    frozen = [freeze({"generator": gen}, "generator")]
    cached = None
    if plan.cache_enhanced:
        with torch.no_grad():
            cached = torch.cat([gen(data.images[i:i + 64]) for i in range(0, len(data.images), 64)])
    torch.manual_seed(seed)
    dsn = build_detector(cfg, len(data.classes))
    opt = _optimizer([dsn], plan)
    step_fn = _det_step_fn(dsn, opt, data, seed, "B", plan, cfg.detection_loss, enhancer=gen,
                           cached=cached)
    loop = _Loop("B", cfg, plan, out_dir or stage_dir(cfg, "B"), {"dsn": dsn}, {"dsn": opt},
                 DET_HEADER, step_fn, lambda e: math.ceil(len(data.images) / plan.batch_size),
                 meta={"seed": seed, "data": data.content, "inputs": {"A": ck_a.checksum}},
                 frozen=frozen)
    return loop.run(resume, stop_after)


def train_enhancement_branch(cfg: RunConfig, out_dir: Path | None = None, resume: bool = False,
                             stop_after: int | None = None) -> Checkpoint | None:
    """Stage C: generator and detector optimised together on detection loss alone."""
    plan = cfg.stages.C
    ck_a = require(cfg, "C", "A", plan.inputs)
    ck_b = require(cfg, "C", "B", plan.inputs)
    seed = cfg.stage_seed("C")
    data = load_train_data(cfg)
    gen = _load_u2a(cfg, ck_a, "gen")
    dsn = build_detector(cfg, len(data.classes))
    dsn.load_state_dict(ck_b.weights["dsn"])
    branch = EnhancementBranch(gen, dsn)
    opt = _optimizer([branch], plan)
    step_fn = _det_step_fn(dsn, opt, data, seed, "C", plan, cfg.detection_loss, enhancer=gen,
                           train_enhancer=True)
    loop = _Loop("C", cfg, plan, out_dir or stage_dir(cfg, "C"), {"generator": gen, "dsn": dsn},
                 {"branch": opt}, DET_HEADER, step_fn,
                 lambda e: math.ceil(len(data.images) / plan.batch_size),
                 meta={"seed": seed, "data": data.content,
                       "inputs": {"A": ck_a.checksum, "B": ck_b.checksum}})
    return loop.run(resume, stop_after)


# --------------------------------------------------------------------------
# stage D

def load_enhancement_branch(cfg: RunConfig, ck: Checkpoint, num_classes: int) -> EnhancementBranch:
    gen = build_generator(cfg)
    gen.load_state_dict(ck.weights["generator"])
    dsn = build_detector(cfg, num_classes)
    dsn.load_state_dict(ck.weights["dsn"])
    return EnhancementBranch(gen, dsn)


def train_detection_branch(cfg: RunConfig, out_dir: Path | None = None, resume: bool = False,
                           stop_after: int | None = None, guidance: bool = True) -> Checkpoint | None:
    """Stage D: detection branch on raw images, guided by the frozen enhancement branch.

    ``guidance=False`` trains the same detector with the plain detection
    loss and never builds the enhancement branch.
    """
    plan = cfg.stages.D
    seed = cfg.stage_seed("D")
    ck_c = require(cfg, "D", "C", plan.inputs) if guidance else None
    data = load_train_data(cfg)
    teacher, frozen = None, []
    if guidance:
        teacher = load_enhancement_branch(cfg, ck_c, len(data.classes))
        handle = freeze({"generator": teacher.generator, "dsn": teacher.dsn}, "enhancement_branch")
        teacher.eval()
        if handle.checksum != ck_c.checksum:
            raise ContractError("enhancement branch does not match its stage-C checkpoint")
        frozen.append(handle)
    torch.manual_seed(seed)
    det = build_detector(cfg, len(data.classes))
    opt = _optimizer([det], plan)
    gw, tw, dw = cfg.guidance, cfg.total_loss, cfg.detection_loss
    bs = plan.batch_size
    n = len(data.images)
    cache: dict = {}

    def step_fn(epoch, step, k):
        if cache.get("epoch") != epoch:
            perm, flips, _ = _epoch_order(seed, "D", epoch, n, plan.augment_flip)
            cache.update(epoch=epoch, perm=perm, flips=flips)
        idx = cache["perm"][k * bs:(k + 1) * bs]
        x, targets = _batch(data, idx, cache["flips"][idx])
        det.train()
        preds, taps = det(x)
        l_det, _ = detection_loss(preds, targets, dw, det.anchors, det.strides)
        row = {"l_det": l_det.item()}
        if teacher is None:
            loss = total_loss(l_det, 0.0, tw)
        else:
            tf, ti = extract_pair(det, teacher, x, det_taps=taps)
            per_level: dict = {}
            # a zero weight keeps the term out of the graph so gradients match the plain loop bitwise
            with torch.set_grad_enabled(tw.eta2 != 0):
                l_fgm = full_guided_loss(tf, ti, gw, per_level)
            with torch.no_grad():
                for lvl in LEVELS:
                    if lvl not in per_level:
                        per_level[lvl] = feature_consistency_loss(tf.taps[lvl], ti.taps[lvl],
                                                                  gw.normalization, lvl)
            loss = total_loss(l_det, l_fgm, tw)
            row.update({f"l_con{lvl}": float(per_level[lvl]) for lvl in LEVELS})
            row["l_fgm"] = l_fgm.item()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        row["total"] = loss.item()
        return row

    meta = {"seed": seed, "data": data.content, "guidance": guidance,
            "inputs": {"C": ck_c.checksum} if ck_c else {}}
    loop = _Loop("D", cfg, plan, out_dir or stage_dir(cfg, "D"), {"det": det}, {"det": opt},
                 D_HEADER, step_fn, lambda e: math.ceil(n / bs), meta=meta, frozen=frozen)
    return loop.run(resume, stop_after)


_RUNNERS = {"A": train_enhancer, "B": train_dsn, "C": train_enhancement_branch,
            "D": train_detection_branch}


def run_stage(cfg: RunConfig, stage: str, out_dir: Path | None = None, resume: bool = False,
              stop_after: int | None = None) -> Checkpoint | None:
    """Train one stage; returns its checkpoint (None when stopped early)."""
    if stage not in _RUNNERS:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if cfg.num_threads:
        torch.set_num_threads(cfg.num_threads)
    return _RUNNERS[stage](cfg, out_dir=out_dir, resume=resume, stop_after=stop_after)
