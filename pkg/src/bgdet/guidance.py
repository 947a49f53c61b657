"""Feature guidance between the enhancement branch and the detection branch.

The detection branch sees the raw underwater image; the enhancement branch
(a generator followed by its own detector) sees the same image after
enhancement.  Their shallow tap maps are pulled together with an MSE
consistency loss, weighted per level and added to the detection loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .detector import TAP_NAMES, DetectorNet
from .enhancer import Generator
from .errors import ConfigError, ContractError, ShapeError

LEVELS = (1, 2, 3)
LEVEL_TAPS = dict(zip(LEVELS, TAP_NAMES))
DETECTION_BRANCH = "detection_branch"
ENHANCEMENT_BRANCH = "enhancement_branch"


@dataclass
class FeatureTapSet:
    taps: dict[int, torch.Tensor]
    source: str

    @classmethod
    def from_named(cls, named: dict[str, torch.Tensor], source: str) -> "FeatureTapSet":
        return cls({l: named[LEVEL_TAPS[l]] for l in LEVELS if LEVEL_TAPS[l] in named}, source)


@dataclass
class GuidanceWeights:
    mu1: float = 1.0
    mu2: float = 1.0
    mu3: float = 1.0
    enabled_levels: tuple[int, ...] = (1, 2, 3)
    # "mean" averages over channels*h*w; "spatial" sums channels and divides by h*w
    normalization: str = "mean"

    def validate(self):
        for name in ("mu1", "mu2", "mu3"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        bad = set(self.enabled_levels) - set(LEVELS)
        if bad:
            raise ConfigError(f"unknown guidance levels {sorted(bad)}")
        if self.normalization not in ("mean", "spatial"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        return self

    def mu(self, level: int) -> float:
        return getattr(self, f"mu{level}")

    @classmethod
    def only(cls, *levels: int, mu: float = 1.0) -> "GuidanceWeights":
        return cls(mu, mu, mu, tuple(levels))


@dataclass
class TotalLossWeights:
    eta1: float = 1.0
    eta2: float = 0.05

    def validate(self):
        for name in ("eta1", "eta2"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        return self


def feature_consistency_loss(f: torch.Tensor, i: torch.Tensor, normalization: str = "mean",
                             level: int | None = None) -> torch.Tensor:
    """Squared difference of two tap maps, batch-averaged.

    Accepts (C, h, w) or (B, C, h, w).  ``mean`` divides by C*h*w; ``spatial``
    divides by h*w only.
    """
    if f.shape != i.shape:
        where = f" at level {level}" if level is not None else ""
        raise ShapeError(f"tap shapes differ{where}: {tuple(f.shape)} vs {tuple(i.shape)}")
    if f.dim() == 3:
        f, i = f[None], i[None]
    sq = (f - i) ** 2
    if normalization == "spatial":
        h, w = f.shape[-2:]
        return sq.sum(dim=(1, 2, 3)).mean() / (h * w)
    return sq.mean()


def full_guided_loss(taps_f: FeatureTapSet, taps_i: FeatureTapSet, w: GuidanceWeights,
                     per_level: dict | None = None) -> torch.Tensor:
    """Weighted sum of the consistency losses over the enabled levels.

    When ``per_level`` is a dict it receives the unweighted level losses.
    """
    total = None
    for level in sorted(w.enabled_levels):
        if level not in taps_f.taps or level not in taps_i.taps:
            raise ShapeError(f"guidance level {level} missing from "
                             f"{taps_f.source if level not in taps_f.taps else taps_i.source}")
        loss = feature_consistency_loss(taps_f.taps[level], taps_i.taps[level], w.normalization, level)
        if per_level is not None:
            per_level[level] = loss.detach()
        term = w.mu(level) * loss
        total = term if total is None else total + term
    if total is None:
        ref = next(iter(taps_f.taps.values()), None)
        return ref.sum() * 0.0 if ref is not None else torch.zeros(())
    return total


def total_loss(l_det, l_fgm, w: TotalLossWeights):
    return w.eta1 * l_det + w.eta2 * l_fgm


class EnhancementBranch(nn.Module):
    """Enhancement generator cascaded with its detector (the guidance teacher)."""

    def __init__(self, generator: Generator, dsn: DetectorNet):
        super().__init__()
        self.generator = generator
        self.dsn = dsn

    def forward(self, x):
        return self.dsn(self.generator(x))


def _is_frozen(module: nn.Module) -> bool:
    return not module.training and not any(p.requires_grad for p in module.parameters())


def extract_pair(det_branch: DetectorNet, enh_branch: EnhancementBranch, img_u: torch.Tensor,
                 det_taps: dict | None = None) -> tuple[FeatureTapSet, FeatureTapSet]:
    """Tap maps of the detection branch on ``img_u`` and of the frozen
    enhancement branch on ``enhance(img_u)``.

    ``det_taps`` lets a caller reuse taps from a full forward pass.
    """
    if not _is_frozen(enh_branch):
        raise ContractError("enhancement branch must be frozen (eval mode, no trainable "
                            "parameters) before guided training")
    if det_taps is None:
        det_taps = det_branch.taps(img_u)
    with torch.no_grad():
        teacher = enh_branch.dsn.taps(enh_branch.generator(img_u))
    taps_f = FeatureTapSet.from_named(det_taps, DETECTION_BRANCH)
    taps_i = FeatureTapSet.from_named(teacher, ENHANCEMENT_BRANCH)
    for level in LEVELS:
        if taps_f.taps[level].shape != taps_i.taps[level].shape:
            raise ShapeError(f"level {level} tap shapes differ between branches: "
                             f"{tuple(taps_f.taps[level].shape)} vs {tuple(taps_i.taps[level].shape)}")
    return taps_f, taps_i
