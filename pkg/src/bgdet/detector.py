"""Compact three-scale single-stage detector.

The backbone exposes its three shallow layers (``conv1``, ``conv2``,
``csp_block``) as named taps so two instances of the network can be
compared feature-for-feature.  Predictions follow the usual anchor-based
parametrisation: per cell and anchor ``(tx, ty, tw, th, obj, cls...)`` with
``xy = 2*sigmoid(t) - 0.5`` (cell units) and ``wh = (2*sigmoid(t))**2 * anchor``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

TAP_NAMES = ("conv1", "conv2", "csp_block")
STRIDES = (8, 16, 32)
# anchor (w, h) in pixels, sized for 64x64 desk-scale scenes
DEFAULT_ANCHORS = (
    ((8, 8), (12, 9), (9, 12)),
    ((16, 16), (22, 16), (16, 22)),
    ((28, 28), (38, 30), (30, 38)),
)
# anchors used by the 416/640-pixel detector family
FULL_SCALE_ANCHORS = (
    ((10, 13), (16, 30), (33, 23)),
    ((30, 61), (62, 45), (59, 119)),
    ((116, 90), (156, 198), (373, 326)),
)
ANCHOR_RATIO_MAX = 4.0


class ConvBNAct(nn.Module):
    def __init__(self, c_in, c_out, k=1, s=1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, k, s, k // 2, bias=False)
        self.bn = nn.BatchNorm2d(c_out, eps=1e-3, momentum=0.03)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class Bottleneck(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.cv1 = ConvBNAct(c, c, 1)
        self.cv2 = ConvBNAct(c, c, 3)

    def forward(self, x):
        return x + self.cv2(self.cv1(x))


class C3(nn.Module):
    """CSP block: a bottleneck path and a shortcut path, fused by a 1x1 conv."""

    def __init__(self, c_in, c_out, n=1):
        super().__init__()
        c_ = max(c_out // 2, 1)
        self.cv1 = ConvBNAct(c_in, c_, 1)
        self.cv2 = ConvBNAct(c_in, c_, 1)
        self.m = nn.Sequential(*[Bottleneck(c_) for _ in range(n)])
        self.cv3 = ConvBNAct(2 * c_, c_out, 1)

    def forward(self, x):
        return self.cv3(torch.cat([self.m(self.cv1(x)), self.cv2(x)], dim=1))


def scaled_widths(widths, width_multiple: float) -> tuple[int, ...]:
    if width_multiple <= 0:
        raise ConfigError(f"width_multiple must be positive, got {width_multiple}")
    return tuple(max(1, int(math.ceil(w * width_multiple))) for w in widths)


class DetectorNet(nn.Module):
    def __init__(self, num_classes: int, widths=(16, 32, 32, 64, 128), width_multiple: float = 1.0,
                 anchors=DEFAULT_ANCHORS, strides=STRIDES):
        super().__init__()
        if num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if len(widths) != 5:
            raise ConfigError(f"expected 5 channel widths, got {widths}")
        c1, c2, c3, c4, c5 = scaled_widths(widths, width_multiple)
        self.num_classes = num_classes
        self.strides = tuple(strides)
        self.register_buffer("anchors", torch.tensor(anchors, dtype=torch.float32))  # (nl, na, 2) px
        self.na = self.anchors.shape[1]
        self.no = 5 + num_classes

        self.conv1 = ConvBNAct(3, c1, 3, 2)        # stride 2
        self.conv2 = ConvBNAct(c1, c2, 3, 2)       # stride 4
        self.csp_block = C3(c2, c3)                # stride 4
        self.down3 = nn.Sequential(ConvBNAct(c3, c4, 3, 2), C3(c4, c4))  # stride 8
        self.down4 = nn.Sequential(ConvBNAct(c4, c5, 3, 2), C3(c5, c5))  # stride 16
        self.down5 = nn.Sequential(ConvBNAct(c5, c5, 3, 2), C3(c5, c5))  # stride 32

        self.lat5 = ConvBNAct(c5, c4, 1)
        self.fuse4 = C3(c4 + c5, c4)
        self.lat4 = ConvBNAct(c4, c3, 1)
        self.fuse3 = C3(c3 + c4, c3)
        self.heads = nn.ModuleList(nn.Conv2d(c, self.na * self.no, 1) for c in (c3, c4, c4))
        self._init_head_bias()

    def _init_head_bias(self):
        for head in self.heads:
            b = head.bias.view(self.na, self.no)
            with torch.no_grad():
                b[:, 4] = math.log(0.02 / 0.98)
                b[:, 5:] = math.log(0.6 / max(self.num_classes - 0.99, 0.01))

    def tap_channels(self) -> tuple[int, int, int]:
        return (self.conv1.conv.out_channels, self.conv2.conv.out_channels,
                self.csp_block.cv3.conv.out_channels)

    def _check(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        s = max(self.strides)
        if x.shape[-2] % s or x.shape[-1] % s:
            raise ShapeError(f"input size {tuple(x.shape[-2:])} not divisible by {s}")

    def taps(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """Only the three shallow tap maps (stops after ``csp_block``)."""
        self._check(x)
        t1 = self.conv1(x)
        t2 = self.conv2(t1)
        return {"conv1": t1, "conv2": t2, "csp_block": self.csp_block(t2)}

    def backbone_forward(self, x: torch.Tensor):
        """Return the head inputs (strides 8, 16, 32) and the tap maps."""
        taps = self.taps(x)
        p3 = self.down3(taps["csp_block"])
        p4 = self.down4(p3)
        p5 = self.down5(p4)
        t5 = self.lat5(p5)
        n4 = self.fuse4(torch.cat([F.interpolate(t5, scale_factor=2.0, mode="nearest"), p4], 1))
        t4 = self.lat4(n4)
        n3 = self.fuse3(torch.cat([F.interpolate(t4, scale_factor=2.0, mode="nearest"), p3], 1))
        return [n3, n4, t5], taps

    def forward(self, x: torch.Tensor):
        """Return ``(preds, taps)``; ``preds[l]`` has shape (B, na, H_l, W_l, 5 + nc)."""
        feats, taps = self.backbone_forward(x)
        preds = []
        for head, f in zip(self.heads, feats):
            b, _, h, w = f.shape
            preds.append(head(f).view(b, self.na, self.no, h, w).permute(0, 1, 3, 4, 2).contiguous())
        return preds, taps


# --------------------------------------------------------------------------
# geometry

def cxcywh_to_xyxy(b):
    if isinstance(b, torch.Tensor):
        return torch.stack([b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2,
                            b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2], -1)
    b = np.asarray(b, dtype=np.float64)
    return np.stack([b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2,
                     b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2], -1)


def iou(box_a, box_b) -> float:
    """IoU of two ``(cx, cy, w, h)`` boxes; zero-area boxes give 0."""
    ax0, ay0, ax1, ay1 = cxcywh_to_xyxy(np.asarray(box_a[-4:], dtype=np.float64))
    bx0, by0, bx1, by1 = cxcywh_to_xyxy(np.asarray(box_b[-4:], dtype=np.float64))
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    if area_a <= 0 or area_b <= 0:
        return 0.0
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (area_a + area_b - inter))


def iou_matrix(a_xyxy: np.ndarray, b_xyxy: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two sets of corner boxes."""
    a = np.asarray(a_xyxy, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b_xyxy, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


def bbox_ciou(b1: torch.Tensor, b2: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Complete IoU between matching rows of two ``(cx, cy, w, h)`` tensors."""
    x1, y1, w1, h1 = b1.unbind(-1)
    x2, y2, w2, h2 = b2.unbind(-1)
    l1, r1, t1, d1 = x1 - w1 / 2, x1 + w1 / 2, y1 - h1 / 2, y1 + h1 / 2
    l2, r2, t2, d2 = x2 - w2 / 2, x2 + w2 / 2, y2 - h2 / 2, y2 + h2 / 2
    inter = (torch.min(r1, r2) - torch.max(l1, l2)).clamp(min=0) * \
            (torch.min(d1, d2) - torch.max(t1, t2)).clamp(min=0)
    union = w1 * h1 + w2 * h2 - inter + eps
    iou_ = inter / union
    cw = torch.max(r1, r2) - torch.min(l1, l2)
    ch = torch.max(d1, d2) - torch.min(t1, t2)
    c2 = cw ** 2 + ch ** 2 + eps
    rho2 = (x2 - x1) ** 2 + (y2 - y1) ** 2
    v = (4 / math.pi ** 2) * (torch.atan(w2 / (h2 + eps)) - torch.atan(w1 / (h1 + eps))) ** 2
    alpha = v / (v - iou_ + (1 + eps))
    return iou_ - (rho2 / c2 + v * alpha)


# --------------------------------------------------------------------------
# loss

@dataclass
class DetectionLossWeights:
    a: float = 1.0   # objectness
    b: float = 0.05  # localisation
    c: float = 0.5   # classification
    obj_balance: tuple[float, float, float] = (4.0, 1.0, 0.4)
    use_ciou: bool = True

    def validate(self):
        for name in ("a", "b", "c"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"detection weight {name} must be finite and >= 0, got {v}")
        return self


@dataclass
class Assignment:
    """Targets matched to one pyramid level."""

    b: torch.Tensor       # image index
    a: torch.Tensor       # anchor index
    gj: torch.Tensor      # cell row
    gi: torch.Tensor      # cell column
    tbox: torch.Tensor    # (n, 4): offset in cell and wh, grid units
    anchor: torch.Tensor  # (n, 2) grid units
    tcls: torch.Tensor


def assign_targets(grid_shapes, targets: torch.Tensor, anchors_px: torch.Tensor,
                   strides, img_size) -> list[Assignment]:
    """Centre-cell assignment with an anchor shape filter.

    ``targets`` is (M, 6): image index, class, cx, cy, w, h (normalised).
    A target goes to the cell containing its centre, at every level and
    anchor whose width and height ratios both lie within [1/4, 4].
    """
    out = []
    for l, (gh, gw) in enumerate(grid_shapes):
        anchor = anchors_px[l].to(targets.dtype) / strides[l]  # (na, 2)
        if targets.shape[0] == 0:
            e = targets.new_zeros((0,), dtype=torch.long)
            out.append(Assignment(e, e, e, e, targets.new_zeros((0, 4)), targets.new_zeros((0, 2)), e))
            continue
        twh = targets[:, 4:6] * targets.new_tensor([gw, gh])           # (M, 2)
        ratio = twh[None, :, :] / anchor[:, None, :]                   # (na, M, 2)
        worst = torch.max(ratio, 1 / ratio).max(dim=2).values
        a_idx, t_idx = torch.nonzero(worst <= ANCHOR_RATIO_MAX, as_tuple=True)
        t = targets[t_idx]
        gxy = t[:, 2:4] * t.new_tensor([gw, gh])
        gij = gxy.floor().long()
        gi = gij[:, 0].clamp(0, gw - 1)
        gj = gij[:, 1].clamp(0, gh - 1)
        offset = gxy - torch.stack([gi, gj], 1).to(gxy.dtype)
        out.append(Assignment(
            b=t[:, 0].long(), a=a_idx, gj=gj, gi=gi,
            tbox=torch.cat([offset, twh[t_idx]], 1),
            anchor=anchor[a_idx], tcls=t[:, 1].long(),
        ))
    return out


def detection_loss(preds: list[torch.Tensor], targets: torch.Tensor, w: DetectionLossWeights,
                   anchors_px: torch.Tensor, strides=STRIDES, img_size=None):
    """Weighted sum ``a*obj + b*loc + c*cls`` and its components.

    obj: per-level mean BCE on every anchor (target 1 where assigned),
    weighted by ``obj_balance``; loc: mean ``1 - CIoU`` over assignments;
    cls: mean one-hot BCE over assignments.  Without assignments loc and
    cls are zero.
    """
    if img_size is None:
        img_size = (preds[0].shape[2] * strides[0], preds[0].shape[3] * strides[0])
    grid_shapes = [(p.shape[2], p.shape[3]) for p in preds]
    assigned = assign_targets(grid_shapes, targets, anchors_px, strides, img_size)
    zero = preds[0].sum() * 0.0
    l_obj = zero
    loc_terms, cls_logits, cls_targets = [], [], []
    for l, (p, asg) in enumerate(zip(preds, assigned)):
        tobj = torch.zeros_like(p[..., 4])
        if asg.b.numel():
            ps = p[asg.b, asg.a, asg.gj, asg.gi]
            pxy = torch.sigmoid(ps[:, 0:2]) * 2 - 0.5
            pwh = (torch.sigmoid(ps[:, 2:4]) * 2) ** 2 * asg.anchor
            pbox = torch.cat([pxy, pwh], 1)
            if w.use_ciou:
                overlap = bbox_ciou(pbox, asg.tbox)
            else:
                overlap = _plain_iou(pbox, asg.tbox)
            loc_terms.append(1.0 - overlap)
            cls_logits.append(ps[:, 5:])
            cls_targets.append(F.one_hot(asg.tcls, p.shape[-1] - 5).to(p.dtype))
            tobj[asg.b, asg.a, asg.gj, asg.gi] = 1.0
        l_obj = l_obj + w.obj_balance[l] * F.binary_cross_entropy_with_logits(p[..., 4], tobj)
    if loc_terms:
        l_loc = torch.cat(loc_terms).mean()
        l_cls = F.binary_cross_entropy_with_logits(torch.cat(cls_logits), torch.cat(cls_targets))
    else:
        l_loc, l_cls = zero, zero
    total = w.a * l_obj + w.b * l_loc + w.c * l_cls
    return total, {"obj": l_obj.detach(), "loc": l_loc.detach(), "cls": l_cls.detach()}


def _plain_iou(b1, b2, eps=1e-7):
    x1, y1, w1, h1 = b1.unbind(-1)
    x2, y2, w2, h2 = b2.unbind(-1)
    iw = (torch.min(x1 + w1 / 2, x2 + w2 / 2) - torch.max(x1 - w1 / 2, x2 - w2 / 2)).clamp(min=0)
    ih = (torch.min(y1 + h1 / 2, y2 + h2 / 2) - torch.max(y1 - h1 / 2, y2 - h2 / 2)).clamp(min=0)
    inter = iw * ih
    return inter / (w1 * h1 + w2 * h2 - inter + eps)


# --------------------------------------------------------------------------
# inference

@dataclass
class Detection:
    class_id: int
    score: float
    cx: float
    cy: float
    w: float
    h: float

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


def decode(preds: list[torch.Tensor], anchors_px: torch.Tensor, strides=STRIDES, img_size=None):
    """Flatten raw head outputs to per-image (N, 4 + nc) arrays.

    Columns: normalised cx, cy, w, h followed by per-class scores
    ``sigmoid(obj) * sigmoid(cls)``.
    """
    if img_size is None:
        img_size = (preds[0].shape[2] * strides[0], preds[0].shape[3] * strides[0])
    img_h, img_w = img_size
    rows = []
    for l, p in enumerate(preds):
        b, na, gh, gw, _ = p.shape
        gy, gx = torch.meshgrid(torch.arange(gh, dtype=p.dtype), torch.arange(gw, dtype=p.dtype),
                                indexing="ij")
        s = torch.sigmoid(p)
        x = (s[..., 0] * 2 - 0.5 + gx) * strides[l] / img_w
        y = (s[..., 1] * 2 - 0.5 + gy) * strides[l] / img_h
        anc = anchors_px[l].to(p.dtype).view(1, na, 1, 1, 2)
        wh = (s[..., 2:4] * 2) ** 2 * anc / p.new_tensor([img_w, img_h])
        scores = s[..., 4:5] * s[..., 5:]
        rows.append(torch.cat([x[..., None], y[..., None], wh, scores], -1).reshape(b, -1, 4 + p.shape[-1] - 5))
    return torch.cat(rows, 1)


def nms(boxes_xyxy: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order.

    A box is suppressed when its IoU with an already kept box exceeds
    ``iou_thresh``.  Ties in score keep the lower index first.
    """
    order = np.argsort(-np.asarray(scores), kind="stable")
    boxes = np.asarray(boxes_xyxy, dtype=np.float64)
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        ious = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][ious <= iou_thresh]
    return np.asarray(keep, dtype=np.int64)


def nms_detections(boxes_cxcywh: np.ndarray, class_scores: np.ndarray, conf_thresh: float,
                   iou_thresh: float, max_det: int = 100) -> list[Detection]:
    """Best-class candidates above ``conf_thresh``, per-class NMS, sorted by score."""
    if not (0 <= conf_thresh <= 1 and 0 <= iou_thresh <= 1):
        raise ConfigError("thresholds must lie in [0, 1]")
    cls = class_scores.argmax(1)
    score = class_scores[np.arange(len(cls)), cls]
    mask = score >= conf_thresh
    boxes, cls, score = boxes_cxcywh[mask], cls[mask], score[mask]
    xyxy = cxcywh_to_xyxy(boxes)
    kept = []
    for c in np.unique(cls):
        idx = np.flatnonzero(cls == c)
        kept.extend(idx[nms(xyxy[idx], score[idx], iou_thresh)])
    kept = sorted(kept, key=lambda i: (-score[i], i))[:max_det]
    return [Detection(int(cls[i]), float(score[i]), *map(float, boxes[i])) for i in kept]


def decode_and_nms(preds, conf_thresh: float, iou_thresh: float, anchors_px, strides=STRIDES,
                   img_size=None, max_det: int = 100) -> list[list[Detection]]:
    flat = decode(preds, anchors_px, strides, img_size).detach().double().numpy()
    return [nms_detections(f[:, :4], f[:, 4:], conf_thresh, iou_thresh, max_det) for f in flat]


@torch.no_grad()
def predict(model: DetectorNet, images: torch.Tensor, conf_thresh=0.001, iou_thresh=0.6,
            batch_size: int = 32, enhancer=None) -> list[list[Detection]]:
    """Run ``model`` (optionally after ``enhancer``) over a batch of images."""
    model.eval()
    if enhancer is not None:
        enhancer.eval()
    out = []
    img_size = tuple(images.shape[-2:])
    for i in range(0, images.shape[0], batch_size):
        x = images[i:i + batch_size]
        if enhancer is not None:
            x = enhancer(x)
        preds, _ = model(x)
        out.extend(decode_and_nms(preds, conf_thresh, iou_thresh, model.anchors, model.strides,
                                  img_size))
    return out


def write_detections_csv(path, ids, detections: list[list[Detection]]) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "class_id", "score", "cx", "cy", "w", "h"])
        for image_id, dets in zip(ids, detections):
            for d in dets:
                writer.writerow([image_id, d.class_id, repr(d.score), repr(d.cx), repr(d.cy),
                                 repr(d.w), repr(d.h)])


def targets_from_boxes(boxes: list[np.ndarray]) -> torch.Tensor:
    """Stack per-image (n, 5) box arrays into an (M, 6) target tensor."""
    rows = [np.concatenate([np.full((len(b), 1), i, dtype=np.float32), b], 1)
            for i, b in enumerate(boxes) if len(b)]
    if not rows:
        return torch.zeros((0, 6))
    return torch.from_numpy(np.concatenate(rows).astype(np.float32))
