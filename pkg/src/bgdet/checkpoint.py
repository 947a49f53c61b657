"""Self-describing checkpoint files with content checksums.

Layout: ``MAGIC``, a 4-byte big-endian header length, a JSON header, then a
``torch.save`` payload holding the weights and optimizer states.  The
header carries the stage tag, format version, config snapshot and a
SHA-256 over every tensor in the weights, re-verified on load.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from .errors import ArtifactError

MAGIC = b"BGDETCKPT\n"
FORMAT_VERSION = 1


def state_checksum(state: dict) -> str:
    """SHA-256 over names, dtypes, shapes and raw bytes of a state dict."""
    h = hashlib.sha256()
    for key in sorted(state):
        value = state[key]
        h.update(key.encode())
        if isinstance(value, torch.Tensor):
            t = value.detach().cpu().contiguous()
            h.update(str(t.dtype).encode())
            h.update(str(tuple(t.shape)).encode())
            h.update(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
        elif isinstance(value, dict):
            h.update(state_checksum(value).encode())
        else:
            h.update(repr(value).encode())
    return h.hexdigest()


def module_checksum(module: nn.Module) -> str:
    return state_checksum(module.state_dict())


def weights_checksum(weights: dict[str, dict]) -> str:
    return state_checksum({name: state_checksum(sd) for name, sd in weights.items()})


@dataclass
class Checkpoint:
    stage: str
    weights: dict[str, dict]
    optimizer: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    checksum: str = ""
    path: Path | None = None

    @property
    def module_checksums(self) -> dict[str, str]:
        return {k: state_checksum(v) for k, v in self.weights.items()}


def save_checkpoint(path, stage: str, weights: dict[str, dict], optimizer: dict | None = None,
                    config: dict | None = None, meta: dict | None = None) -> Checkpoint:
    weights = {k: {n: t.detach().cpu().clone() for n, t in sd.items()} for k, sd in weights.items()}
    ckpt = Checkpoint(stage=stage, weights=weights, optimizer=optimizer or {},
                      config=config or {}, meta=meta or {}, checksum=weights_checksum(weights))
    buf = io.BytesIO()
    torch.save({"weights": ckpt.weights, "optimizer": ckpt.optimizer}, buf)
    payload = buf.getvalue()
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "checksum": ckpt.checksum,
        "module_checksums": ckpt.module_checksums,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "config": ckpt.config,
        "meta": ckpt.meta,
    }, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(">I", len(header)))
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)
    ckpt.path = path
    return ckpt


def read_header(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            if fh.read(len(MAGIC)) != MAGIC:
                raise ArtifactError(f"{path} is not a bgdet checkpoint")
            (n,) = struct.unpack(">I", fh.read(4))
            return json.loads(fh.read(n))
    except (OSError, struct.error, json.JSONDecodeError) as exc:
        raise ArtifactError(f"cannot read checkpoint {path}: {exc}") from exc


def load_checkpoint(path, expect_stage: str | None = None) -> Checkpoint:
    """Load and verify a checkpoint; raises :class:`ArtifactError` on any mismatch."""
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise ArtifactError(f"{path} is not a bgdet checkpoint")
    try:
        (n,) = struct.unpack(">I", raw[len(MAGIC):len(MAGIC) + 4])
        start = len(MAGIC) + 4
        header = json.loads(raw[start:start + n])
        payload = raw[start + n:]
    except (struct.error, json.JSONDecodeError) as exc:
        raise ArtifactError(f"corrupt checkpoint header in {path}: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ArtifactError(f"{path}: unsupported format version {header.get('format_version')}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ArtifactError(f"{path}: payload checksum mismatch")
    try:
        data = torch.load(io.BytesIO(payload), weights_only=True)
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise ArtifactError(f"{path}: cannot decode payload: {exc}") from exc
    ckpt = Checkpoint(stage=header["stage"], weights=data["weights"], optimizer=data["optimizer"],
                      config=header["config"], meta=header["meta"], checksum=header["checksum"],
                      path=path)
    if weights_checksum(ckpt.weights) != ckpt.checksum:
        raise ArtifactError(f"{path}: parameter checksum does not validate")
    if expect_stage is not None and ckpt.stage != expect_stage:
        raise ArtifactError(f"{path}: expected a stage-{expect_stage} checkpoint, found {ckpt.stage}")
    return ckpt


def max_abs_diff(a: dict, b: dict) -> float:
    """Largest absolute difference between two state dicts with equal keys."""
    worst = 0.0
    for k in a:
        x, y = a[k], b[k]
        if x.is_floating_point():
            worst = max(worst, float((x.double() - y.double()).abs().max()) if x.numel() else 0.0)
        elif not torch.equal(x, y):
            worst = float("inf")
    return worst

