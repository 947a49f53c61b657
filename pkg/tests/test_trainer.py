import csv
import dataclasses
import math

import numpy as np
import pytest
import torch

from bgdet.checkpoint import load_checkpoint, max_abs_diff, save_checkpoint
from bgdet.config import STAGE_NAMES
from bgdet.datagen import class_names
from bgdet.enhancer import GeneratorPair, PerceptualExtractor
from bgdet.errors import ArtifactError, ConfigError, ContractError, PrerequisiteError, TrainingDiverged
from bgdet.trainer import (A_HEADER, D_HEADER, DET_HEADER, _epoch_order, build_detector, freeze,
                           load_train_data, lr_schedule, run_stage, train_detection_branch)
from conftest import tiny_config


def with_plan(cfg, stage, **changes):
    plans = dataclasses.replace(cfg.stages, **{stage: dataclasses.replace(cfg.stages[stage], **changes)})
    return cfg.replace(stages=plans)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# --------------------------------------------------------------------------
# schedule

def test_lr_schedule_end_points_and_midpoint():
    assert lr_schedule(1e-2, 1e-2, 0, 300) == 1e-2
    assert abs(lr_schedule(1e-2, 1e-2, 299, 300) - 1e-4) <= 1e-12
    assert lr_schedule(1.0, 0.2, 5, 11) == pytest.approx((1 + 0.2) / 2, abs=1e-12)
    assert lr_schedule(0.5, 0.1, 0, 1) == 0.5
    with pytest.raises(ConfigError):
        lr_schedule(1.0, 0.1, 3, 3)


def test_lr_schedule_is_monotone():
    vals = [lr_schedule(1e-2, 1e-2, e, 30) for e in range(30)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


# --------------------------------------------------------------------------
# freezing and checkpoints

def test_freeze_named_sets_and_paths():
    gen = GeneratorPair(4, 1)
    h = freeze({"gen": gen}, "gen.u2a")
    assert not any(p.requires_grad for p in gen.u2a.parameters())
    assert all(p.requires_grad for p in gen.a2u.parameters())
    assert h.verify() == h.checksum
    with torch.no_grad():
        next(gen.u2a.parameters()).add_(1.0)
    with pytest.raises(ContractError):
        h.verify()
    phi = freeze({"phi": PerceptualExtractor()}, "perceptual")
    assert phi.param_set == "perceptual"


@pytest.mark.parametrize("name", ["nope", "gen.nothing", "generator"])
def test_freeze_unknown_subtree(name):
    with pytest.raises(ConfigError):
        freeze({"gen": GeneratorPair(4, 1)}, name)


def test_checkpoint_round_trip_and_corruption(tmp_path):
    torch.manual_seed(0)
    det = build_detector(tiny_config(tmp_path, tmp_path), 3)
    ck = save_checkpoint(tmp_path / "c.bin", "B", {"dsn": det.state_dict()}, meta={"x": 1})
    back = load_checkpoint(tmp_path / "c.bin", expect_stage="B")
    assert back.checksum == ck.checksum and back.meta == {"x": 1}
    assert max_abs_diff(back.weights["dsn"], det.state_dict()) == 0.0
    with pytest.raises(ArtifactError):
        load_checkpoint(tmp_path / "c.bin", expect_stage="C")
    raw = bytearray((tmp_path / "c.bin").read_bytes())
    raw[-5] ^= 0xFF
    (tmp_path / "bad.bin").write_bytes(bytes(raw))
    with pytest.raises(ArtifactError):
        load_checkpoint(tmp_path / "bad.bin")
    (tmp_path / "junk.bin").write_bytes(b"hello")
    with pytest.raises(ArtifactError):
        load_checkpoint(tmp_path / "junk.bin")


# --------------------------------------------------------------------------
# data order

def test_epoch_order_seeded():
    a = _epoch_order(0, "B", 3, 50, True)
    b = _epoch_order(0, "B", 3, 50, True)
    c = _epoch_order(0, "B", 4, 50, True)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], c[0])
    assert sorted(a[0].tolist()) == list(range(50))
    assert not _epoch_order(0, "B", 0, 50, False)[1].any()


def test_missing_dataset_is_prerequisite_error(tmp_path):
    with pytest.raises(PrerequisiteError):
        load_train_data(tiny_config(tmp_path, tmp_path / "none"))


# --------------------------------------------------------------------------
# stage orchestration

@pytest.mark.parametrize("stage,missing", [("B", "A"), ("C", "A"), ("D", "C")])
def test_stage_ordering_enforced(tmp_path, tiny_data, stage, missing):
    cfg = tiny_config(tmp_path, tiny_data)
    with pytest.raises(PrerequisiteError, match=f"stage-{missing}"):
        run_stage(cfg, stage)


def test_stage_outputs_and_headers(tiny_run):
    cfg, cks = tiny_run
    headers = {"A": A_HEADER, "B": DET_HEADER, "C": DET_HEADER, "D": D_HEADER}
    keys = {"A": {"gen", "disc"}, "B": {"dsn"}, "C": {"generator", "dsn"}, "D": {"det"}}
    for s, ck in cks.items():
        d = cfg.run_dir / STAGE_NAMES[s]
        assert ck.path == d / "checkpoint.bin" and (d / "config.snapshot").is_file()
        rows = read_csv(d / "loss.csv")
        assert tuple(rows[0]) == headers[s] and len(rows) > 1
        assert set(ck.weights) == keys[s]
        assert all(math.isfinite(float(v)) for r in rows[1:] for v in r if v != "")


def test_frozen_sets_recorded_and_unchanged(tiny_run):
    _, cks = tiny_run
    meta = cks["D"].meta
    assert meta["frozen"] == meta["frozen_after"]
    assert meta["frozen"]["enhancement_branch"] == cks["C"].checksum
    assert cks["B"].meta["frozen"] == cks["B"].meta["frozen_after"]
    assert cks["A"].meta["frozen"]["perceptual"] == cks["A"].meta["frozen_after"]["perceptual"]


def test_zero_epochs_returns_initial_weights(tmp_path, tiny_run):
    cfg, _ = tiny_run
    cfg = with_plan(cfg, "D", epochs=0)
    ck = train_detection_branch(cfg, out_dir=tmp_path / "d0")
    torch.manual_seed(cfg.stage_seed("D"))
    fresh = build_detector(cfg, len(class_names(cfg.data_dir, cfg.dataset.classes)))
    assert max_abs_diff(ck.weights["det"], fresh.state_dict()) == 0.0
    assert len(read_csv(tmp_path / "d0" / "loss.csv")) == 1


def test_rerun_is_deterministic(tmp_path, tiny_run):
    cfg, cks = tiny_run
    again = train_detection_branch(cfg, out_dir=tmp_path / "again")
    assert again.checksum == cks["D"].checksum
    ref = cfg.run_dir / STAGE_NAMES["D"] / "loss.csv"
    assert (tmp_path / "again" / "loss.csv").read_text() == ref.read_text()


def test_other_seed_changes_weights(tmp_path, tiny_run):
    cfg, cks = tiny_run
    other = train_detection_branch(cfg.replace(seed=cfg.seed + 1), out_dir=tmp_path / "s1")
    assert other.checksum != cks["D"].checksum


def test_resume_reproduces_full_run(tmp_path, tiny_run):
    cfg, _ = tiny_run
    cfg = with_plan(cfg, "D", epochs=3)
    full = train_detection_branch(cfg, out_dir=tmp_path / "full")
    assert train_detection_branch(cfg, out_dir=tmp_path / "part", stop_after=1) is None
    assert not (tmp_path / "part" / "checkpoint.bin").exists()
    resumed = train_detection_branch(cfg, out_dir=tmp_path / "part", resume=True)
    assert resumed.checksum == full.checksum
    assert (tmp_path / "part" / "loss.csv").read_text() == (tmp_path / "full" / "loss.csv").read_text()


def test_resume_for_stage_with_two_optimisers(tmp_path, tiny_data):
    cfg = tiny_config(tmp_path, tiny_data, epochs=(2, 1, 1, 1))
    full = run_stage(cfg, "A", out_dir=tmp_path / "full")
    run_stage(cfg, "A", out_dir=tmp_path / "part", stop_after=1)
    assert run_stage(cfg, "A", out_dir=tmp_path / "part", resume=True).checksum == full.checksum


def test_zero_guidance_weight_matches_plain_loop(tmp_path, tiny_run):
    cfg, _ = tiny_run
    cfg = cfg.replace(total_loss=dataclasses.replace(cfg.total_loss, eta2=0.0))
    guided = train_detection_branch(cfg, out_dir=tmp_path / "g", guidance=True)
    plain = train_detection_branch(cfg, out_dir=tmp_path / "p", guidance=False)
    assert guided.checksum == plain.checksum
    assert max_abs_diff(guided.weights["det"], plain.weights["det"]) == 0.0


def test_non_finite_loss_aborts_with_recovery_point(tmp_path, tiny_run, monkeypatch):
    import bgdet.trainer as tr

    cfg, _ = tiny_run
    real = tr.detection_loss

    def poisoned(*a, **k):
        loss, parts = real(*a, **k)
        return loss * float("nan"), parts

    monkeypatch.setattr(tr, "detection_loss", poisoned)
    with pytest.raises(TrainingDiverged) as info:
        train_detection_branch(cfg, out_dir=tmp_path / "nan")
    assert info.value.checkpoint_path == tmp_path / "nan" / "last.bin"
    assert load_checkpoint(tmp_path / "nan" / "last.bin").meta["step"] == 0


def test_stage_inputs_override_paths(tmp_path, tiny_run):
    cfg, cks = tiny_run
    moved = tmp_path / "elsewhere.bin"
    moved.write_bytes(cks["C"].path.read_bytes())
    cfg = with_plan(cfg, "D", inputs={"C": str(moved)})
    ck = train_detection_branch(cfg.replace(output_dir=str(tmp_path / "other")))
    assert ck.meta["inputs"]["C"] == cks["C"].checksum
    with pytest.raises(PrerequisiteError):
        train_detection_branch(with_plan(cfg, "D", inputs={"C": str(tmp_path / "gone.bin")}),
                               out_dir=tmp_path / "x")
