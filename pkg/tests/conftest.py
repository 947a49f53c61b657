import dataclasses

import pytest
import torch

from bgdet.config import RunConfig, StagePlans
from bgdet.datagen import DatasetSpec, generate_dataset

torch.set_num_threads(1)


def tiny_config(root, data_dir, epochs=(1, 1, 1, 1), **changes) -> RunConfig:
    """Small but complete run config for fast end-to-end checks."""
    base = RunConfig()
    plans = base.stages
    stages = StagePlans(
        A=dataclasses.replace(plans.A, epochs=epochs[0], batch_size=4),
        B=dataclasses.replace(plans.B, epochs=epochs[1], batch_size=8),
        C=dataclasses.replace(plans.C, epochs=epochs[2], batch_size=8),
        D=dataclasses.replace(plans.D, epochs=epochs[3], batch_size=8),
    )
    cfg = base.replace(run_id="tiny", output_dir=str(root), data_dir=str(data_dir),
                       dataset=DatasetSpec(n_train=16, n_test=8, image_size=(64, 64)),
                       stages=stages)
    return cfg.replace(**changes) if changes else cfg


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    cfg = RunConfig()
    generate_dataset(DatasetSpec(n_train=16, n_test=8, image_size=(64, 64)), cfg.degradation,
                     root, cfg.clear_degradation)
    return root


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, tiny_data):
    """Stages A-D trained once on the tiny dataset; shared by read-only tests."""
    from bgdet.trainer import run_stage

    cfg = tiny_config(tmp_path_factory.mktemp("tiny_run"), tiny_data)
    cks = {s: run_stage(cfg, s) for s in "ABCD"}
    return cfg, cks


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
