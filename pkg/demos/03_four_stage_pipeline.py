"""Train all four stages on a toy dataset and compare the three inference modes.

This uses one epoch per stage on 32 images, so the numbers are noise; the
point is the data flow.  For the desk-scale run use the CLI with the
default config (about ten minutes per seed on one core).

Run:  python demos/03_four_stage_pipeline.py [work_dir]
"""

import dataclasses
import sys
from pathlib import Path

import torch

from bgdet.checkpoint import load_checkpoint
from bgdet.config import RunConfig, StagePlans
from bgdet.datagen import DatasetSpec, generate_dataset
from bgdet.experiments import evaluate
from bgdet.trainer import run_stage

torch.set_num_threads(1)
work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/pipeline")

base = RunConfig()
plans = StagePlans(**{s: dataclasses.replace(base.stages[s], epochs=1, batch_size=8 if s != "A" else 4)
                      for s in "ABCD"})
cfg = base.replace(run_id="toy", output_dir=str(work / "runs"), data_dir=str(work / "data"),
                   dataset=DatasetSpec(n_train=32, n_test=16), stages=plans)

generate_dataset(cfg.dataset, cfg.degradation, cfg.data_dir, cfg.clear_degradation)

# A: unpaired enhancer.  B: detector on enhanced images.  C: both tuned for
# detection.  D: a fresh detector on raw images, pulled toward C's features.
for stage in "ABCD":
    ck = run_stage(cfg, stage)
    print(f"stage {stage}: {ck.path.relative_to(work)}  checksum {ck.checksum[:12]}")

meta = load_checkpoint(cfg.run_dir / "D_guided_detection" / "checkpoint.bin").meta
print("enhancement branch frozen through D:", meta["frozen"] == meta["frozen_after"])

print(f"\n{'mode':<12} {'mAP50':>7} {'mAP50:95':>9} {'fps':>7} {'enhancer calls':>15}")
for mode in ("detect_only", "separate", "cascaded"):
    r = evaluate(cfg, mode, out_dir=work / "eval" / mode)
    print(f"{mode:<12} {r.map50:7.3f} {r.map5095:9.3f} {r.fps:7.0f} {r.provenance['enhancer_calls']:>15}")
