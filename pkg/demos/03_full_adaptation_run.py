"""Walkthrough: the full alternating adaptation pipeline, scaled down.

Trains a source-only baseline, then runs the alternating loop (translate,
retrain with pseudo labels, adversarially align features), printing the
per-alternation target mIoU, the domain-gap estimate and the pseudo-label
coverage. With the reduced sizes here this takes a couple of minutes on a
laptop CPU; the shipped default config is the better-converged setup.

Run:  python demos/03_full_adaptation_run.py [out_dir]
"""

import sys
from pathlib import Path

from adaseg.config import RunConfig
from adaseg.datasets import synth_generate
from adaseg.orchestrator import alternate_train, train_source_baseline

out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out/run")

cfg = RunConfig()
cfg.dataset.num_source = 40
cfg.dataset.num_target = 40
cfg.dataset.num_target_eval = 24
cfg.networks.base_channels = 8
cfg.networks.ra2b_count = 4
cfg.td.epochs = 6
cfg.tf.epochs_step1 = 3
cfg.tf.epochs_step2 = 1
cfg.tf.epochs_step3 = 1
cfg.orchestrator.alternation_count = 2
cfg.orchestrator.seed = 0

dataset = synth_generate(cfg.dataset.to_synth_config())
baseline = train_source_baseline(cfg, dataset)
print(f"source-only baseline on target_eval: mIoU={baseline['miou']:.3f}")

artifacts = alternate_train(cfg, out_dir, dataset=dataset)
print("\nalternation history:")
for rec in artifacts.history_by_phase("eval"):
    gap = rec["gap"]["d_hat"]
    gap_text = "  n/a" if gap is None else f"{gap:.3f}"
    cov = rec["pseudo_coverage"]
    cov_text = "  n/a" if cov is None else f"{cov:.3f}"
    print(f"  k={rec['k']}  mIoU={rec['miou']:.3f}  gap={gap_text}  coverage={cov_text}")

final = artifacts.history_by_phase("eval")[-1]
print(f"\nadaptation gain over baseline: {(final['miou'] - baseline['miou']) * 100:+.1f} mIoU points")
print(f"report and plots: {artifacts.report_path}")
