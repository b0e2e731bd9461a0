"""Tuning harness: baseline vs adapted pipeline across seeds (not shipped)."""

import json
import sys
import tempfile
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from adaseg.config import RunConfig, config_from_dict, config_to_dict
from adaseg.datasets import synth_generate
from adaseg.orchestrator import alternate_train, train_source_baseline


def run_seed(cfg: RunConfig, seed: int, out_root: Path):
    cfg.orchestrator.seed = seed
    t0 = time.time()
    ds = synth_generate(cfg.dataset.to_synth_config())
    base = train_source_baseline(cfg, ds)
    t_base = time.time() - t0
    t0 = time.time()
    art = alternate_train(cfg, out_root / f"seed{seed}", dataset=ds)
    t_run = time.time() - t0
    evals = art.history_by_phase("eval")
    rec = {
        "seed": seed,
        "baseline_miou": base["miou"],
        "miou": {r["k"]: r["miou"] for r in evals},
        "gap": {r["k"]: r["gap"]["d_hat"] for r in evals},
        "coverage": {r["k"]: r["pseudo_coverage"] for r in evals},
        "t_base": round(t_base, 1),
        "t_run": round(t_run, 1),
    }
    final_k = max(rec["miou"])
    rec["gain"] = rec["miou"][final_k] - base["miou"]
    rec["gap_drop"] = (rec["gap"][0] or 0) - (rec["gap"][final_k] or 0)
    rec["cov_growth"] = (rec["coverage"][final_k] or 0) - (rec["coverage"].get(1) or 0)
    return rec


def main():
    overrides = json.loads(sys.argv[1]) if len(sys.argv) > 1 else {}
    seeds = json.loads(sys.argv[2]) if len(sys.argv) > 2 else [0]
    doc = config_to_dict(RunConfig())
    for dotted, value in overrides.items():
        section, key = dotted.split(".")
        doc[section][key] = value
    cfg = config_from_dict(doc)
    results = []
    with tempfile.TemporaryDirectory() as tmp:
        for seed in seeds:
            rec = run_seed(cfg, seed, Path(tmp))
            results.append(rec)
            print(json.dumps(rec), flush=True)
    gains = [r["gain"] for r in results]
    print(f"# gains: {[round(g * 100, 1) for g in gains]}  "
          f"pass(>=5pt): {sum(g >= 0.05 for g in gains)}/{len(gains)}  "
          f"gap_drop>0: {sum(r['gap_drop'] > 0 for r in results)}/{len(results)}  "
          f"cov_growth>=0: {sum(r['cov_growth'] >= 0 for r in results)}/{len(results)}")


if __name__ == "__main__":
    main()
