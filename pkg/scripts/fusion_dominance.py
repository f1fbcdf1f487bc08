#!/usr/bin/env python3
"""Multi-seed fusion-dominance experiment on the synthetic blob dataset.

Generates a seeded dataset per run, executes the full pipeline, and compares
the hybrid ensemble against the best base learner on test accuracy and AUC.
This is the experiment behind the fusion-dominance acceptance gate; run it
directly to reproduce or to try other data/config settings.

Usage:
    python scripts/fusion_dominance.py --seeds 1 2 3 4 5 --workdir /tmp/dominance
"""

from __future__ import annotations

import argparse
import json
import shutil
import time
from pathlib import Path

import numpy as np

from hybridens.config import RunConfig
from hybridens.pipeline import run_pipeline
from hybridens.synth import SynthSpec, synth_data

DESK_CONFIG = dict(
    input_side=32, batch_size=24, dropout_rate=0.25, folds=5, freeze_epochs=10,
    finetune_epochs=15, head_learning_rate=1e-2, learning_rate=2e-3,
)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    parser.add_argument("--subjects-per-class", type=int, default=20)
    parser.add_argument("--slices-per-subject", type=int, default=4)
    parser.add_argument("--noise-sigma", type=float, default=0.04)
    parser.add_argument("--workdir", default="/tmp/hybridens-dominance")
    args = parser.parse_args()

    work = Path(args.workdir)
    rows = []
    started = time.time()
    for seed in args.seeds:
        run_dir = work / f"seed{seed}"
        shutil.rmtree(run_dir, ignore_errors=True)
        synth_data(
            SynthSpec(
                subjects_per_class=args.subjects_per_class,
                slices_per_subject=args.slices_per_subject,
                image_side=32,
                noise_sigma=args.noise_sigma,
                seed=seed,
            ),
            run_dir / "data",
        )
        config = RunConfig(seed=seed, **DESK_CONFIG)
        report = run_pipeline(config, run_dir / "data", run_dir / "out")
        acc = {r["model"]: r["acc"] for r in report.rows}
        auc = {r["model"]: r["auc"] for r in report.rows}
        bases = [m for m in acc if m not in ("weighted", "stacked", "hybrid")]
        rows.append(
            {
                "seed": seed,
                "max_base_acc": max(acc[m] for m in bases),
                "hybrid_acc": acc["hybrid"],
                "max_base_auc": max(auc[m] for m in bases),
                "hybrid_auc": auc["hybrid"],
            }
        )
        r = rows[-1]
        print(
            f"seed {seed}: hybrid acc {r['hybrid_acc']:.4f} vs best base "
            f"{r['max_base_acc']:.4f} | hybrid auc {r['hybrid_auc']:.4f} vs "
            f"best base {r['max_base_auc']:.4f}"
        )

    acc_margin = np.mean([r["hybrid_acc"] - r["max_base_acc"] for r in rows])
    auc_margin = np.mean([r["hybrid_auc"] - r["max_base_auc"] for r in rows])
    summary = {
        "seeds": args.seeds,
        "rows": rows,
        "mean_acc_margin": float(acc_margin),
        "mean_auc_margin": float(auc_margin),
        "elapsed_seconds": round(time.time() - started, 1),
    }
    (work / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(
        f"mean margins: acc {acc_margin:+.4f}, auc {auc_margin:+.4f} "
        f"({summary['elapsed_seconds']}s); summary at {work / 'summary.json'}"
    )


if __name__ == "__main__":
    main()
