#!/usr/bin/env python3
"""Render a grid of Grad-CAM overlays for every test subject of a finished run.

Points at a dataset directory and a pipeline output directory (as produced by
`hybridens run`) and writes one overlay per test subject using the model the
run chose for explanation.

Usage:
    python scripts/explain_gallery.py --data /tmp/run/data --run /tmp/run/out
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from hybridens.config import RunConfig
from hybridens.data import load_image_dir, split_dataset
from hybridens.gradcam import explain, render_overlay
from hybridens.imageio import write_ppm
from hybridens.microcnn import load_checkpoint
from hybridens.pipeline import SPLIT_RATIOS


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data", required=True)
    parser.add_argument("--run", required=True, help="pipeline output directory")
    parser.add_argument("--out", default=None, help="default: <run>/gallery")
    args = parser.parse_args()

    run_dir = Path(args.run)
    report = json.loads((run_dir / "report.json").read_text())
    config = RunConfig.from_dict(report["config"])
    model = report["files"]["explained_model"]
    net = load_checkpoint(run_dir / "checkpoints" / f"{model}.ckpt")

    samples = load_image_dir(args.data, config.input_side)
    split = split_dataset(samples, SPLIT_RATIOS, config.seed)
    out = Path(args.out) if args.out else run_dir / "gallery"
    out.mkdir(parents=True, exist_ok=True)

    seen = set()
    for i in split.test_ids:
        sample = samples[i]
        if sample.subject_id in seen:
            continue
        seen.add(sample.subject_id)
        cam = explain(net, sample.payload, class_id=sample.label)
        stem = sample.sample_id.replace("/", "-")
        write_ppm(out / f"{stem}.ppm", render_overlay(cam, sample.payload))
    print(f"wrote {len(seen)} overlays from model {model} to {out}")


if __name__ == "__main__":
    main()
