"""End-to-end orchestration: train bases, fuse, evaluate, explain.

Stages run in a fixed order and write their artifacts as soon as they
complete, so a failing stage leaves everything before it on disk.  The
whole run is a pure function of (config, data directory): random streams
are derived from the run seed per stage and architecture.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gradcam, metrics, microcnn, stacking, weighting
from .config import RunConfig
from .data import (
    DatasetSplit,
    LabeledSample,
    assign_folds,
    load_image_dir,
    load_predictions_csv,
    save_predictions_csv,
    split_dataset,
)
from .errors import ConfigError, DataError, NumericError
from .imageio import write_pgm, write_ppm
from .seeding import rng_for

SPLIT_RATIOS = (0.6, 0.2, 0.2)
FUSED_MODELS = ("weighted", "stacked", "hybrid")


@dataclass
class RunReport:
    seed: int
    task: str
    config: dict
    counts: dict
    rows: list[dict]
    alpha: list[float]
    meta: dict
    files: dict

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "task": self.task,
            "config": self.config,
            "counts": self.counts,
            "rows": self.rows,
            "alpha": self.alpha,
            "meta": self.meta,
            "files": self.files,
        }


@contextmanager
def _stage(name: str):
    try:
        yield
    except (ConfigError, DataError, NumericError) as exc:
        raise type(exc)(f"stage {name}: {exc}") from exc
    except Exception as exc:
        raise RuntimeError(f"stage {name}: {exc}") from exc


def _json_value(x: float) -> float | None:
    return None if (isinstance(x, float) and math.isnan(x)) else float(x)


def score_rows(
    model_scores: dict[str, np.ndarray],
    labels: np.ndarray,
    tau: float,
    subjects: list[str] | None = None,
    eval_level: str = "slice",
) -> list[dict]:
    """ACC/SEN/SPE/AUC rows, optionally after subject-mean aggregation."""
    rows = []
    for name, scores in model_scores.items():
        y, s = labels, np.asarray(scores, dtype=np.float64)
        if eval_level == "subject_mean":
            if subjects is None:
                raise ValueError("subject_mean evaluation needs subject ids")
            order = sorted(set(subjects))
            grouped = {sub: [] for sub in order}
            lab = {}
            for sub, score, label in zip(subjects, s, labels):
                grouped[sub].append(score)
                lab[sub] = label
            s = np.array([np.mean(grouped[sub]) for sub in order])
            y = np.array([lab[sub] for sub in order], dtype=np.int64)
        hard = np.array([metrics.threshold(p, tau) for p in s])
        acc, sen, spe = metrics.acc_sen_spe(metrics.confusion(y, hard))
        area = metrics.auc(metrics.roc_curve(y, s))
        rows.append(
            {
                "model": name,
                "acc": _json_value(acc),
                "sen": _json_value(sen),
                "spe": _json_value(spe),
                "auc": _json_value(area),
            }
        )
    return rows


def render_table(rows: list[dict]) -> str:
    """Plain-text table with the ACC/SEN/SPE/AUC columns of the run report."""
    lines = [f"{'Model':<14}{'ACC (%)':>10}{'SEN (%)':>10}{'SPE (%)':>10}{'AUC':>8}"]
    for row in rows:
        cells = []
        for key, width, scale, digits in (
            ("acc", 10, 100.0, 2),
            ("sen", 10, 100.0, 2),
            ("spe", 10, 100.0, 2),
            ("auc", 8, 1.0, 3),
        ):
            v = row[key]
            cells.append(f"{'--':>{width}}" if v is None else f"{v * scale:>{width}.{digits}f}")
        lines.append(f"{row['model']:<14}" + "".join(cells))
    return "\n".join(lines) + "\n"


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n")


def _write_roc(path: Path, labels: np.ndarray, scores: np.ndarray) -> None:
    path.write_text(metrics.roc_points_csv(metrics.roc_curve(labels, scores)))


def train_bases(
    config: RunConfig,
    samples: list[LabeledSample],
    split: DatasetSplit,
    out_dir: Path,
) -> tuple[dict[str, microcnn.MicroNet], np.ndarray, np.ndarray, list[list[dict]]]:
    """Two-phase-train the K base nets; return them with val/test predictions."""
    train = [samples[i] for i in split.train_ids]
    val = [samples[i] for i in split.val_ids]
    test = [samples[i] for i in split.test_ids]
    arch_ids = microcnn.architecture_ids(config.K)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    nets: dict[str, microcnn.MicroNet] = {}
    val_preds = np.zeros((len(val), config.K))
    test_preds = np.zeros((len(test), config.K))
    histories = []
    for k, arch in enumerate(arch_ids):
        net = microcnn.build_micronet(
            arch, config.input_side, config.dropout_rate, rng_for(config.seed, "init", arch)
        )
        net, history = microcnn.train_two_phase(
            net, train, val, config, rng_for(config.seed, "train", arch)
        )
        microcnn.save_checkpoint(net, ckpt_dir / f"{arch}.ckpt")
        _write_json(ckpt_dir / f"{arch}_history.json", {"architecture_id": arch, "epochs": history})
        nets[arch] = net
        val_preds[:, k] = microcnn.predict_proba(net, val, config.batch_size)
        test_preds[:, k] = microcnn.predict_proba(net, test, config.batch_size)
        histories.append(history)
    return nets, val_preds, test_preds, histories


def _oof_factories(config: RunConfig, val: list[LabeledSample]) -> list:
    """Per-architecture factories for out-of-fold training, seeded per (arch, fold)."""

    class _CnnLearner:
        def __init__(self, arch: str, fold: int):
            self.arch = arch
            self.fold = fold
            self.net = None

        def fit(self, fit_samples: list[LabeledSample]) -> None:
            net = microcnn.build_micronet(
                self.arch,
                config.input_side,
                config.dropout_rate,
                rng_for(config.seed, "oof-init", self.arch, self.fold),
            )
            self.net, _ = microcnn.train_two_phase(
                net, fit_samples, val, config,
                rng_for(config.seed, "oof-train", self.arch, self.fold),
            )

        def predict(self, query: list[LabeledSample]) -> np.ndarray:
            return microcnn.predict_proba(self.net, query, config.batch_size)

    def make(arch: str):
        return lambda fold: _CnnLearner(arch, fold)

    return [make(arch) for arch in microcnn.architecture_ids(config.K)]


def _save_oof(path: Path, oof: stacking.OofTable, samples: list[LabeledSample]) -> None:
    k = oof.matrix.shape[1]
    lines = ["id,fold," + ",".join(f"p{i}" for i in range(1, k + 1)) + ",label"]
    for row, sample_id in enumerate(oof.train_ids):
        cells = [samples[sample_id].sample_id, str(int(oof.fold_of[row]))]
        cells += [repr(float(v)) for v in oof.matrix[row]]
        cells.append(str(int(oof.labels[row])))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")


def _fused_scores(
    preds: np.ndarray, alpha: np.ndarray, meta: stacking.MetaLearner, rule: str = "mean"
) -> dict[str, np.ndarray]:
    return {
        "weighted": preds @ alpha,
        "stacked": np.asarray(stacking.meta_predict(meta, preds)),
        "hybrid": np.asarray(stacking.hybrid_predict(alpha, meta, preds, rule)),
    }


def _pick_explained(
    test: list[LabeledSample], scores: np.ndarray, tau: float
) -> dict[int, LabeledSample]:
    """First correctly classified test sample per class, else first of the class."""
    chosen: dict[int, LabeledSample] = {}
    for label in (0, 1):
        members = [(s, p) for s, p in zip(test, scores) if s.label == label]
        if not members:
            continue
        correct = [s for s, p in members if metrics.threshold(p, tau) == label]
        chosen[label] = correct[0] if correct else members[0][0]
    return chosen


def write_explanations(
    net: microcnn.MicroNet,
    chosen: dict[int, LabeledSample],
    out_dir: Path,
) -> list[str]:
    ex_dir = out_dir / "explanations"
    ex_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for label, sample in sorted(chosen.items()):
        cam = gradcam.explain(net, sample.payload, class_id=label)
        stem = f"class{label}_{sample.sample_id.replace('/', '-')}"
        write_ppm(ex_dir / f"{stem}_overlay.ppm", gradcam.render_overlay(cam, sample.payload))
        write_pgm(ex_dir / f"{stem}_cam.pgm", gradcam.normalize_cam(cam.map))
        _write_json(
            ex_dir / f"{stem}.json",
            {
                "class_id": cam.class_id,
                "source_layer": cam.source_layer,
                "model": net.architecture_id,
                "sample": sample.sample_id,
            },
        )
        written += [
            f"explanations/{stem}_overlay.ppm",
            f"explanations/{stem}_cam.pgm",
            f"explanations/{stem}.json",
        ]
    return written


def run_pipeline(
    config: RunConfig,
    data_dir: str | Path,
    out_dir: str | Path,
    roc_from_folds: bool = False,
    explain_model: str | None = None,
) -> RunReport:
    """Execute the full training/fusion/evaluation/explanation pipeline."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with _stage("ingest"):
        samples = load_image_dir(data_dir, config.input_side)
    with _stage("split"):
        split = split_dataset(samples, SPLIT_RATIOS, config.seed)
    train = [samples[i] for i in split.train_ids]
    val = [samples[i] for i in split.val_ids]
    test = [samples[i] for i in split.test_ids]
    val_labels = np.array([s.label for s in val], dtype=np.int64)
    test_labels = np.array([s.label for s in test], dtype=np.int64)

    with _stage("train-base"):
        nets, val_preds, test_preds, _ = train_bases(config, samples, split, out)
        arch_ids = list(nets)
        save_predictions_csv(
            out / "preds_val.csv", val_preds, val_labels, [s.sample_id for s in val]
        )
        save_predictions_csv(
            out / "preds_test.csv", test_preds, test_labels, [s.sample_id for s in test]
        )

    with _stage("weights"):
        fit = weighting.optimize_weights(
            val_preds, val_labels, config.weight_steps, config.weight_step_size
        )
        _write_json(out / "weights.json", fit.to_dict())

    with _stage("oof"):
        folds = assign_folds(samples, split.train_ids, config.folds, config.seed)
        oof = stacking.oof_predictions(
            samples, split.train_ids, folds, _oof_factories(config, val)
        )
        _save_oof(out / "oof.csv", oof, samples)

    with _stage("meta"):
        meta = stacking.train_meta(
            oof.matrix, oof.labels, config.meta_epochs, config.meta_lr, config.meta_l2
        )
        _write_json(out / "meta.json", meta.to_dict())

    with _stage("evaluate"):
        model_scores = {arch: test_preds[:, k] for k, arch in enumerate(arch_ids)}
        model_scores.update(_fused_scores(test_preds, fit.alpha, meta, config.fusion_combine_rule))
        rows = score_rows(
            model_scores,
            test_labels,
            config.threshold,
            subjects=[s.subject_id for s in test],
            eval_level=config.eval_level,
        )
        roc_files = {}
        if roc_from_folds:
            oof_scores = {arch: oof.matrix[:, k] for k, arch in enumerate(arch_ids)}
            oof_scores.update(_fused_scores(oof.matrix, fit.alpha, meta, config.fusion_combine_rule))
            for name, scores in oof_scores.items():
                _write_roc(out / f"roc_{name}.csv", oof.labels, scores)
                roc_files[name] = f"roc_{name}.csv"
        else:
            for name, scores in model_scores.items():
                _write_roc(out / f"roc_{name}.csv", test_labels, scores)
                roc_files[name] = f"roc_{name}.csv"

    with _stage("explain"):
        if explain_model is None:
            val_aucs = {
                arch: metrics.auc(metrics.roc_curve(val_labels, val_preds[:, k]))
                for k, arch in enumerate(arch_ids)
            }
            explain_model = max(arch_ids, key=lambda a: val_aucs[a])
        elif explain_model not in nets:
            raise ConfigError(f"unknown explain model {explain_model!r} (have {arch_ids})")
        combined = model_scores["hybrid"]
        chosen = _pick_explained(test, combined, config.threshold)
        explanation_files = write_explanations(nets[explain_model], chosen, out)

    with _stage("report"):
        report = RunReport(
            seed=config.seed,
            task=config.task_name,
            config=config.to_dict(),
            counts={"train": len(train), "val": len(val), "test": len(test)},
            rows=rows,
            alpha=[float(a) for a in fit.alpha],
            meta=meta.to_dict(),
            files={
                "weights": "weights.json",
                "meta": "meta.json",
                "oof": "oof.csv",
                "preds_val": "preds_val.csv",
                "preds_test": "preds_test.csv",
                "roc": roc_files,
                "checkpoints": {arch: f"checkpoints/{arch}.ckpt" for arch in arch_ids},
                "explanations": explanation_files,
                "explained_model": explain_model,
            },
        )
        _write_json(out / "report.json", report.to_dict())
        (out / "report.txt").write_text(render_table(rows))
    return report


def fuse_only(
    preds_csv: str | Path,
    config: RunConfig,
    out_dir: str | Path | None = None,
    holdin_fraction: float = 0.5,
) -> RunReport:
    """Learn fusion from a held-in split of an external prediction table.

    Rows are split per class with the run seed; weights and meta-learner are
    fit on the held-in rows and every model is scored on the remainder.
    """
    matrix, labels, _ids = load_predictions_csv(preds_csv)
    if matrix.shape[1] != config.K:
        raise ConfigError(f"config K={config.K} but CSV has {matrix.shape[1]} columns")
    if not 0.0 < holdin_fraction < 1.0:
        raise ConfigError(f"holdin fraction must be in (0, 1), got {holdin_fraction}")
    rng = rng_for(config.seed, "fuse-split")
    fit_rows: list[int] = []
    eval_rows: list[int] = []
    for label in (0, 1):
        members = np.flatnonzero(labels == label)
        rng.shuffle(members)
        cut = int(round(len(members) * holdin_fraction))
        fit_rows.extend(members[:cut])
        eval_rows.extend(members[cut:])
    fit_rows.sort()
    eval_rows.sort()
    if not fit_rows or not eval_rows:
        raise DataError("held-in split left an empty side; need more rows")

    fit = weighting.optimize_weights(
        matrix[fit_rows], labels[fit_rows], config.weight_steps, config.weight_step_size
    )
    meta = stacking.train_meta(
        matrix[fit_rows], labels[fit_rows], config.meta_epochs, config.meta_lr, config.meta_l2
    )
    eval_matrix, eval_labels = matrix[eval_rows], labels[eval_rows]
    model_scores = {f"p{k + 1}": eval_matrix[:, k] for k in range(matrix.shape[1])}
    model_scores.update(_fused_scores(eval_matrix, fit.alpha, meta, config.fusion_combine_rule))
    rows = score_rows(model_scores, eval_labels, config.threshold)
    report = RunReport(
        seed=config.seed,
        task=config.task_name,
        config=config.to_dict(),
        counts={"fit": len(fit_rows), "eval": len(eval_rows)},
        rows=rows,
        alpha=[float(a) for a in fit.alpha],
        meta=meta.to_dict(),
        files={},
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "weights.json", fit.to_dict())
        _write_json(out / "meta.json", meta.to_dict())
        report.files = {"weights": "weights.json", "meta": "meta.json", "roc": {}}
        for name, scores in model_scores.items():
            _write_roc(out / f"roc_{name}.csv", eval_labels, scores)
            report.files["roc"][name] = f"roc_{name}.csv"
        _write_json(out / "report.json", report.to_dict())
        (out / "report.txt").write_text(render_table(rows))
    return report
