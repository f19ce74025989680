import json
import logging
import time
from collections.abc import Sequence
from pathlib import Path
from typing import Protocol

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
from keboola.component.exceptions import UserException
from keboola.csvwriter import ElasticDictWriter
from pydantic import BaseModel, Field
from sklearn.metrics import roc_auc_score, roc_curve

from cohort import ForecastInstance
from configuration import WindowPolicy
from dataio import HYPOTENSION_THRESHOLD

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "predictor",
    "mse_ioh",
    "mae_ioh",
    "recall",
    "auc",
    "n_instances",
    "n_positives",
    "n_predicted_positives",
    "n_ioh_timestamps",
]
_PNG_METADATA = {"Software": None}


class ReportWriteError(UserException):
    pass


class Predictor(Protocol):
    def predict(self, instances: list[ForecastInstance]) -> np.ndarray: ...


class PersistenceBaseline:
    """Repeats the last observed history value over the whole horizon."""

    name = "persistence"

    def predict(self, instances: list[ForecastInstance]) -> np.ndarray:
        return np.array([np.full(len(i.target), i.history[-1]) for i in instances])


class OracleForecaster:
    name = "oracle"

    def predict(self, instances: list[ForecastInstance]) -> np.ndarray:
        return np.array([i.target for i in instances])


def pointwise_ioh_errors(
    pred: Sequence[float], target: Sequence[float], ioh_mask: Sequence[bool]
) -> tuple[np.ndarray, np.ndarray]:
    """Squared and absolute errors at hypotensive timestamps only."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    mask = np.asarray(ioh_mask, dtype=bool)
    if not pred.shape == target.shape == mask.shape:
        raise ValueError("pred, target and ioh_mask must have equal lengths")
    diff = pred[mask] - target[mask]
    return diff**2, np.abs(diff)


def predict_event(pred: Sequence[float], policy: WindowPolicy) -> tuple[bool, float]:
    """Scan every event-length window starting after the warning window.

    An event is predicted when some window has strictly more than 60% of values below 65 mmHg;
    the score is the largest below-threshold fraction seen.
    """
    pred = np.asarray(pred, dtype=np.float64)
    warning, event = policy.warning_samples, policy.event_samples
    if len(pred) < warning + event:
        raise ValueError(f"prediction of {len(pred)} samples is shorter than warning+event windows ({warning + event})")
    below = (pred[warning:] < HYPOTENSION_THRESHOLD).astype(np.int64)
    counts = np.convolve(below, np.ones(event, dtype=np.int64), mode="valid")
    # 5 * count > 3 * event is count / event > 0.6 without rounding
    decision = bool(np.any(5 * counts > 3 * event))
    return decision, float(counts.max() / event)


def recall(labels: Sequence[bool], decisions: Sequence[bool]) -> float | None:
    labels, decisions = np.asarray(labels, dtype=bool), np.asarray(decisions, dtype=bool)
    if labels.shape != decisions.shape:
        raise ValueError("labels and decisions must have equal lengths")
    positives = int(labels.sum())
    if positives == 0:
        return None
    return float((labels & decisions).sum() / positives)


def auc(labels: Sequence[bool], scores: Sequence[float]) -> float | None:
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        return None
    return float(roc_auc_score(labels, np.asarray(scores, dtype=np.float64)))


class InstanceRecord(BaseModel):
    instance_id: str
    patient_id: str
    label: bool
    decision: bool
    score: float
    n_ioh_timestamps: int
    squared_error_sum: float
    absolute_error_sum: float
    prediction: list[float]
    target: list[float]
    history: list[float]


class EvalSummary(BaseModel):
    predictor: str
    mse_ioh: float | None
    mae_ioh: float | None
    recall: float | None = Field(default=None, ge=0, le=1)
    auc: float | None = Field(default=None, ge=0, le=1)
    n_instances: int
    n_positives: int
    n_predicted_positives: int
    n_ioh_timestamps: int


class EvalReport(BaseModel):
    summary: EvalSummary
    records: list[InstanceRecord]


def evaluate_model(
    predictor: Predictor, instances: list[ForecastInstance], policy: WindowPolicy, name: str | None = None
) -> EvalReport:
    if not instances:
        raise ValueError("cannot evaluate on an empty test set")
    name = name or getattr(predictor, "name", type(predictor).__name__)
    predictions = np.asarray(predictor.predict(instances), dtype=np.float64)

    records = []
    squared, absolute = [], []
    for instance, pred in zip(instances, predictions):
        sq, ab = pointwise_ioh_errors(pred, instance.target, instance.ioh_mask)
        squared.append(sq)
        absolute.append(ab)
        decision, score = predict_event(pred, policy)
        records.append(
            InstanceRecord(
                instance_id=instance.instance_id,
                patient_id=instance.patient_id,
                label=instance.label,
                decision=decision,
                score=score,
                n_ioh_timestamps=len(sq),
                squared_error_sum=float(sq.sum()),
                absolute_error_sum=float(ab.sum()),
                prediction=pred.tolist(),
                target=instance.target.tolist(),
                history=instance.history.tolist(),
            )
        )

    all_sq, all_abs = np.concatenate(squared), np.concatenate(absolute)
    labels = [r.label for r in records]
    decisions = [r.decision for r in records]
    summary = EvalSummary(
        predictor=name,
        mse_ioh=float(all_sq.mean()) if len(all_sq) else None,
        mae_ioh=float(all_abs.mean()) if len(all_abs) else None,
        recall=recall(labels, decisions),
        auc=auc(labels, [r.score for r in records]),
        n_instances=len(records),
        n_positives=sum(labels),
        n_predicted_positives=sum(decisions),
        n_ioh_timestamps=len(all_sq),
    )
    logger.info(
        f"{name}: MSE_IOH={summary.mse_ioh}, MAE_IOH={summary.mae_ioh}, recall={summary.recall}, "
        f"AUC={summary.auc} over {summary.n_instances} instances ({summary.n_positives} positive)"
    )
    return EvalReport(summary=summary, records=records)


def _plot_overlays(report: EvalReport, path: Path, count: int) -> None:
    chosen = sorted(report.records, key=lambda r: (not r.label, r.instance_id))[:count]
    fig, axes = plt.subplots(max(len(chosen), 1), 1, figsize=(8, 2.4 * max(len(chosen), 1)), squeeze=False)
    for ax, record in zip(axes[:, 0], chosen):
        n_hist = len(record.history)
        horizon = range(n_hist, n_hist + len(record.target))
        ax.plot(range(n_hist), record.history, color="tab:gray", label="history")
        ax.plot(horizon, record.target, color="tab:blue", label="ground truth")
        ax.plot(horizon, record.prediction, color="tab:orange", linestyle="--", label="forecast")
        ax.axhline(HYPOTENSION_THRESHOLD, color="tab:red", linewidth=1.0, label="65 mmHg")
        ax.set_title(f"{record.instance_id} (label={int(record.label)}, score={record.score:.2f})", fontsize=9)
        ax.set_ylabel("MAP [mmHg]")
    axes[0, 0].legend(loc="upper right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_METADATA)
    plt.close(fig)


def _plot_roc(reports: list[EvalReport], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot([0, 1], [0, 1], color="lightgray", linestyle=":")
    for report in reports:
        labels = [r.label for r in report.records]
        if report.summary.auc is None:
            continue
        fpr, tpr, _ = roc_curve(labels, [r.score for r in report.records])
        ax.plot(fpr, tpr, label=f"{report.summary.predictor} (AUC {report.summary.auc:.3f})")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_METADATA)
    plt.close(fig)


def render_report(
    report: EvalReport, out_dir: str | Path, overlay_count: int = 6, baselines: Sequence[EvalReport] = ()
) -> list[Path]:
    """Write summary JSON, metric CSV, per-instance JSONL and the overlay and ROC figures."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        summary_path = out_dir / "summary.json"
        summary = {
            "model": report.summary.model_dump(mode="json"),
            "baselines": {b.summary.predictor: b.summary.model_dump(mode="json") for b in baselines},
        }
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")

        metrics_path = out_dir / "metrics.csv"
        writer = ElasticDictWriter(str(metrics_path), METRIC_COLUMNS)
        for item in [report, *baselines]:
            writer.writerow({k: ("" if v is None else v) for k, v in item.summary.model_dump().items()})
        writer.writeheader()
        writer.close()

        records_path = out_dir / "per_instance.jsonl"
        with records_path.open("w", encoding="utf-8") as fh:
            for record in report.records:
                fh.write(record.model_dump_json() + "\n")

        overlay_path = out_dir / "overlays.png"
        _plot_overlays(report, overlay_path, overlay_count)
        roc_path = out_dir / "roc.png"
        _plot_roc([report, *baselines], roc_path)
    except OSError as e:
        raise ReportWriteError(f"Cannot write report to {out_dir}: {e}") from e
    logger.info(f"Report written to {out_dir}")
    return [summary_path, metrics_path, records_path, overlay_path, roc_path]


class LatencyStats(BaseModel):
    samples_ms: list[float]
    median_ms: float
    p95_ms: float
    batch_size: int


def bench_inference(
    predictor: Predictor, instances: list[ForecastInstance], repetitions: int = 100, warmup: int = 5
) -> LatencyStats:
    """Wall-clock time per forecast, one sample per repetition after ``warmup`` untimed runs."""
    if not instances:
        raise ValueError("bench_inference needs at least one instance")
    for _ in range(warmup):
        predictor.predict(instances)
    samples = []
    for _ in range(repetitions):
        start = time.perf_counter()
        predictor.predict(instances)
        samples.append((time.perf_counter() - start) * 1000.0 / len(instances))
    return LatencyStats(
        samples_ms=samples,
        median_ms=float(np.median(samples)),
        p95_ms=float(np.percentile(samples, 95)),
        batch_size=len(instances),
    )
