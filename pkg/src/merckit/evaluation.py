"""Evaluation: per-class metrics, label distributions, PCA, significance
testing, ablation orchestration, and zero-shot scoring of hosted models.

Metric functions are pure and deterministic; report and plot emitters write
JSON/CSV/PNG artifacts for a run directory.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.stats

from .behavior import BehaviorCache, MllmClient, MllmRequest, TransportError
from .corpus import CorpusManifest, EmotionLabelSet, history_window
from .prompting import BehaviorFlags, StructuredTemplate, build_merc_prompt
from .tuning import Prediction


class DegenerateInputError(ValueError):
    """Raised when a statistic is undefined for the given data."""


@dataclass(frozen=True)
class ClassMetrics:
    accuracy: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    per_class: dict[str, ClassMetrics]
    overall_accuracy: float
    weighted_f1: float
    n_examples: int
    config_id: str
    n_invalid: int = 0

    def to_dict(self) -> dict:
        return {
            "config_id": self.config_id,
            "n_examples": self.n_examples,
            "n_invalid": self.n_invalid,
            "overall_accuracy": self.overall_accuracy,
            "weighted_f1": self.weighted_f1,
            "per_class": {
                label: {"accuracy": m.accuracy, "f1": m.f1, "support": m.support}
                for label, m in self.per_class.items()
            },
        }


def per_class_metrics(
    gold: Sequence[str],
    pred: Sequence[str],
    label_set: EmotionLabelSet,
    config_id: str = "default",
) -> MetricsReport:
    """Confusion-matrix metrics: per-class accuracy is class recall, per-class
    F1 is the precision/recall harmonic mean, weighted F1 is support-weighted.

    Zero-support classes report support 0 and F1 0.
    """
    if len(gold) != len(pred):
        raise ValueError(f"gold has {len(gold)} labels but pred has {len(pred)}")
    if len(gold) == 0:
        raise ValueError("need at least one (gold, pred) pair")
    for seq, name in ((gold, "gold"), (pred, "pred")):
        for label in seq:
            if label not in label_set:
                raise ValueError(f"{name} label {label!r} is outside the label set")
    k = label_set.k
    gold_idx = np.array([label_set.index_of(g) for g in gold])
    pred_idx = np.array([label_set.index_of(p) for p in pred])
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (gold_idx, pred_idx), 1)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    correct = np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(support > 0, correct / np.maximum(support, 1), 0.0)
        precision = np.where(predicted > 0, correct / np.maximum(predicted, 1), 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2 * precision * recall / np.where(pr > 0, pr, 1), 0.0)
    n = len(gold)
    per_class = {
        label: ClassMetrics(
            accuracy=float(recall[i]), f1=float(f1[i]), support=int(support[i])
        )
        for i, label in enumerate(label_set.labels)
    }
    return MetricsReport(
        per_class=per_class,
        overall_accuracy=float(correct.sum() / n),
        weighted_f1=float((support / n * f1).sum()),
        n_examples=n,
        config_id=config_id,
    )


@dataclass(frozen=True)
class LabelDistribution:
    counts: dict[str, int]
    source: str

    def __post_init__(self) -> None:
        if self.source not in ("gold", "predicted"):
            raise ValueError("source must be 'gold' or 'predicted'")

    @property
    def n_examples(self) -> int:
        return sum(self.counts.values())


def label_distribution(
    labels: Iterable[str], label_set: EmotionLabelSet, source: str = "predicted"
) -> LabelDistribution:
    counts = {label: 0 for label in label_set.labels}
    for label in labels:
        if label not in counts:
            raise ValueError(f"label {label!r} is outside the label set")
        counts[label] += 1
    return LabelDistribution(counts=counts, source=source)


def distribution_delta(
    a: LabelDistribution, b: LabelDistribution
) -> dict[str, int]:
    """Per-class count difference a - b (e.g. baseline minus full pipeline)."""
    if set(a.counts) != set(b.counts):
        raise ValueError("distributions cover different label sets")
    return {label: a.counts[label] - b.counts[label] for label in a.counts}


def pca_project(embeddings, k: int = 2) -> tuple[np.ndarray, tuple[float, ...]]:
    """Mean-centered projection onto the top-k principal axes.

    Returns (projected [n x k], explained variance ratios for those k
    components). Sign convention: each axis's largest-magnitude loading is
    positive, so outputs are reproducible across runs.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("embeddings must be a matrix with n >= 2 rows")
    n, d = x.shape
    if k < 1 or k > d:
        raise ValueError(f"k must be in [1, {d}], got {k}")
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    variances = s**2 / (n - 1)
    total = variances.sum()
    if total == 0:
        raise ValueError("embeddings have zero variance")
    axes = vt[:k].copy()
    for i in range(k):
        j = int(np.argmax(np.abs(axes[i])))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    projected = centered @ axes.T
    ratios = tuple(float(v / total) for v in variances[:k])
    return projected, ratios


def paired_ttest(scores_a: Sequence[float], scores_b: Sequence[float]) -> dict[str, float]:
    """Standard paired t statistic with a two-sided p-value."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("score lists must be 1-D and of equal length")
    if a.size < 2:
        raise ValueError("need at least two paired scores")
    diff = a - b
    sd = float(diff.std(ddof=1))
    if sd == 0.0:
        if np.all(diff == 0):
            raise DegenerateInputError("identical runs")
        raise DegenerateInputError("differences have zero variance")
    n = diff.size
    t = float(diff.mean() / (sd / math.sqrt(n)))
    p = float(2 * scipy.stats.t.sf(abs(t), df=n - 1))
    return {"t": t, "p": p}


@dataclass(frozen=True)
class AblationConfig:
    config_id: str
    flags: BehaviorFlags
    run_stage_a: bool


def canonical_ablation_configs() -> tuple[AblationConfig, ...]:
    """The five standard rows: everything on, one behavior type each, none."""
    return (
        AblationConfig("full", BehaviorFlags(True, True, True), run_stage_a=True),
        AblationConfig("facial_only", BehaviorFlags(True, False, False), run_stage_a=True),
        AblationConfig("body_only", BehaviorFlags(False, True, False), run_stage_a=True),
        AblationConfig("posture_only", BehaviorFlags(False, False, True), run_stage_a=True),
        AblationConfig("none", BehaviorFlags.none(), run_stage_a=False),
    )


def run_ablation_suite(
    configs: Sequence[AblationConfig],
    pipeline: Callable[[AblationConfig], MetricsReport],
) -> dict[str, MetricsReport]:
    """Run train+eval once per config; the 'none' row is the no-behavior baseline."""
    ids = [c.config_id for c in configs]
    dupes = {i for i in ids if ids.count(i) > 1}
    if dupes:
        raise ValueError(f"duplicate ablation config ids: {sorted(dupes)}")
    table: dict[str, MetricsReport] = {}
    for config in configs:
        report = pipeline(config)
        table[config.config_id] = report
    return table


def parse_label_response(raw: str, label_set: EmotionLabelSet) -> str | None:
    """Free-generation parsing: exact match first, then case-insensitive
    containment; ambiguous or empty matches return None (invalid)."""
    text = raw.strip().lower()
    for label in label_set.labels:
        if text == label.lower():
            return label
    contained = [label for label in label_set.labels if label.lower() in text]
    if len(contained) == 1:
        return contained[0]
    return None


@dataclass
class ZeroShotResult:
    report: MetricsReport
    invalid: list[tuple[str, str]] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)
    n_queried: int = 0


def zero_shot_eval(
    client: MllmClient,
    corpus: CorpusManifest,
    template: StructuredTemplate,
    with_behavior: bool,
    *,
    label_set: EmotionLabelSet,
    cache: BehaviorCache | None = None,
    source_model: str | None = None,
    max_history_turns: int = 10,
    generation_params: dict | None = None,
    config_id: str | None = None,
) -> ZeroShotResult:
    """Query a hosted model per utterance and score its free-form answers.

    Unparseable answers land in the invalid bucket (reported, excluded from
    the per-class metrics); transport failures are recorded and the run
    continues.
    """
    if with_behavior and cache is None:
        raise ValueError("with_behavior requires a behavior cache")
    flags = BehaviorFlags() if with_behavior else BehaviorFlags.none()
    spec = template.placeholder_spec.with_counts(0, 0)
    gold: list[str] = []
    pred: list[str] = []
    result = ZeroShotResult(
        report=MetricsReport({}, 0.0, 0.0, 0, config_id or "zero_shot"),
    )
    for conv in corpus.conversations:
        for utt in conv.utterances:
            annotation = (
                cache.get(utt.id, source_model) if with_behavior and cache else None
            )
            history = history_window(conv, utt.index_in_conversation, max_history_turns)
            p = build_merc_prompt(
                template,
                utt,
                history,
                label_set,
                annotation,
                flags,
                placeholder_spec=spec,
            )
            refs = tuple(r for r in (utt.video_ref, utt.audio_ref) if r)
            request = MllmRequest(
                prompt_text=p.text,
                media_refs=refs,
                generation_params=generation_params or {},
            )
            result.n_queried += 1
            try:
                raw = client.complete(request)
            except TransportError as exc:
                result.failures.append((utt.id, str(exc)))
                continue
            parsed = parse_label_response(raw, label_set)
            if parsed is None:
                result.invalid.append((utt.id, raw))
                continue
            gold.append(utt.label)
            pred.append(parsed)
    if gold:
        result.report = per_class_metrics(
            gold, pred, label_set, config_id=config_id or "zero_shot"
        )
    result.report.n_invalid = len(result.invalid)
    return result


def write_report_json(report: MetricsReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))


def write_report_csv(report: MetricsReport, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "accuracy", "f1", "support"])
        for label, m in report.per_class.items():
            writer.writerow([label, f"{m.accuracy:.6f}", f"{m.f1:.6f}", m.support])
        writer.writerow([])
        writer.writerow(["overall_accuracy", f"{report.overall_accuracy:.6f}"])
        writer.writerow(["weighted_f1", f"{report.weighted_f1:.6f}"])
        writer.writerow(["n_examples", report.n_examples])
        writer.writerow(["n_invalid", report.n_invalid])


def write_ablation_csv(
    table: Mapping[str, MetricsReport], path: str | Path
) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config_id", "overall_accuracy", "weighted_f1", "n_examples"])
        for config_id, report in table.items():
            writer.writerow(
                [
                    config_id,
                    f"{report.overall_accuracy:.6f}",
                    f"{report.weighted_f1:.6f}",
                    report.n_examples,
                ]
            )


def write_predictions(
    predictions: Sequence[Prediction],
    gold: Mapping[str, str],
    out_dir: str | Path,
) -> tuple[Path, Path]:
    """Dump per-utterance predictions as JSONL plus an embedding archive."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    emb_path = out / "embeddings.npz"
    jsonl_path = out / "predictions.jsonl"
    arrays = {p.utterance_id: np.asarray(p.embedding) for p in predictions}
    np.savez(emb_path, **arrays)
    with jsonl_path.open("w") as fh:
        for p in predictions:
            fh.write(
                json.dumps(
                    {
                        "utterance_id": p.utterance_id,
                        "gold": gold.get(p.utterance_id),
                        "pred": p.predicted_label,
                        "distribution": list(p.label_distribution),
                        "embedding_ref": f"{emb_path.name}#{p.utterance_id}",
                    }
                )
                + "\n"
            )
    return jsonl_path, emb_path


def plot_label_distributions(
    distributions: Sequence[LabelDistribution], path: str | Path
) -> None:
    """Side-by-side bar chart of label counts per source."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = list(distributions[0].counts)
    x = np.arange(len(labels))
    width = 0.8 / max(len(distributions), 1)
    fig, ax = plt.subplots(figsize=(8, 4))
    for i, dist in enumerate(distributions):
        counts = [dist.counts[label] for label in labels]
        ax.bar(x + i * width, counts, width, label=dist.source)
    ax.set_xticks(x + width * (len(distributions) - 1) / 2)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_pca_scatter(
    projected: np.ndarray, gold: Sequence[str], path: str | Path
) -> None:
    """2-D scatter of projected embeddings colored by gold label."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    projected = np.asarray(projected)
    if projected.shape[1] < 2:
        raise ValueError("need at least 2 projected dimensions to plot")
    fig, ax = plt.subplots(figsize=(6, 5))
    for label in sorted(set(gold)):
        idx = [i for i, g in enumerate(gold) if g == label]
        ax.scatter(projected[idx, 0], projected[idx, 1], label=label, s=18)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
