"""Confusion matrices, per-class metrics, frozen features and embedding export."""

import csv
import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn import metrics as sk_metrics

from .augment import standardize
from .cache import cache_key, feature_cache
from .data import LabeledDataset
from .encoder import ClassifierHead, EncoderState, classifier_logits, encode_batch
from .exceptions import DataError, ShapeMismatchError
from .models import ClassSummary, FoldPlan, FoldSummary, MetricsReport
from .utils import chunked, format_float

logger = logging.getLogger(__name__)

FEATURE_CHUNK = 256

Standardization = Tuple[Sequence[float], Sequence[float]]
IDENTITY_STANDARDIZATION: Standardization = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


def confusion_matrix(
    predictions: Sequence[int], labels: Sequence[int], n_classes: int
) -> np.ndarray:
    """C x C counts; entry (t, p) counts samples of true class t predicted as p."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ShapeMismatchError("predictions", true.shape[0], pred.shape[0])
    for name, ids in (("prediction", pred), ("label", true)):
        bad = ids[(ids < 0) | (ids >= n_classes)]
        if bad.size:
            raise DataError(f"{name} id {int(bad[0])} outside [0, {n_classes})")
    if true.size == 0:
        return np.zeros((n_classes, n_classes), dtype=np.int64)
    return sk_metrics.confusion_matrix(true, pred, labels=list(range(n_classes))).astype(np.int64)


def f1_score(precision: Optional[float], recall: Optional[float]) -> Optional[float]:
    """Harmonic mean of precision and recall; undefined when either is."""
    if precision is None or recall is None:
        return None
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _defined(values: np.ndarray) -> List[Optional[float]]:
    return [None if np.isnan(v) else float(v) for v in values]


def _mean_defined(values: Sequence[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def per_class_metrics(
    confusion: np.ndarray, class_names: Optional[Sequence[str]] = None
) -> MetricsReport:
    """Precision, recall and F1 per class and their macro means.

    A metric whose denominator is zero is reported as None and left out of
    the macro mean. F1 is the harmonic mean of the class's precision and
    recall, so it is None whenever either of them is.
    """
    counts = np.asarray(confusion, dtype=np.int64)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or counts.shape[0] == 0:
        raise DataError(f"confusion matrix must be square and non-empty, got shape {counts.shape}")
    if np.any(counts < 0):
        raise DataError("confusion matrix has negative counts")
    n_classes = counts.shape[0]
    names = list(class_names) if class_names is not None else [str(i) for i in range(n_classes)]
    if len(names) != n_classes:
        raise ShapeMismatchError("class names", n_classes, len(names))

    total = int(counts.sum())
    if total == 0:
        precision: List[Optional[float]] = [None] * n_classes
        recall: List[Optional[float]] = [None] * n_classes
    else:
        classes = np.arange(n_classes)
        y_true = np.repeat(classes, counts.sum(axis=1))
        y_pred = np.concatenate([np.repeat(classes, row) for row in counts])
        by_class = sk_metrics.precision_recall_fscore_support(
            y_true, y_pred, labels=classes.tolist(), zero_division=np.nan
        )
        precision, recall = _defined(by_class[0]), _defined(by_class[1])
    f1 = [f1_score(p, r) for p, r in zip(precision, recall)]

    macro_precision = _mean_defined(precision)
    macro_recall = _mean_defined(recall)
    return MetricsReport(
        classes=names,
        confusion=counts.tolist(),
        precision=precision,
        recall=recall,
        f1=f1,
        support=counts.sum(axis=1).tolist(),
        macro_precision=macro_precision,
        macro_recall=macro_recall,
        macro_f1=_mean_defined(f1),
        f1_of_means=f1_score(macro_precision, macro_recall),
        accuracy=float(np.trace(counts)) / total if total else None,
    )


def dataset_features(
    encoder: EncoderState,
    dataset: LabeledDataset,
    standardization: Standardization = IDENTITY_STANDARDIZATION,
) -> np.ndarray:
    """Latent vectors of every sample, standardized only, served from the cache."""
    mean, std = standardization
    key = cache_key(encoder.fingerprint(), dataset.fingerprint(), list(mean), list(std))

    def compute() -> np.ndarray:
        if len(dataset) == 0:
            return np.zeros((0, encoder.d_emb))
        blocks = []
        for rows in chunked(range(len(dataset)), FEATURE_CHUNK):
            images = standardize(dataset.images[rows], mean, std)
            blocks.append(encode_batch(images, encoder))
        return np.concatenate(blocks)

    return feature_cache.get_or_compute(key, compute)


def fold_indices(
    dataset: LabeledDataset, fold_plan: Optional[FoldPlan], fold_index: int
) -> Tuple[List[int], List[int]]:
    """(train, validation) indices; without a plan both are the whole dataset."""
    if fold_plan is None:
        everything = list(range(len(dataset)))
        return everything, everything
    if len(fold_plan.assignments) != len(dataset):
        raise ShapeMismatchError("fold plan", len(dataset), len(fold_plan.assignments))
    try:
        return fold_plan.train_indices(fold_index), fold_plan.val_indices(fold_index)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def predict(
    encoder: EncoderState,
    head: ClassifierHead,
    dataset: LabeledDataset,
    indices: Optional[Sequence[int]] = None,
    standardization: Standardization = IDENTITY_STANDARDIZATION,
) -> np.ndarray:
    """Arg-max class ids of classify(encode(x)) for the selected samples."""
    features = dataset_features(encoder, dataset, standardization)
    if indices is not None:
        features = features[np.asarray(indices, dtype=np.int64)]
    return np.argmax(classifier_logits(features, head), axis=1)  # type: ignore[no-any-return]


def evaluate_model(
    encoder: EncoderState,
    head: ClassifierHead,
    dataset: LabeledDataset,
    fold_plan: Optional[FoldPlan] = None,
    fold_index: int = 0,
    standardization: Standardization = IDENTITY_STANDARDIZATION,
) -> MetricsReport:
    """Metrics of the encoder + classifier on the held-out fold."""
    if head.n_classes != dataset.n_classes:
        raise ShapeMismatchError("classifier classes", dataset.n_classes, head.n_classes)
    _, val = fold_indices(dataset, fold_plan, fold_index)
    if not val:
        raise DataError(f"evaluation fold {fold_index} is empty")
    predictions = predict(encoder, head, dataset, val, standardization)
    labels = dataset.labels[val]
    return per_class_metrics(
        confusion_matrix(predictions, labels, dataset.n_classes), dataset.class_names
    )


def export_embeddings(
    encoder: EncoderState,
    dataset: LabeledDataset,
    path: Union[str, Path],
    standardization: Standardization = IDENTITY_STANDARDIZATION,
) -> Path:
    """CSV of ``sample_id,label,z_1..z_d`` with round-trippable floats."""
    path = Path(path)
    features = dataset_features(encoder, dataset, standardization)
    header = ["sample_id", "label"] + [f"z_{j + 1}" for j in range(encoder.d_emb)]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for i, sample in enumerate(dataset.samples):
                label = "" if sample.label is None else dataset.class_names[sample.label]
                writer.writerow([i, label] + [format_float(v) for v in features[i]])
    except OSError as exc:
        raise DataError(f"Cannot write embeddings: {exc.strerror}", str(path)) from exc
    logger.info(f"Exported {len(dataset)} embeddings to {path}")
    return path


def write_report(report: MetricsReport, out_dir: Union[str, Path], stem: str = "metrics") -> Path:
    """Write ``<stem>.json`` and the aligned text table ``<stem>.txt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(
        json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out_dir / f"{stem}.txt").write_text(report.format_table() + "\n", encoding="utf-8")
    return json_path


def _mean_std(values: Sequence[Optional[float]]) -> Tuple[Optional[float], Optional[float]]:
    defined = [v for v in values if v is not None]
    if not defined:
        return None, None
    std = float(np.std(defined, ddof=1)) if len(defined) > 1 else None
    return float(np.mean(defined)), std


def summarize_folds(reports: Sequence[MetricsReport]) -> FoldSummary:
    """Per-class mean and sample std (ddof 1) of fold metrics, skipping undefined values."""
    if not reports:
        raise DataError("no fold reports to summarize")
    classes = reports[0].classes
    if any(r.classes != classes for r in reports):
        raise DataError("fold reports disagree on the class list")

    per_class = []
    for j, name in enumerate(classes):
        p_mean, p_std = _mean_std([r.precision[j] for r in reports])
        r_mean, r_std = _mean_std([r.recall[j] for r in reports])
        f_mean, f_std = _mean_std([r.f1[j] for r in reports])
        per_class.append(
            ClassSummary(
                name=name,
                precision_mean=p_mean,
                precision_std=p_std,
                recall_mean=r_mean,
                recall_std=r_std,
                f1_mean=f_mean,
                f1_std=f_std,
            )
        )
    macro_f1_mean, macro_f1_std = _mean_std([r.macro_f1 for r in reports])
    return FoldSummary(
        n_folds=len(reports),
        per_class=per_class,
        macro_precision_mean=_mean_std([r.macro_precision for r in reports])[0],
        macro_recall_mean=_mean_std([r.macro_recall for r in reports])[0],
        macro_f1_mean=macro_f1_mean,
        macro_f1_std=macro_f1_std,
    )
