"""Optimization loops for the supervised, swapped-prediction and contrastive regimes.

Randomness flows from ``config.seed`` through counter-based streams keyed by
(epoch, batch, position, view), so the number of batch-preparation workers
never changes a result. Parameter updates, queue pushes and prototype
re-normalization happen only in the main loop.
"""

import json
import logging
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .augment import augment, compute_channel_stats, mixup, standardize
from .config import AugmentConfig, ProbeConfig, TrainConfig, settings
from .data import LabeledDataset, balanced_epoch, default_samples_per_class
from .encoder import (
    Checkpoint,
    ClassifierHead,
    EncoderState,
    ProjectionHead,
    backward_encoder,
    classifier_logits,
    encode_batch,
    forward_encoder,
    init_classifier,
    init_encoder,
    init_projection,
    project_raw,
    save_checkpoint,
)
from .evaluation import (
    IDENTITY_STANDARDIZATION,
    Standardization,
    confusion_matrix,
    dataset_features,
    evaluate_model,
    fold_indices,
    per_class_metrics,
    summarize_folds,
    write_report,
)
from .exceptions import DataError, NonFiniteLossError, NumericalError, ShapeMismatchError
from .losses import (
    AssignmentQueue,
    LossOutput,
    PrototypeBank,
    assign_codes,
    class_weights_from_counts,
    cross_entropy,
    queue_update,
    supcon_loss,
    swav_codes,
    swav_loss,
)
from .models import EpochRecord, FoldPlan, FoldSummary, MetricsReport, TrainHistory
from .numeric import Matrix, l2_normalize, l2_normalize_backward, linear_backward, softmax
from .utils import (
    STREAM_AUGMENT,
    STREAM_EPOCH_ORDER,
    STREAM_MIXUP,
    STREAM_PROBE,
    chunked,
    one_hot,
    rng_stream,
)

logger = logging.getLogger(__name__)

Params = Dict[str, Matrix]


def sgd_step(
    params: Params,
    grads: Params,
    learning_rate: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    velocity: Optional[Params] = None,
) -> Tuple[Params, Params]:
    """One SGD step with momentum and L2 weight decay.

    v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
    Returns new (params, velocity) dictionaries; the inputs are not modified.
    """
    velocity = velocity or {}
    new_params: Params = {}
    new_velocity: Params = {}
    for name, param in params.items():
        if name not in grads:
            raise DataError(f"missing gradient for parameter {name}")
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != param.shape:
            raise ShapeMismatchError(f"gradient of {name}", param.shape, grad.shape)
        previous = velocity.get(name)
        step = grad + weight_decay * param
        if previous is not None:
            step = momentum * previous + step
        new_velocity[name] = step
        new_params[name] = param - learning_rate * step
    return new_params, new_velocity


class SGD:
    """Momentum SGD keeping its velocity between steps."""

    def __init__(self, learning_rate: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Params = {}

    def step(self, params: Params, grads: Params) -> Params:
        updated, velocity = sgd_step(
            params,
            grads,
            self.learning_rate,
            self.momentum,
            self.weight_decay,
            {k: v for k, v in self.velocity.items() if k in params},
        )
        self.velocity.update(velocity)
        return updated


def prepare_views(
    images: np.ndarray,
    indices: Sequence[int],
    augment_config: AugmentConfig,
    seed: int,
    epoch: int,
    batch: int,
    n_views: int = 1,
    executor: Optional[Executor] = None,
) -> np.ndarray:
    """Augmented views of a batch, shaped (n_views, B, H, W, 3)."""
    tasks = [(m, p, int(i)) for m in range(n_views) for p, i in enumerate(indices)]

    def run(task: Tuple[int, int, int]) -> np.ndarray:
        view, position, index = task
        rng = rng_stream(seed, STREAM_AUGMENT, epoch, batch, position, view)
        return augment(images[index], augment_config, rng)

    results = list(executor.map(run, tasks) if executor is not None else map(run, tasks))
    return np.stack(results).reshape(n_views, len(indices), *images.shape[1:])


@dataclass
class TrainResult:
    """Trained parameters plus everything needed to checkpoint them."""

    config: TrainConfig
    encoder: EncoderState
    history: TrainHistory
    augment: AugmentConfig
    class_names: Tuple[str, ...]
    classifier: Optional[ClassifierHead] = None
    projection: Optional[ProjectionHead] = None
    prototypes: Optional[PrototypeBank] = None
    queues: List[AssignmentQueue] = field(default_factory=list)

    @property
    def standardization(self) -> Standardization:
        return self.augment.standardize_mean, self.augment.standardize_std

    def checkpoint(self, epoch: Optional[int] = None) -> Checkpoint:
        """Checkpoint bundle; the contrastive projection head is not kept."""
        last = self.history.last
        metadata = {
            "regime": self.config.regime,
            "epoch": epoch if epoch is not None else (last.epoch if last else 0),
            "class_names": list(self.class_names),
            "standardize_mean": list(self.augment.standardize_mean),
            "standardize_std": list(self.augment.standardize_std),
            "config": self.config.model_dump(mode="json"),
        }
        return Checkpoint(
            encoder=self.encoder,
            classifier=self.classifier,
            projection=None if self.config.regime == "supcon" else self.projection,
            prototypes=self.prototypes.vectors if self.prototypes is not None else None,
            metadata=metadata,
        )


class RunWriter:
    """Run directory: config.json, history.csv and checkpoints/epoch_N.ckpt.

    Only the last checkpoint and the best one (by validation macro-F1, else
    by lowest loss) are kept on disk.
    """

    def __init__(self, run_dir: Union[str, Path], config: TrainConfig):
        self.run_dir = Path(run_dir)
        self.checkpoint_dir = self.run_dir / "checkpoints"
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "config.json").write_text(
            config.model_dump_json(indent=2) + "\n", encoding="utf-8"
        )
        self.best_epoch: Optional[int] = None
        self.last_epoch: Optional[int] = None
        self._best_score: Optional[float] = None

    def checkpoint_path(self, epoch: int) -> Path:
        return self.checkpoint_dir / f"epoch_{epoch}.ckpt"

    @property
    def last_checkpoint(self) -> Optional[Path]:
        return None if self.last_epoch is None else self.checkpoint_path(self.last_epoch)

    @property
    def best_checkpoint(self) -> Optional[Path]:
        return None if self.best_epoch is None else self.checkpoint_path(self.best_epoch)

    def epoch_end(self, record: EpochRecord, history: TrainHistory, checkpoint: Checkpoint) -> None:
        history.write_csv(self.run_dir / "history.csv")
        save_checkpoint(checkpoint, self.checkpoint_path(record.epoch))
        score = record.val_macro_f1 if record.val_macro_f1 is not None else -record.loss
        if self._best_score is None or score > self._best_score:
            self._best_score = score
            self.best_epoch = record.epoch
        self.last_epoch = record.epoch

        keep = {self.best_epoch, self.last_epoch}
        for path in self.checkpoint_dir.glob("epoch_*.ckpt"):
            if int(path.stem.split("_", 1)[1]) not in keep:
                path.unlink()
        (self.checkpoint_dir / "index.json").write_text(
            json.dumps({"best": self.best_epoch, "last": self.last_epoch}) + "\n", encoding="utf-8"
        )


def _check_loss(value: float, regime: str, epoch: int, batch: int) -> None:
    if not np.isfinite(value):
        logger.error(f"Non-finite {regime} loss at epoch {epoch}, batch {batch}")
        raise NonFiniteLossError(regime, epoch, batch)


def _check_input_shape(config: TrainConfig, dataset: LabeledDataset) -> None:
    expected = (config.encoder.input_height, config.encoder.input_width, 3)
    if len(dataset) and dataset.image_shape != expected:
        raise ShapeMismatchError("dataset images", expected, dataset.image_shape)


def _require_labels(dataset: LabeledDataset, regime: str) -> None:
    if not dataset.is_labeled:
        raise DataError(f"the {regime} regime needs a fully labeled dataset")


def _training_indices(
    dataset: LabeledDataset, fold_plan: Optional[FoldPlan], fold_index: int
) -> Tuple[np.ndarray, List[int]]:
    train, val = fold_indices(dataset, fold_plan, fold_index)
    if not train:
        raise DataError(f"training fold {fold_index} is empty")
    return np.asarray(train, dtype=np.int64), (val if fold_plan is not None else [])


def _resolve_augment(config: TrainConfig, dataset: LabeledDataset, train: np.ndarray) -> AugmentConfig:
    if not config.standardize_from_data:
        return config.augment
    mean, std = compute_channel_stats(dataset.images[train])
    logger.debug(f"Standardization from training split: mean={mean} std={std}")
    return config.augment.model_copy(update={"standardize_mean": mean, "standardize_std": std})


def _class_setup(
    labels: np.ndarray, n_classes: int, samples_per_class: Optional[int]
) -> Tuple[np.ndarray, np.ndarray, int]:
    counts = np.bincount(labels, minlength=n_classes)
    present = np.flatnonzero(counts)
    if present.size < n_classes:
        missing = [int(c) for c in np.flatnonzero(counts == 0)]
        logger.warning(f"Classes {missing} have no training samples in this split")
    n_c = samples_per_class or default_samples_per_class(counts)
    return counts, present, n_c


def _epoch_order(
    config: TrainConfig,
    train: np.ndarray,
    labels: np.ndarray,
    present: np.ndarray,
    n_c: int,
    epoch: int,
    balanced: bool,
) -> Tuple[np.ndarray, Optional[List[int]]]:
    rng = rng_stream(config.seed, STREAM_EPOCH_ORDER, epoch)
    if not balanced:
        return train[rng.permutation(train.shape[0])], None
    order = train[balanced_epoch(labels[train], n_c, rng, classes=present)]
    draws = np.bincount(labels[order], minlength=int(labels.max()) + 1)
    if np.any(draws[present] != n_c):
        raise DataError("balanced epoch drew an unequal number of samples per class")
    return order, draws.tolist()


def _pack(encoder: EncoderState, heads: Dict[str, Optional[Matrix]]) -> Params:
    params = {f"encoder.{k}": v for k, v in encoder.params.items()}
    params.update({k: v for k, v in heads.items() if v is not None})
    return params


def _unpack_encoder(encoder: EncoderState, params: Params) -> None:
    encoder.params = {k[len("encoder."):]: v for k, v in params.items() if k.startswith("encoder.")}


def _encoder_grads(encoder: EncoderState, cache: Dict, grad_z: Matrix) -> Params:
    return {f"encoder.{k}": v for k, v in backward_encoder(encoder, cache, grad_z).items()}


@dataclass
class BatchGradients:
    """Loss of one batch and the gradient of every trainable tensor in it."""

    loss: LossOutput
    grads: Params
    projected: np.ndarray = field(default_factory=lambda: np.empty(0))


def _flatten_views(views: np.ndarray) -> np.ndarray:
    return views.reshape(views.shape[0] * views.shape[1], *views.shape[2:])


def _projection_grads(
    encoder: EncoderState,
    projection: ProjectionHead,
    cache: Dict,
    z: Matrix,
    raw: Matrix,
    grad_u: Matrix,
) -> Params:
    d_raw = l2_normalize_backward(raw, grad_u)
    d_weight, d_bias, d_z = linear_backward(z, projection.weight, d_raw)
    grads = _encoder_grads(encoder, cache, d_z)
    grads["projection.weight"] = d_weight
    if projection.bias is not None:
        grads["projection.bias"] = d_bias
    return grads


def supervised_gradients(
    encoder: EncoderState,
    head: ClassifierHead,
    images: np.ndarray,
    targets: Matrix,
    class_weights: Optional[np.ndarray] = None,
) -> BatchGradients:
    """Weighted cross-entropy of encoder + classifier on one batch."""
    z, cache = forward_encoder(encoder, images)
    out = cross_entropy(softmax(classifier_logits(z, head)), targets, class_weights)
    d_weight, d_bias, d_z = linear_backward(z, head.weight, out.gradient)
    grads = _encoder_grads(encoder, cache, d_z)
    grads["classifier.weight"] = d_weight
    grads["classifier.bias"] = d_bias
    return BatchGradients(out, grads)


def swav_gradients(
    encoder: EncoderState,
    projection: ProjectionHead,
    prototypes: Matrix,
    views: np.ndarray,
    temperature: float,
    assign: Callable[[np.ndarray], np.ndarray],
    with_prototypes: bool = True,
) -> BatchGradients:
    """Swapped-prediction loss of M x B views through encoder, projection and prototypes.

    ``assign`` maps the normalized projections (M x B x d_proj) to the
    targets, which are held constant in the backward pass.
    """
    n_views, batch = views.shape[:2]
    z, cache = forward_encoder(encoder, _flatten_views(views))
    raw = project_raw(z, projection)
    u = l2_normalize(raw).reshape(n_views, batch, raw.shape[1])
    out = swav_loss(swav_codes(u, prototypes, temperature), assign(u))

    d_scores = out.gradient / temperature
    d_u = (d_scores @ prototypes).reshape(n_views * batch, raw.shape[1])
    grads = _projection_grads(encoder, projection, cache, z, raw, d_u)
    if with_prototypes:
        grads["prototypes"] = np.einsum("mbk,mbd->kd", d_scores, u)
    return BatchGradients(out, grads, u)


def supcon_gradients(
    encoder: EncoderState,
    projection: ProjectionHead,
    views: np.ndarray,
    labels: Sequence[int],
    temperature: float,
) -> BatchGradients:
    """Supervised contrastive loss of M x B views through encoder and projection."""
    z, cache = forward_encoder(encoder, _flatten_views(views))
    raw = project_raw(z, projection)
    out = supcon_loss(l2_normalize(raw), labels, temperature)
    return BatchGradients(out, _projection_grads(encoder, projection, cache, z, raw, out.gradient))


def _sinkhorn_targets(
    u: np.ndarray,
    bank: PrototypeBank,
    config: TrainConfig,
    queues: Optional[List[AssignmentQueue]],
    epoch: int,
) -> np.ndarray:
    return assign_codes(
        u,
        bank,
        config.code_temperature,
        config.sinkhorn_epsilon,
        config.sinkhorn_iterations,
        queues,
        epoch,
    ).targets


def _validation_macro_f1(
    encoder: EncoderState,
    head: ClassifierHead,
    dataset: LabeledDataset,
    val: List[int],
    augment_config: AugmentConfig,
) -> Optional[float]:
    if not val:
        return None
    images = standardize(
        dataset.images[val], augment_config.standardize_mean, augment_config.standardize_std
    )
    predictions = np.argmax(classifier_logits(encode_batch(images, encoder), head), axis=1)
    confusion = confusion_matrix(predictions, dataset.labels[val], dataset.n_classes)
    return per_class_metrics(confusion, dataset.class_names).macro_f1


def _finish_epoch(
    result: TrainResult,
    writer: Optional["RunWriter"],
    record: EpochRecord,
) -> None:
    result.history.records.append(record)
    metric = "" if record.val_macro_f1 is None else f", val macro-F1 {record.val_macro_f1:.4f}"
    logger.info(
        f"[{result.config.regime}] epoch {record.epoch}/{result.config.epochs}: "
        f"loss {record.loss:.4f}{metric} ({record.seconds:.1f}s)"
    )
    if writer is not None:
        writer.epoch_end(record, result.history, result.checkpoint(record.epoch))


def train_supervised(
    config: TrainConfig,
    dataset: LabeledDataset,
    fold_plan: Optional[FoldPlan] = None,
    fold_index: int = 0,
    writer: Optional[RunWriter] = None,
) -> TrainResult:
    """Weighted cross-entropy training of encoder + classifier on balanced epochs."""
    _require_labels(dataset, "supervised")
    _check_input_shape(config, dataset)
    train, val = _training_indices(dataset, fold_plan, fold_index)
    labels = dataset.labels
    n_classes = dataset.n_classes
    counts, present, n_c = _class_setup(labels[train], n_classes, config.samples_per_class)
    weights = class_weights_from_counts(counts, config.class_weighting)
    augment_config = _resolve_augment(config, dataset, train)

    encoder = init_encoder(config.encoder, config.seed)
    head = init_classifier(encoder.d_emb, n_classes, config.seed)
    optimizer = SGD(config.learning_rate, config.momentum, config.weight_decay)
    result = TrainResult(
        config=config,
        encoder=encoder,
        history=TrainHistory(regime="supervised"),
        augment=augment_config,
        class_names=dataset.class_names,
        classifier=head,
    )
    logger.info(
        f"Supervised training on {train.shape[0]} images, {present.size} classes, "
        f"N_c={n_c if config.balanced_sampling else 'natural'}"
    )

    with ThreadPoolExecutor(max_workers=settings.threads) as pool:
        for epoch in range(1, config.epochs + 1):
            started = time.perf_counter()
            order, draws = _epoch_order(
                config, train, labels, present, n_c, epoch, config.balanced_sampling
            )
            losses, clamped = [], 0
            for b, rows in enumerate(chunked(order, config.batch_size)):
                x = prepare_views(dataset.images, rows, augment_config, config.seed, epoch, b, 1, pool)[0]
                y = one_hot(labels[rows], n_classes)
                if config.mixup_enabled and len(rows) >= 2:
                    mixed = mixup(
                        x,
                        y,
                        config.mixup_alpha,
                        rng_stream(config.seed, STREAM_MIXUP, epoch, b),
                        lam=config.mixup_fixed_lambda,
                    )
                    x, y = mixed.images, mixed.targets

                step = supervised_gradients(encoder, head, x, y, weights)
                out = step.loss
                _check_loss(out.value, "supervised", epoch, b)

                params = optimizer.step(
                    _pack(encoder, {"classifier.weight": head.weight, "classifier.bias": head.bias}), step.grads
                )
                _unpack_encoder(encoder, params)
                head.weight, head.bias = params["classifier.weight"], params["classifier.bias"]
                losses.append(out.value)
                clamped += out.clamped

            record = EpochRecord(
                epoch=epoch,
                loss=float(np.mean(losses)),
                val_macro_f1=_validation_macro_f1(encoder, head, dataset, val, augment_config),
                seconds=time.perf_counter() - started,
                batches=len(losses),
                clamped_logs=clamped,
                class_draws=draws,
            )
            _finish_epoch(result, writer, record)
    return result


def train_swav(
    config: TrainConfig,
    dataset: LabeledDataset,
    fold_plan: Optional[FoldPlan] = None,
    fold_index: int = 0,
    writer: Optional[RunWriter] = None,
) -> TrainResult:
    """Swapped-prediction pretraining on the natural (unbalanced) distribution.

    Labels are ignored. Prototypes stay frozen for the first
    ``prototype_freeze_epochs`` epochs; the per-view queues are filled and
    consulted from ``queue_start_epoch`` on.
    """
    _check_input_shape(config, dataset)
    train, _ = _training_indices(dataset, fold_plan, fold_index)
    augment_config = _resolve_augment(config, dataset, train)
    n_views = config.n_views
    temperature = config.code_temperature

    encoder = init_encoder(config.encoder, config.seed)
    projection = init_projection(encoder.d_emb, config.d_proj, "swav", config.seed)
    bank = PrototypeBank.initialize(config.n_prototypes, config.d_proj, config.seed)
    queues = [
        AssignmentQueue(config.queue_capacity, config.d_proj, config.queue_start_epoch)
        for _ in range(n_views)
    ]
    optimizer = SGD(config.learning_rate, config.momentum, config.weight_decay)
    result = TrainResult(
        config=config,
        encoder=encoder,
        history=TrainHistory(regime="swav"),
        augment=augment_config,
        class_names=dataset.class_names,
        projection=projection,
        prototypes=bank,
        queues=queues,
    )

    with ThreadPoolExecutor(max_workers=settings.threads) as pool:
        for epoch in range(1, config.epochs + 1):
            started = time.perf_counter()
            bank.frozen = epoch <= config.prototype_freeze_epochs
            queue_open = epoch >= config.queue_start_epoch
            if epoch == config.queue_start_epoch:
                logger.debug(f"Assignment queue active from epoch {epoch}")
            order, _ = _epoch_order(config, train, dataset.labels, np.array([]), 0, epoch, False)
            consulted_before = sum(q.consultations for q in queues)
            losses, skipped, updates = [], 0, 0

            for b, rows in enumerate(chunked(order, config.batch_size)):
                if len(rows) < 2:
                    logger.warning(f"Skipping batch {b} of epoch {epoch}: {len(rows)} image(s)")
                    skipped += 1
                    continue
                views = prepare_views(
                    dataset.images, rows, augment_config, config.seed, epoch, b, n_views, pool
                )
                targets = partial(
                    _sinkhorn_targets, bank=bank, config=config, queues=queues if queue_open else None, epoch=epoch
                )
                step = swav_gradients(
                    encoder, projection, bank.vectors, views, temperature, targets, with_prototypes=not bank.frozen
                )
                out = step.loss
                _check_loss(out.value, "swav", epoch, b)

                params = _pack(encoder, {"projection.weight": projection.weight, "projection.bias": projection.bias})
                if not bank.frozen:
                    params["prototypes"] = bank.vectors

                params = optimizer.step(params, step.grads)
                _unpack_encoder(encoder, params)
                projection.weight = params["projection.weight"]
                if projection.bias is not None:
                    projection.bias = params["projection.bias"]
                if not bank.frozen:
                    bank.vectors = params["prototypes"]
                    bank.renormalize()
                    updates += 1

                if queue_open:
                    for m, queue in enumerate(queues):
                        queue_update(queue, step.projected[m])
                losses.append(out.value)

            if not losses:
                raise DataError(f"epoch {epoch} had no batch with at least 2 images")
            record = EpochRecord(
                epoch=epoch,
                loss=float(np.mean(losses)),
                seconds=time.perf_counter() - started,
                batches=len(losses),
                skipped_batches=skipped,
                queue_consultations=sum(q.consultations for q in queues) - consulted_before,
                prototype_updates=updates,
            )
            _finish_epoch(result, writer, record)
    return result


def _contrastive_batches(order: np.ndarray, batch_size: int) -> List[List[int]]:
    batches = list(chunked(order, batch_size))
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2].extend(batches.pop())
    return batches


def train_supcon(
    config: TrainConfig,
    dataset: LabeledDataset,
    fold_plan: Optional[FoldPlan] = None,
    fold_index: int = 0,
    writer: Optional[RunWriter] = None,
) -> TrainResult:
    """Supervised contrastive pretraining on balanced epochs.

    A trailing single-image batch is merged into the previous batch. The
    projection head is returned but left out of checkpoints.
    """
    _require_labels(dataset, "supcon")
    _check_input_shape(config, dataset)
    train, _ = _training_indices(dataset, fold_plan, fold_index)
    labels = dataset.labels
    _, present, n_c = _class_setup(labels[train], dataset.n_classes, config.samples_per_class)
    augment_config = _resolve_augment(config, dataset, train)
    n_views = config.n_views

    encoder = init_encoder(config.encoder, config.seed)
    projection = init_projection(encoder.d_emb, config.d_proj, "supcon", config.seed)
    optimizer = SGD(config.learning_rate, config.momentum, config.weight_decay)
    result = TrainResult(
        config=config,
        encoder=encoder,
        history=TrainHistory(regime="supcon"),
        augment=augment_config,
        class_names=dataset.class_names,
        projection=projection,
    )

    with ThreadPoolExecutor(max_workers=settings.threads) as pool:
        for epoch in range(1, config.epochs + 1):
            started = time.perf_counter()
            order, draws = _epoch_order(
                config, train, labels, present, n_c, epoch, config.balanced_sampling
            )
            if order.shape[0] < 2:
                raise DataError("supervised contrastive training needs at least two images per epoch")
            losses = []
            for b, rows in enumerate(_contrastive_batches(order, config.batch_size)):
                views = prepare_views(
                    dataset.images, rows, augment_config, config.seed, epoch, b, n_views, pool
                )
                step = supcon_gradients(encoder, projection, views, labels[rows], config.supcon_temperature)
                out = step.loss
                _check_loss(out.value, "supcon", epoch, b)

                params = optimizer.step(
                    _pack(encoder, {"projection.weight": projection.weight, "projection.bias": projection.bias}),
                    step.grads,
                )
                _unpack_encoder(encoder, params)
                projection.weight = params["projection.weight"]
                if projection.bias is not None:
                    projection.bias = params["projection.bias"]
                losses.append(out.value)

            record = EpochRecord(
                epoch=epoch,
                loss=float(np.mean(losses)),
                seconds=time.perf_counter() - started,
                batches=len(losses),
                class_draws=draws,
            )
            _finish_epoch(result, writer, record)
    return result


TRAINERS: Dict[str, Callable[..., TrainResult]] = {
    "supervised": train_supervised,
    "swav": train_swav,
    "supcon": train_supcon,
}


def train(
    config: TrainConfig,
    dataset: LabeledDataset,
    fold_plan: Optional[FoldPlan] = None,
    fold_index: int = 0,
    writer: Optional[RunWriter] = None,
) -> TrainResult:
    """Run the training loop of ``config.regime``."""
    return TRAINERS[config.regime](config, dataset, fold_plan, fold_index, writer)


@dataclass
class ProbeResult:
    head: ClassifierHead
    report: MetricsReport
    history: TrainHistory


def linear_probe(
    encoder: EncoderState,
    dataset: LabeledDataset,
    probe_config: Optional[ProbeConfig] = None,
    fold_plan: Optional[FoldPlan] = None,
    fold_index: int = 0,
    standardization: Standardization = IDENTITY_STANDARDIZATION,
    head: Optional[ClassifierHead] = None,
) -> ProbeResult:
    """Train only a linear classifier on frozen features and report held-out metrics.

    Features are standardized per dimension for the optimization; the
    normalization is folded back into the returned head, which therefore
    consumes raw latent vectors.
    """
    config = probe_config or ProbeConfig()
    _require_labels(dataset, "probe")
    if head is not None and head.d_emb != encoder.d_emb:
        raise ShapeMismatchError("probe head input", encoder.d_emb, head.d_emb)
    if head is not None and head.n_classes != dataset.n_classes:
        raise ShapeMismatchError("probe head classes", dataset.n_classes, head.n_classes)
    train, val = fold_indices(dataset, fold_plan, fold_index)
    if not train or not val:
        raise DataError(f"fold {fold_index} leaves an empty training or validation set")
    fingerprint = encoder.fingerprint()

    features = dataset_features(encoder, dataset, standardization)
    labels = dataset.labels
    x_train, y_train = features[train], labels[train]
    if config.standardize_features:
        mu = x_train.mean(axis=0)
        sigma = x_train.std(axis=0)
        sigma = np.where(sigma > 1e-12, sigma, 1.0)
    else:
        mu, sigma = np.zeros(encoder.d_emb), np.ones(encoder.d_emb)
    x_norm = (x_train - mu) / sigma

    if head is None:
        start = init_classifier(encoder.d_emb, dataset.n_classes, config.seed)
        weight, bias = start.weight, start.bias
    else:
        weight = head.weight * sigma[:, None]
        bias = head.bias + mu @ head.weight
    _, present, n_c = _class_setup(y_train, dataset.n_classes, None)
    optimizer = SGD(config.learning_rate, config.momentum, config.weight_decay)
    history = TrainHistory(regime="probe")

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        rng = rng_stream(config.seed, STREAM_PROBE, epoch)
        if config.balanced_sampling:
            order = balanced_epoch(y_train, n_c, rng, classes=present)
        else:
            order = rng.permutation(y_train.shape[0])
        losses = []
        for b, rows in enumerate(chunked(order, config.batch_size)):
            out = cross_entropy(
                softmax(x_norm[rows] @ weight + bias), one_hot(y_train[rows], dataset.n_classes)
            )
            _check_loss(out.value, "probe", epoch, b)
            d_weight, d_bias, _ = linear_backward(x_norm[rows], weight, out.gradient)
            params = optimizer.step({"weight": weight, "bias": bias}, {"weight": d_weight, "bias": d_bias})
            weight, bias = params["weight"], params["bias"]
            losses.append(out.value)
        history.records.append(
            EpochRecord(
                epoch=epoch,
                loss=float(np.mean(losses)),
                seconds=time.perf_counter() - started,
                batches=len(losses),
            )
        )

    folded = ClassifierHead(weight / sigma[:, None], bias - (mu / sigma) @ weight)
    if encoder.fingerprint() != fingerprint:
        raise NumericalError("encoder parameters changed during the linear probe")
    predictions = np.argmax(classifier_logits(features[val], folded), axis=1)
    report = per_class_metrics(
        confusion_matrix(predictions, labels[val], dataset.n_classes), dataset.class_names
    )
    logger.info(f"Linear probe macro-F1 {report.macro_f1} on {len(val)} held-out images")
    return ProbeResult(head=folded, report=report, history=history)


def embedding_similarity_gap(z: np.ndarray, labels: Sequence[int]) -> float:
    """Mean within-class minus mean between-class cosine similarity."""
    unit = l2_normalize(z)
    labels_arr = np.asarray(labels)
    similarity = unit @ unit.T
    same = labels_arr[:, None] == labels_arr[None, :]
    within = same & ~np.eye(labels_arr.shape[0], dtype=bool)
    between = ~same
    if not within.any() or not between.any():
        raise DataError("need two samples of one class and two classes to compare similarities")
    return float(similarity[within].mean() - similarity[between].mean())


@dataclass
class CrossValidationResult:
    reports: List[MetricsReport]
    summary: FoldSummary


def fold_report(
    result: TrainResult, dataset: LabeledDataset, fold_plan: Optional[FoldPlan], fold_index: int
) -> MetricsReport:
    """Held-out metrics: the classifier directly, or a linear probe for pretraining regimes."""
    if result.classifier is not None:
        return evaluate_model(
            result.encoder, result.classifier, dataset, fold_plan, fold_index, result.standardization
        )
    probe = linear_probe(
        result.encoder, dataset, result.config.probe, fold_plan, fold_index, result.standardization
    )
    return probe.report


def cross_validate(
    config: TrainConfig,
    dataset: LabeledDataset,
    fold_plan: FoldPlan,
    out_dir: Optional[Union[str, Path]] = None,
) -> CrossValidationResult:
    """Train and evaluate every fold, then aggregate the fold reports."""
    reports = []
    for fold in range(fold_plan.k):
        logger.info(f"Cross-validation fold {fold + 1}/{fold_plan.k}")
        writer = RunWriter(Path(out_dir) / f"fold_{fold}", config) if out_dir is not None else None
        result = train(config, dataset, fold_plan, fold, writer)
        report = fold_report(result, dataset, fold_plan, fold)
        if out_dir is not None:
            write_report(report, Path(out_dir) / f"fold_{fold}")
        reports.append(report)
    summary = summarize_folds(reports)
    if out_dir is not None:
        (Path(out_dir) / "fold_summary.json").write_text(
            summary.model_dump_json(indent=2) + "\n", encoding="utf-8"
        )
    return CrossValidationResult(reports=reports, summary=summary)
