"""Training objectives with hand-derived gradients.

Weighted cross-entropy, the swapped-prediction loss over prototype codes with
Sinkhorn targets, and the supervised contrastive loss. Every loss returns a
``LossOutput`` whose ``gradient`` has the shape of the tensor the loss is
differentiated against (documented per function).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .exceptions import DataError, NumericalError, ShapeMismatchError
from .numeric import LOG_FLOOR, Matrix, as_matrix, ensure_finite, l2_normalize, softmax
from .utils import STREAM_PROTOTYPES, rng_stream

logger = logging.getLogger(__name__)


@dataclass
class LossOutput:
    """Scalar loss, its gradient and per-item contributions."""

    value: float
    gradient: Matrix
    per_item: Optional[np.ndarray] = None
    extra_gradients: Dict[str, Matrix] = field(default_factory=dict)
    clamped: int = 0


def class_weights_from_counts(counts: Sequence[int], scheme: str = "inverse_frequency") -> np.ndarray:
    """Per-class weights normalized to mean 1.

    ``inverse_frequency`` weights a class by 1 / support (supports below one
    count as one); ``uniform`` gives every class weight 1.
    """
    counts_arr = np.asarray(counts, dtype=np.float64)
    if scheme == "uniform":
        return np.ones_like(counts_arr)
    if scheme != "inverse_frequency":
        raise ValueError(f"unknown class weighting scheme {scheme!r}")
    weights = 1.0 / np.maximum(counts_arr, 1.0)
    return weights / weights.mean()  # type: ignore[no-any-return]


def cross_entropy(
    probs: np.ndarray,
    targets: np.ndarray,
    class_weights: Optional[np.ndarray] = None,
) -> LossOutput:
    """Weighted cross-entropy of predicted distributions against (soft) targets.

    The gradient is taken with respect to the logits that produced ``probs``
    through a softmax. A row's weight is the target-weighted class weight,
    which reduces to w[y] for one-hot targets.
    """
    p = as_matrix(probs, "probabilities")
    y = as_matrix(targets, "targets")
    if p.shape != y.shape:
        raise ShapeMismatchError("targets", p.shape, y.shape)
    n, n_classes = p.shape
    if n == 0:
        raise NumericalError("cross-entropy of an empty batch")
    weights = np.ones(n_classes) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (n_classes,):
        raise ShapeMismatchError("class weights", n_classes, weights.shape[0])

    active = y > 0.0
    clamped = int(np.count_nonzero(active & (p <= LOG_FLOOR)))
    if clamped:
        logger.warning(f"Clamped {clamped} log-probabilities at {LOG_FLOOR}")
    log_p = np.log(np.maximum(p, LOG_FLOOR), where=active, out=np.zeros_like(p))

    row_weights = y @ weights
    per_item = -row_weights * np.sum(y * log_p, axis=1)
    gradient = row_weights[:, None] * (p - y) / n
    return LossOutput(
        value=float(per_item.mean()),
        gradient=gradient,
        per_item=per_item,
        clamped=clamped,
    )


@dataclass
class PrototypeBank:
    """K unit-norm prototype vectors in projection space."""

    vectors: Matrix
    frozen: bool = False

    @classmethod
    def initialize(cls, n_prototypes: int, d_proj: int, seed: int = 0) -> "PrototypeBank":
        """Directions drawn uniformly on the unit sphere."""
        rng = rng_stream(seed, STREAM_PROTOTYPES)
        return cls(l2_normalize(rng.standard_normal((n_prototypes, d_proj))))

    @property
    def n_prototypes(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def d_proj(self) -> int:
        return int(self.vectors.shape[1])

    def renormalize(self) -> None:
        self.vectors = l2_normalize(self.vectors)

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.vectors.copy(), self.frozen)


def _vectors_of(bank: "PrototypeBank | np.ndarray") -> Matrix:
    return bank.vectors if isinstance(bank, PrototypeBank) else as_matrix(bank, "prototypes")


def prototype_scores(u: np.ndarray, bank: "PrototypeBank | np.ndarray") -> np.ndarray:
    """Dot-product similarities of every projected vector with every prototype."""
    vectors = _vectors_of(bank)
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != vectors.shape[1]:
        raise ShapeMismatchError("projected vectors", vectors.shape[1], u.shape[-1])
    return u @ vectors.T  # type: ignore[no-any-return]


def swav_codes(u: np.ndarray, bank: "PrototypeBank | np.ndarray", temperature: float) -> np.ndarray:
    """Code distributions softmax(u . v_j / temperature) over the K prototypes."""
    if temperature <= 0:
        raise NumericalError(f"code temperature must be positive, got {temperature}")
    return softmax(prototype_scores(u, bank) / temperature)


def sinkhorn_assign(scores: np.ndarray, epsilon: float, iterations: int) -> Matrix:
    """Sinkhorn-Knopp targets: rows sum to 1, columns pushed toward B_eff / K.

    Works on log(exp(scores / epsilon)). Rows are normalized first, then
    ``iterations`` rounds of column and row rescaling follow, so the result
    always ends with a row rescale and does not change when a constant is
    added to a row of ``scores``.
    """
    s = as_matrix(scores, "scores")
    ensure_finite(s, "sinkhorn scores")
    n_rows, n_cols = s.shape
    if n_rows < 1 or n_cols < 1:
        raise NumericalError(f"sinkhorn needs a non-empty score matrix, got {s.shape}")
    if epsilon <= 0:
        raise NumericalError(f"sinkhorn epsilon must be positive, got {epsilon}")
    if iterations < 0:
        raise NumericalError(f"sinkhorn iterations must be >= 0, got {iterations}")

    log_q = s / epsilon
    log_q = log_q - logsumexp(log_q, axis=1, keepdims=True)
    log_column_mass = np.log(n_rows / n_cols)
    for _ in range(iterations):
        log_q = log_q - logsumexp(log_q, axis=0, keepdims=True) + log_column_mass
        log_q = log_q - logsumexp(log_q, axis=1, keepdims=True)
    return np.exp(log_q)  # type: ignore[no-any-return]


def swav_loss(codes: np.ndarray, targets: np.ndarray) -> LossOutput:
    """Swapped prediction: every view's target supervises every other view's code.

    ``codes`` and ``targets`` are M x B x K. Targets are constants. The
    gradient is with respect to the code logits (the softmax inputs).
    """
    c = np.asarray(codes, dtype=np.float64)
    o = np.asarray(targets, dtype=np.float64)
    if c.ndim != 3:
        raise ShapeMismatchError("codes", 3, c.ndim)
    if c.shape != o.shape:
        raise ShapeMismatchError("targets", c.shape, o.shape)
    n_views, batch, _ = c.shape
    if n_views < 2:
        raise DataError(f"swapped prediction needs at least 2 views, got {n_views}")
    if batch == 0:
        raise NumericalError("swapped prediction on an empty batch")

    # Column m holds the sum of the targets of all views except m.
    others = o.sum(axis=0, keepdims=True) - o
    log_c = np.log(np.maximum(c, LOG_FLOOR))
    pairs = n_views * (n_views - 1)
    per_item = -np.einsum("mbk,mbk->b", others, log_c) / pairs
    gradient = ((n_views - 1) * c - others) / (batch * pairs)
    return LossOutput(value=float(per_item.mean()), gradient=gradient, per_item=per_item)


class AssignmentQueue:
    """FIFO store of recent projected vectors that enlarges the Sinkhorn problem.

    Rows are appended at the end and the oldest rows are evicted first. The
    queue is owned by one training loop and is not safe for concurrent use.
    """

    def __init__(self, capacity: int, dim: int, active_from_epoch: int = 1):
        if capacity <= 0:
            raise ValueError(f"queue capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self.active_from_epoch = active_from_epoch
        self._vectors = np.zeros((0, dim))
        self.pushes = 0
        self.consultations = 0

    def __len__(self) -> int:
        return int(self._vectors.shape[0])

    @property
    def vectors(self) -> Matrix:
        view = self._vectors.view()
        view.setflags(write=False)
        return view

    def is_active(self, epoch: int) -> bool:
        return epoch >= self.active_from_epoch and len(self) > 0

    def push(self, u_batch: np.ndarray) -> None:
        rows = as_matrix(u_batch, "queue batch")
        if rows.shape[1] != self.dim:
            raise ShapeMismatchError("queue batch", self.dim, rows.shape[1])
        self._vectors = np.concatenate([self._vectors, rows])[-self.capacity:].copy()
        self.pushes += 1

    def clear(self) -> None:
        self._vectors = np.zeros((0, self.dim))


def queue_update(queue: AssignmentQueue, u_batch: np.ndarray) -> AssignmentQueue:
    """Append a batch of projected vectors, evicting the oldest beyond capacity."""
    queue.push(u_batch)
    return queue


@dataclass
class AssignmentResult:
    """Codes and Sinkhorn targets for every view of a batch."""

    codes: np.ndarray
    targets: np.ndarray
    scores: np.ndarray
    epsilon: float
    iterations: int
    queue_rows: List[int] = field(default_factory=list)


def assign_codes(
    u: np.ndarray,
    bank: "PrototypeBank | np.ndarray",
    temperature: float,
    epsilon: float,
    iterations: int,
    queues: Optional[Sequence[Optional[AssignmentQueue]]] = None,
    epoch: int = 1,
) -> AssignmentResult:
    """Codes and targets for ``u`` of shape M x B x d_proj.

    Queue rows of the matching view join the Sinkhorn problem when that
    queue is active, but only the in-batch rows are returned.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 3:
        raise ShapeMismatchError("projected views", 3, u.ndim)
    n_views, batch, _ = u.shape
    scores = prototype_scores(u, bank)
    targets = np.empty_like(scores)
    queue_rows = []
    for m in range(n_views):
        view_scores = scores[m]
        queue = queues[m] if queues is not None else None
        if queue is not None and queue.is_active(epoch):
            view_scores = np.concatenate([view_scores, prototype_scores(queue.vectors, bank)])
            queue.consultations += 1
            logger.debug(f"View {m} assignment uses {len(queue)} queued rows")
        queue_rows.append(view_scores.shape[0] - batch)
        targets[m] = sinkhorn_assign(view_scores, epsilon, iterations)[:batch]
    codes = softmax(scores / temperature)
    return AssignmentResult(
        codes=codes,
        targets=targets,
        scores=scores,
        epsilon=epsilon,
        iterations=iterations,
        queue_rows=queue_rows,
    )


def positive_mask(labels: Sequence[int]) -> np.ndarray:
    """P[i, j] is true when j != i shares the label of anchor i."""
    labels_arr = np.asarray(labels)
    mask = labels_arr[:, None] == labels_arr[None, :]
    np.fill_diagonal(mask, False)
    return mask  # type: ignore[no-any-return]


def supcon_loss(u: np.ndarray, labels: Sequence[int], temperature: float) -> LossOutput:
    """Supervised contrastive loss with its gradient with respect to ``u``.

    ``u`` holds M*B rows in view-major order (all first views, then all
    second views, ...). ``labels`` has one entry per image (length B) or one
    per row.
    """
    vectors = as_matrix(u, "contrastive batch")
    n_rows = vectors.shape[0]
    labels_arr = np.asarray(labels)
    if labels_arr.shape[0] == 0 or n_rows % labels_arr.shape[0] != 0:
        raise ShapeMismatchError("contrastive labels", n_rows, labels_arr.shape[0])
    labels_arr = np.tile(labels_arr, n_rows // labels_arr.shape[0])
    if temperature <= 0:
        raise NumericalError(f"contrastive temperature must be positive, got {temperature}")

    positives = positive_mask(labels_arr)
    n_positives = positives.sum(axis=1)
    if np.any(n_positives == 0):
        anchor = int(np.flatnonzero(n_positives == 0)[0])
        raise DataError(f"anchor {anchor} has no positive in the batch")

    logits = vectors @ vectors.T / temperature
    np.fill_diagonal(logits, -np.inf)
    log_prob = logits - logsumexp(logits, axis=1, keepdims=True)
    positive_log_prob = np.where(positives, log_prob, 0.0)
    per_item = -positive_log_prob.sum(axis=1) / n_positives

    attention = np.exp(log_prob)
    grad_logits = (attention - positives / n_positives[:, None]) / n_rows
    gradient = (grad_logits + grad_logits.T) @ vectors / temperature
    return LossOutput(value=float(per_item.mean()), gradient=gradient, per_item=per_item)
