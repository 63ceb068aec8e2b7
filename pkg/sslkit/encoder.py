"""Feature extractor f(.; theta), classifier and projection heads, checkpoints.

Architectures are registered in ``ARCHITECTURES`` and operate on a plain
parameter dictionary, so deeper backbones can be added without touching the
training loops. The reference architecture is two 3x3 stride-2 ReLU
convolutions (padding 1), a global average pool and a linear map to d_emb.
"""

import base64
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Protocol, Tuple

import numpy as np
from packaging.version import InvalidVersion, Version

from .config import EncoderConfig, settings
from .exceptions import CheckpointError, ConfigError, ShapeMismatchError
from .numeric import Matrix, l2_normalize, linear_backward, relu, relu_backward, softmax
from .utils import STREAM_INIT, array_digest, rng_stream

logger = logging.getLogger(__name__)

Params = Dict[str, Matrix]
ForwardCache = Dict[str, Any]

KERNEL = 3
STRIDE = 2
PADDING = 1


class Architecture(Protocol):
    """Interface every encoder backbone implements."""

    name: str

    def parameter_shapes(self, config: EncoderConfig) -> Dict[str, Tuple[int, ...]]: ...

    def init_params(self, config: EncoderConfig, rng: np.random.Generator) -> Params: ...

    def forward(
        self, config: EncoderConfig, params: Params, images: np.ndarray
    ) -> Tuple[Matrix, ForwardCache]: ...

    def backward(
        self, config: EncoderConfig, params: Params, cache: ForwardCache, grad_z: Matrix
    ) -> Params: ...


def _conv_output_size(size: int) -> int:
    return (size + 2 * PADDING - KERNEL) // STRIDE + 1


def _extract_patches(x: np.ndarray) -> Tuple[Matrix, Tuple[int, int]]:
    """im2col for a 3x3 stride-2 convolution; rows are (batch, y, x)."""
    batch, height, width, channels = x.shape
    out_h, out_w = _conv_output_size(height), _conv_output_size(width)
    padded = np.pad(x, ((0, 0), (PADDING, PADDING), (PADDING, PADDING), (0, 0)))
    taps = [
        padded[
            :,
            kh: kh + STRIDE * (out_h - 1) + 1: STRIDE,
            kw: kw + STRIDE * (out_w - 1) + 1: STRIDE,
            :,
        ]
        for kh in range(KERNEL)
        for kw in range(KERNEL)
    ]
    patches = np.stack(taps, axis=-1)  # (B, out_h, out_w, C, 9)
    return patches.reshape(batch * out_h * out_w, channels * KERNEL * KERNEL), (out_h, out_w)


def _scatter_patches(
    grad_patches: Matrix, input_shape: Tuple[int, ...], out_hw: Tuple[int, int]
) -> np.ndarray:
    """Adjoint of ``_extract_patches``."""
    batch, height, width, channels = input_shape
    out_h, out_w = out_hw
    grad = grad_patches.reshape(batch, out_h, out_w, channels, KERNEL * KERNEL)
    padded = np.zeros((batch, height + 2 * PADDING, width + 2 * PADDING, channels))
    for kh in range(KERNEL):
        for kw in range(KERNEL):
            padded[
                :,
                kh: kh + STRIDE * (out_h - 1) + 1: STRIDE,
                kw: kw + STRIDE * (out_w - 1) + 1: STRIDE,
                :,
            ] += grad[..., kh * KERNEL + kw]
    return padded[:, PADDING: PADDING + height, PADDING: PADDING + width, :]


class ReferenceArchitecture:
    """conv3x3/2 -> ReLU -> conv3x3/2 -> ReLU -> global average pool -> linear."""

    name = "reference"

    def parameter_shapes(self, config: EncoderConfig) -> Dict[str, Tuple[int, ...]]:
        c1, c2 = config.channels
        shapes: Dict[str, Tuple[int, ...]] = {
            "conv1.weight": (3 * KERNEL * KERNEL, c1),
            "conv2.weight": (c1 * KERNEL * KERNEL, c2),
            "fc.weight": (c2, config.d_emb),
        }
        if config.use_bias:
            shapes.update({"conv1.bias": (c1,), "conv2.bias": (c2,), "fc.bias": (config.d_emb,)})
        return shapes

    def init_params(self, config: EncoderConfig, rng: np.random.Generator) -> Params:
        c1, c2 = config.channels
        fans = {
            "conv1.weight": (3 * KERNEL * KERNEL, c1 * KERNEL * KERNEL),
            "conv2.weight": (c1 * KERNEL * KERNEL, c2 * KERNEL * KERNEL),
            "fc.weight": (c2, config.d_emb),
        }
        params: Params = {}
        for name, shape in sorted(self.parameter_shapes(config).items()):
            if name.endswith(".bias") or config.init == "zeros":
                params[name] = np.zeros(shape)
            else:
                fan_in, fan_out = fans[name]
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                params[name] = rng.uniform(-limit, limit, size=shape)
        return params

    def forward(
        self, config: EncoderConfig, params: Params, images: np.ndarray
    ) -> Tuple[Matrix, ForwardCache]:
        batch = images.shape[0]
        c1, c2 = config.channels

        cols1, hw1 = _extract_patches(images)
        pre1 = cols1 @ params["conv1.weight"]
        if config.use_bias:
            pre1 = pre1 + params["conv1.bias"]
        act1 = relu(pre1).reshape(batch, hw1[0], hw1[1], c1)

        cols2, hw2 = _extract_patches(act1)
        pre2 = cols2 @ params["conv2.weight"]
        if config.use_bias:
            pre2 = pre2 + params["conv2.bias"]
        act2 = relu(pre2)

        pooled = act2.reshape(batch, hw2[0] * hw2[1], c2).mean(axis=1)
        z = pooled @ params["fc.weight"]
        if config.use_bias:
            z = z + params["fc.bias"]

        cache = {
            "cols1": cols1,
            "pre1": pre1,
            "hw1": hw1,
            "act1_shape": act1.shape,
            "cols2": cols2,
            "pre2": pre2,
            "hw2": hw2,
            "pooled": pooled,
        }
        return z, cache

    def backward(
        self, config: EncoderConfig, params: Params, cache: ForwardCache, grad_z: Matrix
    ) -> Params:
        grads: Params = {}
        batch = grad_z.shape[0]
        c2 = config.channels[1]
        h2, w2 = cache["hw2"]

        grads["fc.weight"], fc_bias, grad_pooled = linear_backward(
            cache["pooled"], params["fc.weight"], grad_z
        )
        grad_act2 = np.repeat(grad_pooled[:, None, :] / (h2 * w2), h2 * w2, axis=1)
        grad_pre2 = relu_backward(cache["pre2"], grad_act2.reshape(batch * h2 * w2, c2))
        grads["conv2.weight"], conv2_bias, grad_cols2 = linear_backward(
            cache["cols2"], params["conv2.weight"], grad_pre2
        )

        grad_act1 = _scatter_patches(grad_cols2, cache["act1_shape"], cache["hw2"])
        grad_pre1 = relu_backward(cache["pre1"], grad_act1.reshape(cache["pre1"].shape))
        grads["conv1.weight"] = cache["cols1"].T @ grad_pre1

        if config.use_bias:
            grads["fc.bias"] = fc_bias
            grads["conv2.bias"] = conv2_bias
            grads["conv1.bias"] = grad_pre1.sum(axis=0)
        return grads


ARCHITECTURES: Dict[str, Architecture] = {"reference": ReferenceArchitecture()}


def get_architecture(name: str) -> Architecture:
    try:
        return ARCHITECTURES[name]
    except KeyError:
        raise ConfigError(
            "encoder.architecture", name, f"must be one of {', '.join(sorted(ARCHITECTURES))}"
        ) from None


@dataclass
class EncoderState:
    """Architecture config plus the parameter tensors theta."""

    config: EncoderConfig
    params: Params

    @property
    def architecture(self) -> Architecture:
        return get_architecture(self.config.architecture)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (self.config.input_height, self.config.input_width, 3)

    @property
    def d_emb(self) -> int:
        return self.config.d_emb

    def parameter_count(self) -> int:
        return int(sum(int(np.prod(s)) for s in self.architecture.parameter_shapes(self.config).values()))

    def fingerprint(self) -> str:
        names = sorted(self.params)
        return array_digest(
            np.frombuffer(self.config.model_dump_json().encode(), dtype=np.uint8),
            *(self.params[n] for n in names),
        )

    def copy(self) -> "EncoderState":
        return EncoderState(self.config, {k: v.copy() for k, v in self.params.items()})


def init_encoder(config: EncoderConfig, seed: int = 0) -> EncoderState:
    """Fresh encoder with weights uniform in +-sqrt(6 / (fan_in + fan_out))."""
    architecture = get_architecture(config.architecture)
    params = architecture.init_params(config, rng_stream(seed, STREAM_INIT, 0))
    return EncoderState(config, params)


def _check_images(images: np.ndarray, state: EncoderState) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    expected = state.input_shape
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ShapeMismatchError("image batch", (-1, *expected), images.shape)
    return images


def forward_encoder(state: EncoderState, images: np.ndarray) -> Tuple[Matrix, ForwardCache]:
    images = _check_images(images, state)
    return state.architecture.forward(state.config, state.params, images)


def backward_encoder(state: EncoderState, cache: ForwardCache, grad_z: Matrix) -> Params:
    return state.architecture.backward(state.config, state.params, cache, grad_z)


def encode_batch(images: np.ndarray, state: EncoderState) -> Matrix:
    """Latent vectors z for a (B, H, W, 3) batch of standardized images."""
    z, _ = forward_encoder(state, images)
    return z


def encode(image: Any, state: EncoderState) -> Matrix:
    """Latent vector z in R^d_emb for one standardized image."""
    pixels = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
    if pixels.shape != state.input_shape:
        raise ShapeMismatchError("image", state.input_shape, pixels.shape)
    return encode_batch(pixels[None], state)[0]


@dataclass
class ClassifierHead:
    """Linear softmax classifier: columns of ``weight`` are the class vectors w_j."""

    weight: Matrix
    bias: Matrix

    @property
    def d_emb(self) -> int:
        return int(self.weight.shape[0])

    @property
    def n_classes(self) -> int:
        return int(self.weight.shape[1])

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.weight.copy(), self.bias.copy())


@dataclass
class ProjectionHead:
    """Single linear layer g(.; omega) from d_emb to d_proj."""

    weight: Matrix
    bias: Optional[Matrix] = None
    kind: Literal["swav", "supcon"] = "swav"

    @property
    def d_emb(self) -> int:
        return int(self.weight.shape[0])

    @property
    def d_proj(self) -> int:
        return int(self.weight.shape[1])


def init_classifier(d_emb: int, n_classes: int, seed: int = 0, zero: bool = False) -> ClassifierHead:
    if zero:
        return ClassifierHead(np.zeros((d_emb, n_classes)), np.zeros(n_classes))
    limit = np.sqrt(6.0 / (d_emb + n_classes))
    rng = rng_stream(seed, STREAM_INIT, 1)
    return ClassifierHead(rng.uniform(-limit, limit, (d_emb, n_classes)), np.zeros(n_classes))


def init_projection(
    d_emb: int,
    d_proj: int,
    kind: Literal["swav", "supcon"] = "swav",
    seed: int = 0,
    use_bias: bool = True,
) -> ProjectionHead:
    limit = np.sqrt(6.0 / (d_emb + d_proj))
    rng = rng_stream(seed, STREAM_INIT, 2)
    weight = rng.uniform(-limit, limit, (d_emb, d_proj))
    return ProjectionHead(weight, np.zeros(d_proj) if use_bias else None, kind)


def _check_latent(z: np.ndarray, d_emb: int, what: str) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != d_emb:
        raise ShapeMismatchError(what, d_emb, z.shape[-1])
    return z


def classifier_logits(z: np.ndarray, head: ClassifierHead) -> Matrix:
    z = _check_latent(z, head.d_emb, "classifier input")
    return z @ head.weight + head.bias  # type: ignore[no-any-return]


def classify(z: np.ndarray, head: ClassifierHead) -> Matrix:
    """Class probabilities softmax(W^T z + b) for one latent vector or a batch."""
    return softmax(classifier_logits(z, head))


def project_raw(z: np.ndarray, head: ProjectionHead) -> Matrix:
    z = _check_latent(z, head.d_emb, "projection input")
    raw = z @ head.weight
    if head.bias is not None:
        raw = raw + head.bias
    return raw  # type: ignore[no-any-return]


def project(z: np.ndarray, head: ProjectionHead, normalize: bool = True) -> Matrix:
    """Projected representation u, unit-norm when ``normalize`` is set."""
    raw = project_raw(z, head)
    return l2_normalize(raw) if normalize else raw


@dataclass
class Checkpoint:
    """Everything needed to resume, probe or evaluate a trained model."""

    encoder: EncoderState
    classifier: Optional[ClassifierHead] = None
    projection: Optional[ProjectionHead] = None
    prototypes: Optional[Matrix] = None
    metadata: Dict[str, Any] = field(default_factory=dict)


CHECKPOINT_FORMAT = "sslkit-checkpoint"
SUPPORTED_MAJOR = 1


def _encode_tensor(array: np.ndarray) -> Dict[str, Any]:
    array = np.ascontiguousarray(array, dtype="<f8")
    return {
        "dtype": "<f8",
        "shape": list(array.shape),
        "data": base64.b64encode(array.tobytes()).decode("ascii"),
    }


def _decode_tensor(payload: Dict[str, Any]) -> Matrix:
    raw = base64.b64decode(payload["data"])
    array = np.frombuffer(raw, dtype=payload["dtype"]).astype(np.float64)
    return array.reshape(payload["shape"])


def _collect_tensors(checkpoint: Checkpoint) -> Dict[str, Dict[str, Any]]:
    tensors = {f"encoder.{k}": _encode_tensor(v) for k, v in checkpoint.encoder.params.items()}
    if checkpoint.classifier is not None:
        tensors["classifier.weight"] = _encode_tensor(checkpoint.classifier.weight)
        tensors["classifier.bias"] = _encode_tensor(checkpoint.classifier.bias)
    if checkpoint.projection is not None:
        tensors["projection.weight"] = _encode_tensor(checkpoint.projection.weight)
        if checkpoint.projection.bias is not None:
            tensors["projection.bias"] = _encode_tensor(checkpoint.projection.bias)
    if checkpoint.prototypes is not None:
        tensors["prototypes"] = _encode_tensor(checkpoint.prototypes)
    return tensors


def serialize_checkpoint(checkpoint: Checkpoint) -> bytes:
    """Deterministic byte encoding: sorted-key JSON with base64 float64 tensors."""
    document = {
        "format": CHECKPOINT_FORMAT,
        "version": settings.checkpoint_format_version,
        "encoder_config": checkpoint.encoder.config.model_dump(mode="json"),
        "projection_kind": checkpoint.projection.kind if checkpoint.projection else None,
        "metadata": checkpoint.metadata,
        "tensors": _collect_tensors(checkpoint),
    }
    return json.dumps(document, sort_keys=True, separators=(",", ":")).encode("utf-8")


def serialize_encoder(state: EncoderState) -> bytes:
    return serialize_checkpoint(Checkpoint(encoder=state))


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(serialize_checkpoint(checkpoint))
    except OSError as exc:
        raise CheckpointError(str(path), f"cannot write: {exc.strerror}") from exc
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    """Read a checkpoint written by ``save_checkpoint``."""
    path = Path(path)
    try:
        document = json.loads(path.read_bytes())
    except FileNotFoundError:
        raise CheckpointError(str(path), "file not found") from None
    except (OSError, ValueError) as exc:
        raise CheckpointError(str(path), f"unreadable: {exc}") from exc

    if document.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(str(path), "not an sslkit checkpoint")
    try:
        version = Version(str(document.get("version")))
    except InvalidVersion:
        raise CheckpointError(str(path), f"invalid version {document.get('version')!r}") from None
    if version.major != SUPPORTED_MAJOR:
        raise CheckpointError(
            str(path), f"format version {version} is not supported (expected {SUPPORTED_MAJOR}.x)"
        )

    tensors = {name: _decode_tensor(p) for name, p in document["tensors"].items()}
    config = EncoderConfig.model_validate(document["encoder_config"])
    params = {
        name[len("encoder."):]: array for name, array in tensors.items() if name.startswith("encoder.")
    }
    expected = get_architecture(config.architecture).parameter_shapes(config)
    for name, shape in expected.items():
        if name not in params or params[name].shape != tuple(shape):
            raise CheckpointError(str(path), f"parameter {name} missing or misshaped")

    classifier = None
    if "classifier.weight" in tensors:
        classifier = ClassifierHead(tensors["classifier.weight"], tensors["classifier.bias"])
    projection = None
    if "projection.weight" in tensors:
        projection = ProjectionHead(
            tensors["projection.weight"],
            tensors.get("projection.bias"),
            document.get("projection_kind") or "swav",
        )
    logger.debug(f"Loaded checkpoint {path} (version {version})")
    return Checkpoint(
        encoder=EncoderState(config, params),
        classifier=classifier,
        projection=projection,
        prototypes=tensors.get("prototypes"),
        metadata=document.get("metadata", {}),
    )


def standardization_from(checkpoint: Checkpoint) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """Per-channel (mean, std) stored with a checkpoint, identity when absent."""
    mean = tuple(checkpoint.metadata.get("standardize_mean", (0.0, 0.0, 0.0)))
    std = tuple(checkpoint.metadata.get("standardize_std", (1.0, 1.0, 1.0)))
    return mean, std

