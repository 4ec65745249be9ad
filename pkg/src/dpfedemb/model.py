"""Embedding backbone (a small MLP) with a bias-free softmax head.

The backbone maps inputs to ``embed_dim`` vectors; the head is a matrix of
per-class proxy vectors whose inner products with an embedding are the
logits. Gradients are computed by hand in :mod:`dpfedemb.kernels`.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .params import RngStream

ACTIVATIONS = {"relu": kernels.ACT_RELU, "tanh": kernels.ACT_TANH}


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    embed_dim: int = 32
    activation: str = "relu"
    l2_normalize_embedding: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.embed_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all layer sizes must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}")

    @property
    def dims(self) -> np.ndarray:
        return np.array((self.input_dim, *self.hidden_dims, self.embed_dim), dtype=np.int64)

    @property
    def has_bias(self) -> bool:
        # A single linear layer is kept bias-free so it is a pure linear map.
        return len(self.hidden_dims) > 0

    @property
    def backbone_len(self) -> int:
        dims = self.dims
        n = int(np.sum(dims[:-1] * dims[1:]))
        if self.has_bias:
            n += int(np.sum(dims[1:]))
        return n

    def digest(self) -> bytes:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


@dataclass(frozen=True)
class ModelSplit:
    backbone_len: int
    num_classes: int
    embed_dim: int

    @property
    def head_len(self) -> int:
        return self.num_classes * self.embed_dim

    @property
    def total_len(self) -> int:
        return self.backbone_len + self.head_len


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError(f"batch shape mismatch: inputs {x.shape}, labels {y.shape}")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]


def build_model(cfg: MlpConfig, num_classes: int, rng: RngStream) -> tuple[np.ndarray, ModelSplit]:
    """Initialize backbone weights uniformly in +-sqrt(k / fan_in), zero biases.

    ``k`` is 6 for ReLU hidden layers and 3 otherwise.
    """
    gen = rng.generator()
    dims = cfg.dims
    parts = []
    for layer in range(len(dims) - 1):
        din, dout = int(dims[layer]), int(dims[layer + 1])
        hidden = layer < len(dims) - 2
        k = 6.0 if (hidden and cfg.activation == "relu") else 3.0
        limit = math.sqrt(k / din)
        parts.append(gen.uniform(-limit, limit, size=din * dout))
        if cfg.has_bias:
            parts.append(np.zeros(dout))
    theta = np.concatenate(parts) if parts else np.zeros(0)
    split = ModelSplit(cfg.backbone_len, int(num_classes), cfg.embed_dim)
    assert theta.shape[0] == split.backbone_len
    return theta, split


def init_head(num_classes: int, embed_dim: int, rng: RngStream) -> np.ndarray:
    """Gaussian proxy vectors with standard deviation ``1/sqrt(embed_dim)``."""
    if num_classes < 1 or embed_dim < 1:
        raise ValueError("num_classes and embed_dim must be >= 1")
    return rng.generator().standard_normal(num_classes * embed_dim) / math.sqrt(embed_dim)


def _check_theta(theta: np.ndarray, cfg: MlpConfig) -> np.ndarray:
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    if theta.shape != (cfg.backbone_len,):
        raise ValueError(f"backbone length {theta.shape[0]} does not match config ({cfg.backbone_len})")
    return theta


def embed(theta: np.ndarray, cfg: MlpConfig, inputs: np.ndarray) -> np.ndarray:
    theta = _check_theta(theta, cfg)
    x = np.ascontiguousarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ValueError(f"inputs have shape {x.shape}, expected (n, {cfg.input_dim})")
    acts = kernels.mlp_forward(theta, cfg.dims, cfg.has_bias, ACTIVATIONS[cfg.activation], x)
    h = acts[-1]
    if cfg.l2_normalize_embedding:
        h, _ = kernels.normalize_rows(h)
    return np.asarray(h)


def forward_loss_and_grads(
    theta: np.ndarray, omega: np.ndarray, cfg: MlpConfig, split: ModelSplit, batch: Batch
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy over ``batch`` and its exact gradients."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    theta = _check_theta(theta, cfg)
    omega = np.ascontiguousarray(omega, dtype=np.float64)
    if omega.shape != (split.head_len,):
        raise ValueError(f"head length {omega.shape[0]} does not match split ({split.head_len})")
    if batch.inputs.shape[1] != cfg.input_dim:
        raise ValueError(f"inputs have {batch.inputs.shape[1]} features, expected {cfg.input_dim}")
    if batch.labels.min() < 0 or batch.labels.max() >= split.num_classes:
        raise ValueError(f"labels must lie in [0, {split.num_classes})")
    g_theta = np.zeros_like(theta)
    g_omega = np.zeros_like(omega)
    loss = kernels.loss_and_grads(
        theta, omega, cfg.dims, cfg.has_bias, ACTIVATIONS[cfg.activation],
        cfg.l2_normalize_embedding, batch.inputs, batch.labels, g_theta, g_omega,
    )
    return float(loss), g_theta, g_omega


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DPFECKPT"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIIQQQ32s")
_FLAG_OPTIMIZER = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    """Released parameters plus optional server-side state for resuming.

    ``params`` holds the backbone followed by ``head_len`` head entries; the
    head part is empty for models whose head never leaves the clients.
    """

    params: np.ndarray
    backbone_len: int
    head_len: int = 0
    round: int = 0
    cfg_digest: bytes = b"\0" * 32
    velocity: np.ndarray | None = field(default=None, repr=False)
    clip_norm: float | None = None

    @property
    def backbone(self) -> np.ndarray:
        return self.params[: self.backbone_len]

    @property
    def head(self) -> np.ndarray:
        return self.params[self.backbone_len:]


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    params = np.ascontiguousarray(ckpt.params, dtype="<f8")
    n = ckpt.backbone_len + ckpt.head_len
    if params.shape != (n,):
        raise CheckpointError(f"params length {params.shape[0]} != backbone+head {n}")
    flags = 0
    body = [params.tobytes()]
    if ckpt.velocity is not None:
        vel = np.ascontiguousarray(ckpt.velocity, dtype="<f8")
        if vel.shape != (n,):
            raise CheckpointError("velocity length mismatch")
        clip = np.array([np.inf if ckpt.clip_norm is None else ckpt.clip_norm], dtype="<f8")
        body += [vel.tobytes(), clip.tobytes()]
        flags |= _FLAG_OPTIMIZER
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, flags, ckpt.backbone_len,
                          ckpt.head_len, ckpt.round, ckpt.cfg_digest)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + b"".join(body))
    tmp.replace(path)


def load_checkpoint(path: str | Path, expected_digest: bytes | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, flags, backbone_len, head_len, rnd, digest = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError(f"{path}: model config digest does not match")
    n = backbone_len + head_len
    n_reals = n * 2 + 1 if flags & _FLAG_OPTIMIZER else n
    payload = raw[_HEADER.size:]
    if len(payload) != 8 * n_reals:
        raise CheckpointError(f"{path}: expected {8 * n_reals} payload bytes, found {len(payload)}")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    ckpt = Checkpoint(values[:n].copy(), backbone_len, head_len, rnd, digest)
    if flags & _FLAG_OPTIMIZER:
        ckpt.velocity = values[n:2 * n].copy()
        clip = float(values[2 * n])
        ckpt.clip_norm = None if math.isinf(clip) else clip
    return ckpt
