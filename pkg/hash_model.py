# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""The deep hashing model F / F', its pairwise training loop, and checkpoints."""

from __future__ import annotations

import os
from dataclasses import dataclass, asdict
from typing import Callable, TYPE_CHECKING

import numpy as np
from tqdm import tqdm

from core import (
    ShapeError, ArgumentError, FormatError, ConfigMismatchError,
    debug, quiet, write_artifact, read_artifact,
)
from tensor_core import AffineLayer, GradStore, SgdSchedule, Tape, backward, sgd_step
from hamming_space import HashCode, to_code

if TYPE_CHECKING:
    from poison_pipeline import Dataset

CHECKPOINT_MAGIC = b"HPL1"

# per-sample GradStore in, batch GradStore out
GradientHook = Callable[[GradStore], GradStore]


@dataclass(frozen=True)
class HashModelConfig:
    input_dims: tuple[int, int, int] = (16, 16, 3)
    hidden_sizes: tuple[int, ...] = (64,)
    code_length: int = 16
    seed: int = 42

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if len(self.input_dims) != 3 or any(d < 1 for d in self.input_dims):
            raise ArgumentError(f"input_dims must be three positive extents, got {self.input_dims}")
        if any(h < 1 for h in self.hidden_sizes):
            raise ArgumentError(f"hidden sizes must be positive, got {self.hidden_sizes}")
        if self.code_length < 4:
            raise ArgumentError(f"code_length must be >= 4, got {self.code_length}")

    @property
    def input_size(self) -> int:
        h, w, c = self.input_dims
        return h * w * c

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_size, *self.hidden_sizes, self.code_length]

    def same_architecture(self, other: HashModelConfig) -> bool:
        return (self.input_dims, self.hidden_sizes, self.code_length) == (
            other.input_dims, other.hidden_sizes, other.code_length)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> HashModelConfig:
        return cls(
            input_dims=tuple(d["input_dims"]),
            hidden_sizes=tuple(d["hidden_sizes"]),
            code_length=int(d["code_length"]),
            seed=int(d["seed"]),
        )


@dataclass
class HashModel:
    """
    flatten -> [affine -> tanh]* -> affine(K) -> tanh.

    The pre-tanh head output is f_theta(x); sign of it is the hash code and
    tanh of it is the relaxed code.
    """
    config: HashModelConfig
    layers: list[AffineLayer]

    def __post_init__(self) -> None:
        sizes = self.config.layer_sizes
        if len(self.layers) != len(sizes) - 1:
            raise ShapeError(f"expected {len(sizes) - 1} layers, got {len(self.layers)}")
        for i, layer in enumerate(self.layers):
            if (layer.in_size, layer.out_size) != (sizes[i], sizes[i + 1]):
                raise ShapeError(f"layer {i} is {layer.in_size}->{layer.out_size}, expected {sizes[i]}->{sizes[i + 1]}")

    @classmethod
    def init(cls, config: HashModelConfig) -> HashModel:
        """Glorot-uniform weights, zero biases, drawn from config.seed."""
        rng = np.random.default_rng(config.seed)
        sizes = config.layer_sizes
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append(AffineLayer(rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out)))
        return cls(config, layers)

    @property
    def code_length(self) -> int:
        return self.config.code_length

    def copy(self) -> HashModel:
        return HashModel(self.config, [layer.copy() for layer in self.layers])

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weights, layer.bias])
        return out

    def with_params(self, params: list[np.ndarray]) -> HashModel:
        if len(params) != 2 * len(self.layers):
            raise ShapeError(f"expected {2 * len(self.layers)} parameter arrays, got {len(params)}")
        layers = [AffineLayer(params[2 * i], params[2 * i + 1]) for i in range(len(self.layers))]
        return HashModel(self.config, layers)

    def flatten(self, images: np.ndarray) -> tuple[np.ndarray, bool]:
        """Row-major flatten of one image (H,W,C) or a batch (B,H,W,C); returns (x, batched)."""
        images = np.asarray(images, dtype=np.float64)
        dims = self.config.input_dims
        if images.shape == dims:
            return images.reshape(-1), False
        if images.ndim == 4 and images.shape[1:] == dims:
            return images.reshape(images.shape[0], -1), True
        raise ShapeError(f"image shape {images.shape} does not match model input {dims}")

    def _run(self, x: np.ndarray, tape: Tape | None, stop_before_head_tanh: bool = False) -> np.ndarray:
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if tape is not None:
                h = tape.affine(h, layer, i)
            else:
                h = h @ layer.weights.T + layer.bias
            if i == last and stop_before_head_tanh:
                return h
            h = tape.tanh(h) if tape is not None else np.tanh(h)
        return h

    def logits(self, images: np.ndarray) -> np.ndarray:
        """Pre-sign head outputs f_theta(x)."""
        x, _ = self.flatten(images)
        return self._run(x, None, stop_before_head_tanh=True)

    def hidden_activations(self, images: np.ndarray) -> np.ndarray:
        """tanh outputs of the last hidden layer."""
        if not self.config.hidden_sizes:
            raise ArgumentError("model has no hidden layer")
        x, _ = self.flatten(images)
        h = x
        for layer in self.layers[:-1]:
            h = np.tanh(h @ layer.weights.T + layer.bias)
        return h

    def relaxed_with_tape(self, images: np.ndarray) -> tuple[np.ndarray, Tape, bool]:
        x, batched = self.flatten(images)
        tape = Tape()
        return self._run(x, tape), tape, batched

    def input_gradient(self, images: np.ndarray, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """
        Relaxed codes of images and dLoss/dImages for a given dLoss/dCodes.

        Args:
            images: One image or a batch
            upstream: Gradient w.r.t. the relaxed codes, shaped like the codes

        Returns:
            Tuple of (relaxed codes, gradient shaped like images)
        """
        images = np.asarray(images, dtype=np.float64)
        codes, tape, _ = self.relaxed_with_tape(images)
        grads = backward(tape, upstream)
        return codes, grads.input.reshape(images.shape)


def relaxed_forward(model: HashModel, image: np.ndarray) -> np.ndarray:
    """F'(x) = tanh(f_theta(x)); K-vector (or batch of them) in (-1, 1)."""
    codes, _, _ = model.relaxed_with_tape(image)
    return codes


def hash_forward(model: HashModel, image: np.ndarray) -> HashCode:
    """F(x) = sign(f_theta(x)) with sign(0) = +1."""
    return to_code(model.logits(image))


def pairwise_similarity(a: np.ndarray, b: np.ndarray) -> int:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"label lengths {a.shape} and {b.shape} differ")
    return int(np.dot(a.astype(np.int64), b.astype(np.int64)) >= 1)


def similarity_matrix(a_labels: np.ndarray, b_labels: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a_labels, dtype=np.int64))
    b = np.atleast_2d(np.asarray(b_labels, dtype=np.int64))
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"label lengths {a.shape[1]} and {b.shape[1]} differ")
    return (a @ b.T >= 1).astype(np.float64)


@dataclass(frozen=True)
class PairwiseLossConfig:
    margin: float | None = None  # None -> K/2
    quantization_weight: float = 0.01

    def resolved_margin(self, code_length: int) -> float:
        m = code_length / 2.0 if self.margin is None else float(self.margin)
        if not 0 < m <= code_length:
            raise ArgumentError(f"margin must lie in (0, K={code_length}], got {m}")
        if self.quantization_weight < 0:
            raise ArgumentError(f"quantization_weight must be >= 0, got {self.quantization_weight}")
        return m


def pairwise_batch_loss(codes: np.ndarray, labels: np.ndarray, cfg: PairwiseLossConfig) -> tuple[float, np.ndarray]:
    """
    Contrastive loss on relaxed Hamming distance plus a quantization term.

    L = mean_{i<j} [ s_ij d_ij + (1 - s_ij) max(0, margin - d_ij) ]
        + q * mean_i sum_k | |u_ik| - 1 | / K,   d_ij = (K - u_i·u_j) / 2

    Args:
        codes: (B, K) relaxed codes, B >= 2
        labels: (B, C) multi-hot labels
        cfg: Margin and quantization weight

    Returns:
        Tuple of (loss, dL/dcodes shaped like codes)
    """
    u = np.asarray(codes, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] < 2:
        raise ArgumentError(f"pairwise loss needs a batch of at least 2 codes, got shape {u.shape}")
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[0] != u.shape[0]:
        raise ShapeError(f"labels shape {labels.shape} does not match {u.shape[0]} codes")
    b, k = u.shape
    margin = cfg.resolved_margin(k)
    s = similarity_matrix(labels, labels)
    d = (k - u @ u.T) / 2.0
    n_pairs = b * (b - 1) / 2.0
    upper = np.triu(np.ones((b, b), dtype=bool), 1)
    hinge = np.maximum(0.0, margin - d)
    terms = s * d + (1.0 - s) * hinge
    contrastive = float(terms[upper].sum() / n_pairs)
    # dL/dd_ij for each unordered pair, mirrored so row i collects its partners
    coef = (s - (1.0 - s) * (hinge > 0)) / n_pairs
    coef = np.where(upper | upper.T, coef, 0.0)
    grad = -(coef @ u) / 2.0

    q = cfg.quantization_weight
    if q:
        dev = np.abs(u) - 1.0
        quant = float(q * np.abs(dev).sum() / (b * k))
        grad = grad + q / (b * k) * np.sign(dev) * np.sign(u)
    else:
        quant = 0.0
    return contrastive + quant, grad


def train(
    model: HashModel,
    train_set: Dataset,
    schedule: SgdSchedule,
    cfg: PairwiseLossConfig,
    hook: GradientHook | None = None,
    desc: str = "train",
) -> tuple[HashModel, list[float]]:
    """
    Minibatch momentum-SGD on the pairwise loss.

    Args:
        model: Starting model (not modified)
        train_set: Dataset with images and labels
        schedule: Optimizer settings; schedule.seed drives shuffling
        cfg: Pairwise loss settings
        hook: Optional transform from per-sample gradients to a batch gradient
        desc: Progress-bar label

    Returns:
        Tuple of (trained model, per-epoch mean loss)
    """
    n = len(train_set)
    if n == 0:
        raise ArgumentError("cannot train on an empty dataset")
    if schedule.epochs == 0:
        return model.copy(), []
    if n < 2 or schedule.batch_size < 2:
        raise ArgumentError("pairwise training needs at least 2 samples per batch")
    x, _ = model.flatten(train_set.images)
    labels = np.asarray(train_set.labels)
    rng = np.random.default_rng(schedule.seed)
    params = [p.copy() for p in model.params()]
    velocity = None
    current = model.copy()
    trace: list[float] = []
    for epoch in tqdm(range(schedule.epochs), desc=desc, disable=quiet(), leave=False):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            if idx.size < 2:
                continue
            tape = Tape()
            codes = current._run(x[idx], tape)
            loss, gcodes = pairwise_batch_loss(codes, labels[idx], cfg)
            if hook is None:
                grads = backward(tape, gcodes)
            else:
                grads = hook(backward(tape, gcodes, per_sample=True))
            params, velocity = sgd_step(params, grads, schedule, velocity)
            current = current.with_params(params)
            losses.append(loss)
        trace.append(float(np.mean(losses)))
        debug(f"{desc} epoch {epoch + 1}/{schedule.epochs} loss={trace[-1]:.6f}")
    return current, trace


# ===== Checkpoints =====
def save_checkpoint(model: HashModel, path: str | os.PathLike) -> None:
    write_artifact(path, CHECKPOINT_MAGIC, {"config": model.config.to_dict()}, model.params())


def load_checkpoint(path: str | os.PathLike, expected: HashModelConfig | None = None) -> HashModel:
    """
    Load a checkpoint written by save_checkpoint.

    Args:
        path: Checkpoint file
        expected: If given, the stored architecture must match it

    Returns:
        HashModel with bitwise-identical parameters

    Raises:
        FormatError: corrupt, truncated or wrong-version file
        ConfigMismatchError: stored architecture differs from expected
    """
    header, arrays = read_artifact(path, CHECKPOINT_MAGIC)
    try:
        config = HashModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: bad config block ({e})") from e
    if expected is not None and not config.same_architecture(expected):
        raise ConfigMismatchError(
            f"{path}: checkpoint has input_dims={config.input_dims} hidden={config.hidden_sizes} "
            f"K={config.code_length}, expected input_dims={expected.input_dims} "
            f"hidden={expected.hidden_sizes} K={expected.code_length}")
    n_layers = len(config.layer_sizes) - 1
    if len(arrays) != 2 * n_layers:
        raise FormatError(f"{path}: {len(arrays)} parameter arrays for {n_layers} layers")
    try:
        layers = [AffineLayer(arrays[2 * i], arrays[2 * i + 1]) for i in range(n_layers)]
        return HashModel(config, layers)
    except ShapeError as e:
        raise FormatError(f"{path}: parameter arrays do not match config ({e})") from e
