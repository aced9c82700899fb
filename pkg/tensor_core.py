# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""Dense float64 kernel: affine/tanh forward, taped reverse mode, SGD, gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from core import ShapeError, ArgumentError, NumericError, StateError, check_finite

Tensor = np.ndarray

# largest float64 strictly below 1; keeps tanh outputs inside the open interval
_TANH_BOUND = np.nextafter(1.0, 0.0)


def as_tensor(x, what: str = "tensor") -> Tensor:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return check_finite(arr, what)


@dataclass
class AffineLayer:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} outputs")

    @property
    def in_size(self) -> int:
        return self.weights.shape[1]

    @property
    def out_size(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> AffineLayer:
        return AffineLayer(self.weights.copy(), self.bias.copy())


def affine_forward(x: Tensor, layer: AffineLayer) -> Tensor:
    """
    Compute weights·x + bias over the last axis.

    Args:
        x: Input of shape (in,) or (batch, in)
        layer: Affine parameters

    Returns:
        Output of shape (out,) or (batch, out)
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_size:
        raise ShapeError(f"affine input has {x.shape[-1]} features, layer expects {layer.in_size}")
    return x @ layer.weights.T + layer.bias


def tanh_forward(x: Tensor) -> Tensor:
    x = check_finite(np.asarray(x, dtype=np.float64), "tanh input")
    return np.clip(np.tanh(x), -_TANH_BOUND, _TANH_BOUND)


@dataclass
class GradStore:
    """
    Gradients for a layer stack, ordered [W0, b0, W1, b1, ...].

    With per_sample=True every entry carries a leading batch axis and the
    batch gradient is their sum over that axis.
    """
    params: list[np.ndarray]
    input: np.ndarray | None = None
    per_sample: bool = False

    def check_congruent(self, params: list[np.ndarray]) -> None:
        if len(params) != len(self.params):
            raise ShapeError(f"{len(self.params)} gradients for {len(params)} parameters")
        for i, (p, g) in enumerate(zip(params, self.params)):
            gshape = g.shape[1:] if self.per_sample else g.shape
            if p.shape != gshape:
                raise ShapeError(f"gradient {i} has shape {gshape}, parameter has {p.shape}")

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.params)))

    def sample_norms(self) -> np.ndarray:
        if not self.per_sample:
            raise StateError("sample_norms needs per-sample gradients")
        sq = sum(np.sum(g.reshape(g.shape[0], -1) ** 2, axis=1) for g in self.params)
        return np.sqrt(sq)

    def summed(self) -> GradStore:
        if not self.per_sample:
            return self
        return GradStore([g.sum(axis=0) for g in self.params], self.input, per_sample=False)


class Tape:
    """Records an affine/tanh forward pass so backward() can replay it in reverse."""

    def __init__(self) -> None:
        self.ops: list[tuple] = []
        self.n_layers = 0

    def affine(self, x: Tensor, layer: AffineLayer, index: int) -> Tensor:
        y = affine_forward(x, layer)
        self.ops.append(("affine", index, layer, np.asarray(x, dtype=np.float64)))
        self.n_layers = max(self.n_layers, index + 1)
        return y

    def tanh(self, x: Tensor) -> Tensor:
        y = tanh_forward(x)
        self.ops.append(("tanh", y))
        return y

    @property
    def recorded(self) -> bool:
        return bool(self.ops)


def backward(tape: Tape, upstream: Tensor, per_sample: bool = False) -> GradStore:
    """
    Reverse-mode gradients of a recorded affine/tanh composition.

    Args:
        tape: Tape holding the forward pass
        upstream: dLoss/dOutput, same shape as the taped output
        per_sample: Keep a leading batch axis on parameter gradients

    Returns:
        GradStore with parameter gradients and the gradient w.r.t. the taped input
    """
    if not tape.recorded:
        raise StateError("backward called before any forward pass was recorded")
    g = np.asarray(upstream, dtype=np.float64)
    batched = g.ndim == 2
    if per_sample and not batched:
        raise ShapeError("per-sample gradients need a batched forward pass")
    params: list[np.ndarray | None] = [None] * (2 * tape.n_layers)
    for op in reversed(tape.ops):
        if op[0] == "tanh":
            y = op[1]
            if g.shape != y.shape:
                raise ShapeError(f"upstream shape {g.shape} does not match output {y.shape}")
            g = g * (1.0 - y * y)
            continue
        _, index, layer, x = op
        if g.shape[-1] != layer.out_size:
            raise ShapeError(f"upstream width {g.shape[-1]} does not match layer output {layer.out_size}")
        if per_sample:
            dw = np.einsum("bo,bi->boi", g, x)
            db = g.copy()
        elif batched:
            dw = g.T @ x
            db = g.sum(axis=0)
        else:
            dw = np.outer(g, x)
            db = g.copy()
        params[2 * index] = dw
        params[2 * index + 1] = db
        g = g @ layer.weights
    if any(p is None for p in params):
        raise StateError("tape does not cover every layer index")
    for p in params:
        check_finite(p, "parameter gradient")
    return GradStore(params, check_finite(g, "input gradient"), per_sample=per_sample)


def numeric_gradient(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-4) -> Tensor:
    """
    Central-difference gradient of a scalar function.

    Args:
        f: Scalar-valued function of a tensor
        x: Evaluation point
        h: Step in [1e-6, 1e-2]

    Returns:
        Tensor shaped like x
    """
    if not 1e-6 <= h <= 1e-2:
        raise ArgumentError(f"finite-difference step {h} outside [1e-6, 1e-2]")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class SgdSchedule:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 30
    batch_size: int = 24
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ArgumentError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ArgumentError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ArgumentError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 0:
            raise ArgumentError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")


def sgd_step(
    params: list[np.ndarray],
    grads: GradStore,
    schedule: SgdSchedule,
    velocity: list[np.ndarray] | None = None,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """
    One momentum SGD update with L2 weight decay folded into the velocity.

    v <- momentum*v + grad + weight_decay*param;  param <- param - lr*v

    Args:
        params: Current parameters
        grads: Batch gradients (not per-sample)
        schedule: Learning rate, momentum and weight decay
        velocity: Previous velocity, or None for zeros

    Returns:
        Tuple of (new params, new velocity); inputs are not modified
    """
    grads = grads.summed()
    grads.check_congruent(params)
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    if len(velocity) != len(params) or any(v.shape != p.shape for v, p in zip(velocity, params)):
        raise ShapeError("velocity state is not congruent with parameters")
    new_v = [schedule.momentum * v + g + schedule.weight_decay * p
             for p, g, v in zip(params, grads.params, velocity)]
    new_p = [p - schedule.learning_rate * v for p, v in zip(params, new_v)]
    return new_p, new_v
