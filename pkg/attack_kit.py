# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""Attack-side optimization: trigger injection and generation, PGD and confusing perturbations."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Sequence, TYPE_CHECKING

import numpy as np
from tqdm import tqdm

from core import ShapeError, ArgumentError, NumericError, FormatError, debug, quiet, write_artifact, read_artifact
from tensor_core import backward
from hamming_space import AnchorCode, anchor_code
from hash_model import HashModel, hash_forward, similarity_matrix

if TYPE_CHECKING:
    from poison_pipeline import Dataset

TRIGGER_MAGIC = b"HPT1"
PERTURBATION_MAGIC = b"HPE1"

LOCATIONS = ("bottom_right", "bottom_left", "top_right", "top_left")

# reference footprint: a 24 px patch on 224 px images
REFERENCE_TRIGGER = 24
REFERENCE_SIDE = 224


def default_trigger_size(side: int) -> int:
    return max(4, -(-side * REFERENCE_TRIGGER // REFERENCE_SIDE))


def square_mask(dims: tuple[int, int, int], size: int, location: str = "bottom_right") -> np.ndarray:
    """
    Binary mask that is 1 on a size x size x C corner block.

    Args:
        dims: Image dims (H, W, C)
        size: Patch side; 0 gives an empty mask
        location: One of LOCATIONS

    Returns:
        float64 array of shape dims over {0, 1}
    """
    h, w, c = dims
    if location not in LOCATIONS:
        raise ArgumentError(f"unknown trigger location {location!r}; choose from {', '.join(LOCATIONS)}")
    if not 0 <= size <= min(h, w):
        raise ArgumentError(f"trigger size {size} does not fit a {h}x{w} image")
    mask = np.zeros(dims, dtype=np.float64)
    if size == 0:
        return mask
    rows = slice(h - size, h) if location.startswith("bottom") else slice(0, size)
    cols = slice(w - size, w) if location.endswith("right") else slice(0, size)
    mask[rows, cols, :] = 1.0
    return mask


@dataclass(eq=False)
class TriggerSpec:
    pattern: np.ndarray
    mask: np.ndarray
    size: int
    location: str = "bottom_right"
    blend: float = 1.0

    def __post_init__(self) -> None:
        self.pattern = np.asarray(self.pattern, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.pattern.shape != self.mask.shape or self.pattern.ndim != 3:
            raise ShapeError(f"pattern {self.pattern.shape} and mask {self.mask.shape} must share (H, W, C)")
        if not 0.0 < self.blend <= 1.0:
            raise ArgumentError(f"blend ratio must lie in (0, 1], got {self.blend}")
        if not np.array_equal(self.mask, square_mask(self.dims, self.size, self.location)):
            raise ArgumentError(f"mask is not the {self.size}x{self.size} {self.location} block")
        inside = self.pattern[self.mask > 0]
        if inside.size and (inside.min() < 0.0 or inside.max() > 1.0):
            raise ArgumentError("trigger pattern must lie in [0, 1] inside the mask")

    @classmethod
    def build(cls, dims: tuple[int, int, int], size: int, location: str = "bottom_right",
              blend: float = 1.0, fill: float = 0.5) -> TriggerSpec:
        """Trigger with a constant-gray pattern on the masked block."""
        mask = square_mask(tuple(dims), size, location)
        return cls(np.full(tuple(dims), fill) * mask, mask, size, location, blend)

    @classmethod
    def null(cls, dims: tuple[int, int, int]) -> TriggerSpec:
        return cls.build(dims, 0)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.pattern.shape)

    def with_pattern(self, pattern: np.ndarray) -> TriggerSpec:
        return TriggerSpec(pattern, self.mask, self.size, self.location, self.blend)

    def with_blend(self, blend: float) -> TriggerSpec:
        return TriggerSpec(self.pattern, self.mask, self.size, self.location, blend)


def inject(x: np.ndarray, t: TriggerSpec) -> np.ndarray:
    """
    Patch a trigger onto one image or a batch.

    x_hat = x*(1-m) + p*beta*m + x*(1-beta)*m, i.e. x*(1-m) + p*m when beta = 1.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-3:] != t.dims or x.ndim not in (3, 4):
        raise ShapeError(f"image shape {x.shape} does not match trigger dims {t.dims}")
    bm = t.blend * t.mask
    return np.clip(x * (1.0 - bm) + t.pattern * bm, 0.0, 1.0)


@dataclass(frozen=True)
class PerturbationBudget:
    epsilon: float = 0.032
    step_size: float = 0.003
    epochs: int = 20
    batch_size: int = 20

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon < 0.5:
            raise ArgumentError(f"epsilon must lie in [0, 0.5), got {self.epsilon}")
        if self.step_size <= 0:
            raise ArgumentError(f"step_size must be > 0, got {self.step_size}")
        if self.epsilon > 0 and self.step_size > self.epsilon:
            raise ArgumentError(f"step_size {self.step_size} exceeds epsilon {self.epsilon}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ArgumentError("epochs must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class TriggerOptConfig:
    iterations: int = 2000
    batch_size: int = 32
    step_size: float = 12.0
    normalize_by_batch: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 0 or self.batch_size < 1 or self.step_size <= 0:
            raise ArgumentError("iterations must be >= 0, batch_size >= 1 and step_size > 0")


@dataclass(eq=False)
class PerturbationSet:
    ids: np.ndarray     # (M,) int64
    etas: np.ndarray    # (M, H, W, C)
    epsilon: float

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.etas = np.asarray(self.etas, dtype=np.float64)
        if self.etas.ndim != 4 or self.etas.shape[0] != self.ids.shape[0]:
            raise ShapeError(f"{self.ids.shape[0]} ids for etas of shape {self.etas.shape}")
        if len(set(self.ids.tolist())) != self.ids.shape[0]:
            raise ArgumentError("perturbation ids must be unique")
        self.assert_within_budget()

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def assert_within_budget(self) -> None:
        if self.etas.size and float(np.max(np.abs(self.etas))) > self.epsilon:
            raise NumericError(f"perturbation exceeds epsilon={self.epsilon}: max |eta|={np.max(np.abs(self.etas))}")

    def lookup(self, sample_id: int) -> np.ndarray:
        hits = np.nonzero(self.ids == sample_id)[0]
        if hits.size == 0:
            raise ArgumentError(f"no perturbation for sample id {sample_id}")
        return self.etas[hits[0]]


def _as_models(models: HashModel | Sequence[HashModel]) -> list[HashModel]:
    models = [models] if isinstance(models, HashModel) else list(models)
    if not models:
        raise ArgumentError("need at least one model")
    ref = models[0].config
    for m in models[1:]:
        if m.config.code_length != ref.code_length or m.config.input_dims != ref.input_dims:
            raise ArgumentError("ensemble models must share code length and input dims")
    return models


CodeObjective = Callable[[int, np.ndarray], tuple[float, np.ndarray]]


def ensemble_objective(models: Sequence[HashModel], images: np.ndarray,
                       objective: CodeObjective) -> tuple[float, np.ndarray]:
    """
    Model-averaged loss and its gradient w.r.t. the input images.

    Args:
        models: Surrogate models
        images: Batch (B, H, W, C)
        objective: (model index, relaxed codes) -> (loss, dLoss/dcodes)

    Returns:
        Tuple of (mean loss, mean gradient shaped like images)
    """
    total_loss = 0.0
    total_grad = np.zeros_like(images)
    for i, m in enumerate(models):
        codes, tape, _ = m.relaxed_with_tape(images)
        loss, gcodes = objective(i, codes)
        total_grad += backward(tape, gcodes).input.reshape(images.shape)
        total_loss += loss
    return total_loss / len(models), total_grad / len(models)


def _distance_to(codes: np.ndarray, refs: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed relaxed distance sum_i (K - u_i·h_i)/2 and its gradient -h/2."""
    k = codes.shape[-1]
    refs = np.broadcast_to(np.asarray(refs, dtype=np.float64), codes.shape)
    loss = float(np.sum((k - np.sum(codes * refs, axis=-1)) / 2.0))
    return loss, -refs / 2.0


# ===== Trigger generation =====
def target_anchors(models: Sequence[HashModel], train_set: Dataset, target_label: np.ndarray) -> list[AnchorCode]:
    """Anchor code per model, voted over the hash codes of target-class training images."""
    target = np.asarray(target_label)
    in_class = similarity_matrix(train_set.labels, target[None, :])[:, 0] > 0
    if not in_class.any():
        raise ArgumentError(f"target label {target.tolist()} has no training images")
    images = train_set.images[in_class]
    return [anchor_code(hash_forward(m, images)) for m in models]


def trigger_loss(models: Sequence[HashModel], anchors: Sequence[np.ndarray], images: np.ndarray,
                 t: TriggerSpec) -> tuple[float, np.ndarray]:
    """
    Model-averaged sum over the batch of d~H(F'(inject(x, p)), h_a), and its gradient w.r.t. p.
    """
    patched = inject(images, t)
    loss, gx = ensemble_objective(models, patched, lambda i, codes: _distance_to(codes, anchors[i]))
    return loss, (gx * (t.blend * t.mask)).sum(axis=0)


def generate_trigger_with_trace(
    models: HashModel | Sequence[HashModel],
    train_set: Dataset,
    target_label: np.ndarray,
    cfg: TriggerOptConfig,
    t0: TriggerSpec,
) -> tuple[TriggerSpec, list[float]]:
    """
    Optimize a universal adversarial patch that drives patched images toward the target anchor.

    Args:
        models: One surrogate, or several for the ensemble setting
        train_set: Images to sample batches from
        target_label: Multi-hot target label
        cfg: Iterations, batch size, step size
        t0: Initial trigger (mask, location and blend are kept)

    Returns:
        Tuple of (optimized trigger, per-iteration mean distance on the sampled batch)
    """
    models = _as_models(models)
    anchors = [a.code.astype(np.float64) for a in target_anchors(models, train_set, target_label)]
    if cfg.iterations == 0:
        return t0, []
    rng = np.random.default_rng(cfg.seed)
    images = np.asarray(train_set.images, dtype=np.float64)
    n = images.shape[0]
    inside = t0.mask > 0
    t = t0
    trace = []
    for it in tqdm(range(cfg.iterations), desc="trigger", disable=quiet(), leave=False):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        loss, g = trigger_loss(models, anchors, images[idx], t)
        step = cfg.step_size * g / idx.size if cfg.normalize_by_batch else cfg.step_size * g
        pattern = np.where(inside, np.clip(t.pattern - step, 0.0, 1.0), t.pattern)
        t = t.with_pattern(pattern)
        trace.append(loss / idx.size)
        if (it + 1) % 500 == 0:
            debug(f"trigger iteration {it + 1}: mean distance {trace[-1]:.4f}")
    return t, trace


def generate_trigger(models, train_set, target_label, cfg: TriggerOptConfig, t0: TriggerSpec) -> TriggerSpec:
    return generate_trigger_with_trace(models, train_set, target_label, cfg, t0)[0]


# ===== PGD perturbations =====
def _pgd(models: list[HashModel], x: np.ndarray, budget: PerturbationBudget,
         objective: CodeObjective, ascend: bool) -> tuple[np.ndarray, list[float]]:
    eta = np.zeros_like(x)
    sign = 1.0 if ascend else -1.0
    trace = []
    for _ in range(budget.epochs):
        loss, g = ensemble_objective(models, np.clip(x + eta, 0.0, 1.0), objective)
        trace.append(loss)
        eta = np.clip(eta + sign * budget.step_size * np.sign(g), -budget.epsilon, budget.epsilon)
    trace.append(ensemble_objective(models, np.clip(x + eta, 0.0, 1.0), objective)[0])
    return eta, trace


def _batched(x: np.ndarray, dims: tuple[int, int, int]) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == dims:
        return x[None], False
    if x.ndim == 4 and x.shape[1:] == dims:
        return x, True
    raise ShapeError(f"image shape {x.shape} does not match model input {dims}")


def adversarial_perturbation_with_trace(model: HashModel | Sequence[HashModel], x: np.ndarray,
                                        budget: PerturbationBudget) -> tuple[np.ndarray, list[float]]:
    """PGD ascent on d~H(F'(x + eta), F(x)); returns (eta, distance trace)."""
    models = _as_models(model)
    xb, batched = _batched(x, models[0].config.input_dims)
    refs = [hash_forward(m, xb).astype(np.float64) for m in models]
    eta, trace = _pgd(models, xb, budget, lambda i, codes: _distance_to(codes, refs[i]), ascend=True)
    return (eta if batched else eta[0]), trace


def adversarial_perturbation(model, x: np.ndarray, budget: PerturbationBudget) -> np.ndarray:
    return adversarial_perturbation_with_trace(model, x, budget)[0]


def targeted_perturbation_with_trace(model: HashModel | Sequence[HashModel], x: np.ndarray,
                                     h_a: AnchorCode | np.ndarray,
                                     budget: PerturbationBudget) -> tuple[np.ndarray, list[float]]:
    """PGD descent on d~H(F'(x + eta), h_a); returns (eta, distance trace)."""
    models = _as_models(model)
    code = h_a.code if isinstance(h_a, AnchorCode) else np.asarray(h_a)
    if code.shape != (models[0].code_length,):
        raise ShapeError(f"anchor length {code.shape} does not match K={models[0].code_length}")
    xb, batched = _batched(x, models[0].config.input_dims)
    ref = code.astype(np.float64)
    eta, trace = _pgd(models, xb, budget, lambda i, codes: _distance_to(codes, ref), ascend=False)
    return (eta if batched else eta[0]), trace


def targeted_perturbation(model, x: np.ndarray, h_a, budget: PerturbationBudget) -> np.ndarray:
    return targeted_perturbation_with_trace(model, x, h_a, budget)[0]


# ===== Confusing perturbations =====
def confusing_loss(codes: np.ndarray) -> tuple[float, np.ndarray]:
    """
    Mean relaxed Hamming distance over ordered pairs i != j.

    L_c = 1/(M(M-1)) sum_i sum_{j!=i} (K - u_i·u_j)/2

    Returns:
        Tuple of (L_c, dL_c/dcodes)
    """
    u = np.asarray(codes, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] < 2:
        raise ArgumentError(f"confusing loss needs at least 2 codes, got shape {u.shape}")
    m, k = u.shape
    total = u.sum(axis=0)
    cross = float(total @ total - np.sum(u * u))
    norm = m * (m - 1)
    value = (norm * k - cross) / (2.0 * norm)
    grad = -(total[None, :] - u) / norm
    return value, grad


def confusing_objective(codes: np.ndarray, refs: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    """lam * L_c + (1 - lam) * mean_i d~H(u_i, F(x_i)); L_c counts as 0 for a single code."""
    m = codes.shape[0]
    adv_loss, adv_grad = _distance_to(codes, refs)
    scale = (1.0 - lam) * (1.0 / m)
    loss = scale * adv_loss
    grad = scale * adv_grad
    if lam > 0 and m >= 2:
        c_loss, c_grad = confusing_loss(codes)
        loss += lam * c_loss
        grad = grad + lam * c_grad
    return loss, grad


def confusing_perturbations(
    models: HashModel | Sequence[HashModel],
    targets: Sequence[tuple[int, np.ndarray]],
    lam: float,
    budget: PerturbationBudget,
    seed: int = 0,
) -> PerturbationSet:
    """
    Perturbations that scatter target-class codes in Hamming space while pushing each from its own code.

    Args:
        models: Surrogate model(s); losses are averaged across them
        targets: (sample id, image) pairs, all from the target class
        lam: Weight of the dispersion term, in [0, 1]
        budget: epsilon, PGD step, epochs and batch size
        seed: Batch shuffling seed

    Returns:
        PerturbationSet aligned with the target ids
    """
    models = _as_models(models)
    if not targets:
        raise ArgumentError("confusing_perturbations needs at least one target image")
    if not 0.0 <= lam <= 1.0:
        raise ArgumentError(f"lambda must lie in [0, 1], got {lam}")
    ids = np.array([int(i) for i, _ in targets], dtype=np.int64)
    x = np.stack([np.asarray(img, dtype=np.float64) for _, img in targets])
    refs = [hash_forward(m, x).astype(np.float64) for m in models]
    eta = np.zeros_like(x)
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    for epoch in tqdm(range(budget.epochs), desc="perturb", disable=quiet(), leave=False):
        order = rng.permutation(n)
        for start in range(0, n, budget.batch_size):
            idx = order[start:start + budget.batch_size]
            loss, g = ensemble_objective(
                models, np.clip(x[idx] + eta[idx], 0.0, 1.0),
                lambda i, codes: confusing_objective(codes, refs[i][idx], lam))
            eta[idx] = np.clip(eta[idx] + budget.step_size * np.sign(g), -budget.epsilon, budget.epsilon)
        debug(f"confusing epoch {epoch + 1}/{budget.epochs}: last batch objective {loss:.4f}")
    return PerturbationSet(ids, eta, budget.epsilon)


def adversarial_perturbation_set(models, targets: Sequence[tuple[int, np.ndarray]],
                                 budget: PerturbationBudget) -> PerturbationSet:
    ids = np.array([int(i) for i, _ in targets], dtype=np.int64)
    x = np.stack([np.asarray(img, dtype=np.float64) for _, img in targets])
    return PerturbationSet(ids, adversarial_perturbation(models, x, budget), budget.epsilon)


def uniform_noise_perturbations(ids: Sequence[int], dims: tuple[int, int, int],
                                epsilon: float, seed: int) -> PerturbationSet:
    """Noise drawn from U(-epsilon, epsilon) independently per image and pixel."""
    rng = np.random.default_rng(seed)
    ids = np.asarray(ids, dtype=np.int64)
    etas = rng.uniform(-epsilon, epsilon, size=(ids.shape[0], *dims))
    return PerturbationSet(ids, etas, epsilon)


# ===== Files =====
def save_trigger(t: TriggerSpec, path: str | os.PathLike) -> None:
    header = {"size": t.size, "location": t.location, "blend": t.blend, "dims": list(t.dims)}
    write_artifact(path, TRIGGER_MAGIC, header, [t.pattern])


def load_trigger(path: str | os.PathLike) -> TriggerSpec:
    header, arrays = read_artifact(path, TRIGGER_MAGIC)
    try:
        dims = tuple(int(d) for d in header["dims"])
        mask = square_mask(dims, int(header["size"]), header["location"])
        return TriggerSpec(arrays[0].reshape(dims), mask, int(header["size"]), header["location"], float(header["blend"]))
    except (KeyError, IndexError, ValueError) as e:
        raise FormatError(f"{path}: bad trigger file ({e})") from e


def save_perturbations(ps: PerturbationSet, path: str | os.PathLike) -> None:
    write_artifact(path, PERTURBATION_MAGIC, {"epsilon": ps.epsilon, "ids": ps.ids.tolist()}, [ps.etas])


def load_perturbations(path: str | os.PathLike) -> PerturbationSet:
    header, arrays = read_artifact(path, PERTURBATION_MAGIC)
    try:
        return PerturbationSet(np.array(header["ids"], dtype=np.int64), arrays[0], float(header["epsilon"]))
    except (KeyError, IndexError, ValueError) as e:
        raise FormatError(f"{path}: bad perturbation file ({e})") from e
