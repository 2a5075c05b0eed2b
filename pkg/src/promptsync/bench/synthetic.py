"""Synthetic labelled patch-grid data, supervised calibration of the frozen encoder, and domain shifts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..adapt import AdamW
from ..augment import grid_side
from ..encoders import DualEncoder, EncoderConfig, PromptState
from ..errors import ConfigError

SHIFT_KINDS = ("rotation", "bias", "noise", "shuffle")


@dataclass(frozen=True)
class SyntheticSpec:
    class_count: int = 10
    variance_multipliers: tuple | None = None
    samples_per_class: int = 16
    holdout_per_class: int = 20
    patch_count: int = 16
    patch_dim: int = 16
    signal: float = 1.5
    noise_std: float = 0.5
    background_std: float = 0.2
    object_size: int = 3
    identical_classes: bool = False
    seed: int = 0

    def multipliers(self) -> np.ndarray:
        if self.variance_multipliers is None:
            # geometric spread from 0.5x to 4x: max/min ratio of 8
            return np.geomspace(0.5, 4.0, self.class_count)
        m = np.asarray(self.variance_multipliers, dtype=np.float64)
        if m.shape != (self.class_count,):
            raise ConfigError("need one variance multiplier per class")
        return m

    def validate(self) -> None:
        m = self.multipliers()
        if np.any(m <= 0):
            raise ConfigError("variance multipliers must be positive")
        if m.max() / m.min() < 4.0:
            raise ConfigError("variance multipliers need a pair with ratio >= 4")
        grid_side(self.patch_count)


@dataclass
class ClassGenerators:
    means: np.ndarray            # [C, M, dp]
    object_mask: np.ndarray      # [C, M] bool
    stds: np.ndarray             # [C]
    background: np.ndarray       # [M, dp], shared low-energy background sample
    spec: SyntheticSpec = field(repr=False)

    def sample(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        s = self.spec
        labels = np.asarray(labels, dtype=np.int64)
        noise = rng.normal(size=(labels.size, s.patch_count, s.patch_dim))
        obj = self.object_mask[labels][:, :, None]
        scale = np.where(obj, self.stds[labels][:, None, None], s.background_std)
        return self.means[labels] + scale * noise


def make_generators(spec: SyntheticSpec) -> ClassGenerators:
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0x5EED])
    C, M, dp = spec.class_count, spec.patch_count, spec.patch_dim
    g = grid_side(M)
    k = min(spec.object_size, g)
    background = rng.normal(0.0, spec.background_std, size=(M, dp))
    means = np.broadcast_to(background, (C, M, dp)).copy()
    mask = np.zeros((C, M), dtype=bool)
    protos = rng.normal(size=(C, dp))
    if spec.identical_classes:
        protos[:] = protos[0]
    for c in range(C):
        top, left = rng.integers(0, g - k + 1, size=2)
        if spec.identical_classes:
            top, left = (g - k) // 2, (g - k) // 2
        for i in range(top, top + k):
            for j in range(left, left + k):
                idx = i * g + j
                mask[c, idx] = True
                means[c, idx] = spec.signal * protos[c]
    stds = spec.noise_std * np.sqrt(spec.multipliers())
    return ClassGenerators(means, mask, stds, background, spec)


@dataclass
class Dataset:
    images: np.ndarray   # [N, M, dp]
    labels: np.ndarray   # [N]

    def __len__(self) -> int:
        return len(self.labels)

    def tobytes(self) -> bytes:
        return self.images.tobytes() + self.labels.tobytes()


def balanced_labels(class_count: int, per_class: int) -> np.ndarray:
    return np.repeat(np.arange(class_count), per_class)


def draw(gens: ClassGenerators, per_class: int, stream: int) -> Dataset:
    rng = np.random.default_rng([gens.spec.seed, stream])
    labels = balanced_labels(gens.spec.class_count, per_class)
    return Dataset(gens.sample(labels, rng), labels)


# calibration ("pretraining" of the frozen encoder)


@dataclass
class SourceModel:
    encoder: DualEncoder
    prompts: PromptState
    generators: ClassGenerators
    train: Dataset
    holdout: Dataset
    holdout_accuracy: float
    calibration_trace: list


def calibrate(encoder: DualEncoder, prompts: PromptState, data: Dataset, steps: int = 100,
              lr: float = 0.1, fit_prompts: bool = True) -> tuple[DualEncoder, PromptState, list]:
    """Fit the class token embeddings (and optionally the prompts) by cross-entropy on ``data``."""
    weights = dict(encoder.weight_arrays())
    cls_emb = T.Tensor(weights["text.class_embedding"], requires_grad=True)
    onehot = np.eye(encoder.cfg.class_count)[data.labels]
    opt = AdamW(lr, weight_decay=0.0)
    trace = []
    for _ in range(steps):
        leaves = prompts.leaves(tune_coupling=True) if fit_prompts else prompts.detach()
        encoder.w["text.class_embedding"] = cls_emb
        with T.Tape() as tape:
            probs = encoder.predict_probs(data.images, leaves)
            loss = -T.mean(T.tensor_sum(T.log(T.maximum(probs, 1e-12)) * onehot, axis=1))
        grads = T.backward(loss, tape)
        trace.append(float(loss.data))
        params = [cls_emb] + (leaves.params() if fit_prompts else [])
        new = opt.step([p.data for p in params], [grads.get(p, np.zeros(p.shape)) for p in params])
        cls_emb = T.Tensor(new[0], requires_grad=True)
        if fit_prompts:
            prompts = PromptState.from_arrays(new[1], new[2])
    weights["text.class_embedding"] = cls_emb.data.copy()
    return DualEncoder(encoder.cfg, weights), prompts, trace


def accuracy(encoder: DualEncoder, prompts: PromptState, data: Dataset, batch: int = 256) -> float:
    preds = []
    for i in range(0, len(data), batch):
        preds.append(np.argmax(encoder.predict_probs(data.images[i:i + batch], prompts).data, axis=1))
    return float(np.mean(np.concatenate(preds) == data.labels)) if len(data) else float("nan")


def generate_source(spec: SyntheticSpec, encoder_cfg: EncoderConfig, steps: int = 100, lr: float = 0.1,
                    min_accuracy: float = 0.9, fit_prompts: bool = True, check: bool = True) -> SourceModel:
    """Labelled source data plus an encoder calibrated on it, then frozen.

    Raises :class:`ConfigError` when the held-out zero-shot accuracy stays below
    ``min_accuracy`` (unless ``check`` is false).
    """
    if encoder_cfg.class_count != spec.class_count or encoder_cfg.patch_count != spec.patch_count \
            or encoder_cfg.patch_dim != spec.patch_dim:
        raise ConfigError("encoder config does not match the synthetic spec")
    gens = make_generators(spec)
    train = draw(gens, spec.samples_per_class, 1)
    holdout = draw(gens, spec.holdout_per_class, 2)
    encoder = DualEncoder(encoder_cfg)
    prompts = PromptState.initial(encoder_cfg)
    encoder, prompts, trace = calibrate(encoder, prompts, train, steps, lr, fit_prompts)
    acc = accuracy(encoder, prompts, holdout)
    if check and acc < min_accuracy:
        raise ConfigError(
            f"calibration reached {acc:.3f} held-out zero-shot accuracy (< {min_accuracy}); "
            f"final training loss {trace[-1]:.4f} after {steps} steps. Lower noise_std or raise steps.")
    return SourceModel(encoder, prompts, gens, train, holdout, acc, trace)


# domain shifts


@dataclass(frozen=True)
class ShiftSpec:
    kind: str = "bias"
    magnitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ConfigError(f"unknown shift kind {self.kind!r}; choose from {SHIFT_KINDS}")
        if self.magnitude < 0:
            raise ConfigError("shift magnitude must be non-negative")


def rotation_matrix(dim: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal map rotating ``dim // 2`` random planes by ``angle`` radians."""
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    blocks = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, dim - 1, 2):
        blocks[i:i + 2, i:i + 2] = [[c, -s], [s, c]]
    return q @ blocks @ q.T


def apply_shift(data: Dataset, shift: ShiftSpec) -> Dataset:
    """Deterministic domain shift; magnitude 0 returns the data unchanged."""
    if shift.magnitude == 0:
        return Dataset(data.images.copy(), data.labels.copy())
    rng = np.random.default_rng([shift.seed, SHIFT_KINDS.index(shift.kind), 0xD0])
    x = data.images
    N, M, dp = x.shape
    if shift.kind == "rotation":
        out = x @ rotation_matrix(dp, shift.magnitude, rng).T
    elif shift.kind == "bias":
        direction = rng.normal(size=dp)
        out = x + shift.magnitude * direction / np.linalg.norm(direction)
    elif shift.kind == "noise":
        std = x.std(axis=0, keepdims=True)
        out = x + shift.magnitude * std * rng.normal(size=x.shape)
    else:
        out = x.copy()
        count = int(round(min(shift.magnitude, 1.0) * M))
        for n in range(N):
            moved = rng.choice(M, size=count, replace=False)
            out[n, moved] = x[n, rng.permutation(moved)]
    return Dataset(out, data.labels.copy())
