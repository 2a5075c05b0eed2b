"""Test-time objectives: marginal entropy, prototype discrimination, prototype alignment.

All losses are built from tape operations, so they differentiate into the
prompts through whatever produced their inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .prototypes import PrototypeBank
from .tensor import Tensor

VARIANTS = ("full", "amp_only", "ang_only", "sub", "sum_exp")


@dataclass(frozen=True)
class LossConfig:
    tau_contrast: float = 0.07
    rho: float = 0.10
    eps_amp: float = 1e-8
    eps_ang: float = 1e-8
    variant: str = "full"
    w_ent: float = 1.0
    w_align: float = 1.0
    align_use_cls: bool = False

    def __post_init__(self):
        if not self.tau_contrast > 0:
            raise ConfigError("tau_contrast must be positive")
        if not 0 < self.rho <= 1:
            raise ConfigError("rho must lie in (0, 1]")
        for name in ("eps_amp", "eps_ang"):
            if not 0 < getattr(self, name) <= 1e-3:
                raise ConfigError(f"{name} must lie in (0, 1e-3]")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown alignment variant {self.variant!r}; choose from {VARIANTS}")
        if self.w_ent < 0 or self.w_align < 0:
            raise ConfigError("loss weights must be non-negative")


def _check_probability(p: np.ndarray, what: str = "p") -> None:
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InputError(f"{what} has negative or non-finite entries")
    if abs(float(np.sum(p)) - 1.0) > 1e-6:
        raise InputError(f"{what} does not sum to 1")


def entropy_loss(p) -> Tensor:
    """Shannon entropy ``-sum p log p`` of a probability vector, with ``0 log 0 = 0``."""
    p = T.as_tensor(p)
    _check_probability(p.data)
    return -T.tensor_sum(T.xlogx(p))


def entropies(probs: np.ndarray) -> np.ndarray:
    """Row-wise entropies of a ``[N, C]`` probability array (no tape)."""
    safe = np.where(probs > 0, probs, 1.0)
    return -np.sum(np.where(probs > 0, probs * np.log(safe), 0.0), axis=-1)


def filter_count(rho: float, n_views: int) -> int:
    # guard against 0.1 * 130 = 13.000000000000002 style representation noise
    return int(math.floor(rho * n_views + 1e-9))


@dataclass
class FilteredSet:
    """Original sample plus the most confident views.

    ``members`` holds view indices with ``-1`` for the original sample, ordered
    original first, then by ascending entropy (ties: lower view index).
    """

    members: np.ndarray
    member_probs: np.ndarray
    mean_probs: np.ndarray

    def __len__(self) -> int:
        return len(self.members)


def confidence_filter(original_probs, view_probs, rho: float) -> FilteredSet:
    """Keep the ``floor(rho * n_views)`` lowest-entropy views and the original sample."""
    original = np.asarray(original_probs, dtype=np.float64).reshape(-1)
    views = np.asarray(view_probs, dtype=np.float64).reshape(-1, original.size) if np.size(view_probs) \
        else np.zeros((0, original.size))
    _check_probability(original, "original probabilities")
    for row in views:
        _check_probability(row, "view probabilities")
    k = filter_count(rho, len(views))
    order = np.lexsort((np.arange(len(views)), entropies(views)))[:k] if k else np.zeros(0, dtype=int)
    members = np.concatenate([[-1], order]).astype(np.int64)
    member_probs = np.concatenate([original[None], views[order]], axis=0)
    return FilteredSet(members, member_probs, member_probs.mean(axis=0))


def _contrast_terms(h: Tensor, h_aug: Tensor, tau: float) -> Tensor:
    """Per-class ``log L_neg - log L_pos`` for one branch; ``h`` ``[C, D]``, ``h_aug`` ``[C, A, D]``."""
    C, A, _ = h_aug.shape
    off_diag = Tensor._wrap(1.0 - np.eye(C))
    # positives: original vs its own augmented prototypes
    pos = T.mean(T.exp(T.cosine_similarity(T.reshape(h, (C, 1, -1)), h_aug) / tau), axis=1)
    # negatives, three kinds, all over c != c_k and averaged over augmentation slots
    hh = T.exp(T.cosine_similarity(T.reshape(h, (C, 1, -1)), T.reshape(h, (1, C, -1))) / tau)
    aug_h = T.exp(T.cosine_similarity(T.reshape(h_aug, (C, A, 1, -1)), T.reshape(h, (1, 1, C, -1))) / tau)
    h_augc = T.exp(T.cosine_similarity(T.reshape(h, (C, 1, 1, -1)),
                                       T.reshape(T.transpose(h_aug, (1, 0, 2)), (1, A, C, -1))) / tau)
    per_aug = T.reshape(hh, (C, 1, C)) + aug_h + h_augc            # [C, A, C]
    neg = T.mean(T.tensor_sum(per_aug * T.reshape(off_diag, (C, 1, C)), axis=2), axis=1)
    return T.log(neg) - T.log(pos)


def branch_sets(bank: PrototypeBank) -> list[tuple[Tensor, Tensor]]:
    """(class, augmented) prototype sets for the text and visual branches.

    The visual prototype of a class is its patch-token prototype concatenated with
    its CLS prototype.
    """
    visual = T.concat([bank.h_v, bank.h_cls_v], axis=-1)
    visual_aug = T.concat([bank.h_v_aug, bank.h_cls_v_aug], axis=-1)
    return [(bank.h_t, bank.h_t_aug), (visual, visual_aug)]


def discriminating_loss(bank: PrototypeBank, cfg: LossConfig = LossConfig()) -> Tensor:
    """Contrastive loss pulling each class prototype to its augmented prototypes, pushing other classes."""
    C = bank.class_count
    if C < 2:
        raise InputError("discriminating loss needs at least two classes")
    sets = branch_sets(bank)
    total = None
    for h, h_aug in sets:
        term = T.tensor_sum(_contrast_terms(h, h_aug, cfg.tau_contrast))
        total = term if total is None else total + term
    return total / (len(sets) * C)


def alignment_terms(members_t: Tensor, members_v: Tensor, bank: PrototypeBank, mean_probs,
                    members_cls: Tensor | None = None, use_cls: bool = False) -> tuple[Tensor, Tensor]:
    """Probability-weighted squared distance and cosine to class prototypes, per member.

    Returns ``(amp, ang)``, each ``[F]``, summed over branches.
    """
    p = T.as_tensor(mean_probs)
    if np.any(p.data < 0):
        raise InputError("mean probabilities have a negative entry")
    pairs = [(members_t, bank.h_t), (members_v, bank.h_v)]
    if use_cls:
        if members_cls is None:
            raise InputError("CLS alignment requested without member CLS features")
        pairs.append((members_cls, bank.h_cls_v))
    amp = ang = None
    for x, proto in pairs:
        F, d = x.shape
        C = proto.shape[0]
        xb = T.reshape(x, (F, 1, d))
        pb = T.reshape(proto, (1, C, d))
        dist = T.tensor_sum(T.squared_norm(xb - pb) * p, axis=1)
        sim = T.tensor_sum(T.cosine_similarity(xb, pb) * p, axis=1)
        amp = dist if amp is None else amp + dist
        ang = sim if ang is None else ang + sim
    return amp, ang


def alignment_loss(members_t: Tensor, members_v: Tensor, bank: PrototypeBank, mean_probs,
                   cfg: LossConfig = LossConfig(), members_cls: Tensor | None = None) -> Tensor:
    """Prototype alignment of the filtered members; ``cfg.variant`` picks the combination rule."""
    amp, ang = alignment_terms(members_t, members_v, bank, mean_probs, members_cls, cfg.align_use_cls)
    v = cfg.variant
    if v == "full":
        per = T.log(T.maximum(amp, cfg.eps_amp)) - T.log(T.maximum(ang, cfg.eps_ang))
    elif v == "amp_only":
        per = T.log(T.maximum(amp, cfg.eps_amp))
    elif v == "ang_only":
        per = -T.log(T.maximum(ang, cfg.eps_ang))
    elif v == "sub":
        per = amp - ang
    else:  # sum_exp
        per = T.exp(amp) + T.exp(1.0 / T.maximum(ang, cfg.eps_ang))
    return T.mean(per)


def combined_objective(mean_probs, alignment: Tensor | None, cfg: LossConfig = LossConfig()) -> Tensor:
    """``w_ent * entropy(mean_probs) + w_align * alignment``; zero-weight terms are skipped."""
    total = T.as_tensor(0.0)
    if cfg.w_ent:
        total = total + cfg.w_ent * entropy_loss(mean_probs)
    if cfg.w_align:
        if alignment is None:
            raise InputError("alignment weight is non-zero but no alignment loss was given")
        total = total + cfg.w_align * alignment
    return total
