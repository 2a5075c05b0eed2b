"""Sample and class prototypes on both branches, the proxy source cache, and bank files.

A sample prototype is the mean of final-layer token features over the prompt
and content tokens (SOS, EOS and CLS excluded). A class prototype is the mean
of sample prototypes over the class. Augmented class prototypes are kept per
augmentation slot ``a``: the mean over the class of every sample's ``a``-th view.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import ViewSpec, generate_views, mask_prompt_tokens
from .encoders import DualEncoder, PromptState, TokenOutputs
from .errors import FormatError, InputError, StalenessError
from .tensor import Tensor

BANK_MAGIC = b"PSPB"
BANK_VERSION = 1


@dataclass
class SamplePrototype:
    h_t: Tensor
    h_v: Tensor
    h_cls_v: Tensor


def token_prototype(outputs: TokenOutputs) -> Tensor:
    """Mean token feature over prompt and content positions, ``[B, d]``."""
    idx = outputs.prototype_index
    if idx.size == 0:
        raise InputError("no prompt or content tokens to average")
    lo, hi = int(idx[0]), int(idx[-1]) + 1
    if hi - lo == idx.size:
        return T.mean(outputs.tokens[:, lo:hi], axis=1)
    return T.mean(outputs.tokens[:, idx], axis=1)


def sample_prototype(text: TokenOutputs, visual: TokenOutputs) -> SamplePrototype:
    if visual.cls_feature is None:
        raise InputError("visual outputs carry no CLS feature")
    return SamplePrototype(token_prototype(text), token_prototype(visual), visual.cls_feature)


@dataclass
class ProxyCache:
    """Raw proxy-source samples per class and their pre-generated views.

    ``images`` is ``[C, K, M, dp]``; ``views`` is ``[C, K, A, M, dp]`` with
    matching ``view_masks`` ``[C, K, A]`` and ``view_templates`` ``[C, K, A, L]``.
    """

    images: np.ndarray
    views: np.ndarray
    view_masks: np.ndarray
    view_templates: np.ndarray
    template: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] < 1:
            raise InputError("proxy cache needs at least one sample per class")
        C, K = self.images.shape[:2]
        if self.views.shape[:2] != (C, K):
            raise InputError("views do not match the proxy samples")

    @property
    def class_count(self) -> int:
        return self.images.shape[0]

    @property
    def samples_per_class(self) -> int:
        return self.images.shape[1]

    @property
    def views_per_sample(self) -> int:
        return self.views.shape[2]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.images, self.views, self.view_masks, self.view_templates, self.template):
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        np.savez(path, images=self.images, views=self.views, view_masks=self.view_masks,
                 view_templates=self.view_templates, template=self.template)

    @classmethod
    def load(cls, path) -> "ProxyCache":
        with np.load(path) as z:
            return cls(**{k: z[k] for k in ("images", "views", "view_masks", "view_templates", "template")})


def build_proxy_cache(images_by_class, template, spec: ViewSpec, background=None,
                      synonym_table=None, n_prompt_tokens: int = 2) -> ProxyCache:
    """Pre-generate ``spec.n_views`` views for each of the K samples of each class.

    Views are fixed here once; later prototype computations reuse them.
    """
    images = np.asarray(images_by_class, dtype=np.float64)
    C, K = images.shape[:2]
    if K < 1:
        raise InputError("each class needs at least one proxy sample")
    A = spec.n_views
    template = np.asarray(template, dtype=np.int64)
    views = np.empty((C, K, A) + images.shape[2:])
    masks = np.full((C, K, A), -1, dtype=np.int64)
    templates = np.empty((C, K, A, template.size), dtype=np.int64)
    for c in range(C):
        for k in range(K):
            seed = (spec.seed * 1_000_003 + c * 1009 + k) & 0x7FFFFFFFFFFFFFFF
            sub = replace(spec, seed=seed)
            vs = generate_views(images[c, k], sub, background, template, synonym_table)
            vs = mask_prompt_tokens(vs, spec.prompt_mask_fraction, seed, n_prompt_tokens)
            for a, v in enumerate(vs):
                views[c, k, a] = v.image
                masks[c, k, a] = v.mask_index
                templates[c, k, a] = v.template if v.template is not None else template
    return ProxyCache(images, views, masks, templates, template)


@dataclass
class PrototypeBank:
    """Per-class prototypes: ``h_*`` are ``[C, d]``, ``h_*_aug`` are ``[C, A, d]``."""

    h_t: Tensor
    h_v: Tensor
    h_cls_v: Tensor
    h_t_aug: Tensor
    h_v_aug: Tensor
    h_cls_v_aug: Tensor
    proxy_hash: str = ""
    prompt_hash: str = ""
    views_per_sample: int = 0

    FIELDS = ("h_t", "h_v", "h_cls_v", "h_t_aug", "h_v_aug", "h_cls_v_aug")

    @property
    def class_count(self) -> int:
        return self.h_t.shape[0]

    def detach(self) -> "PrototypeBank":
        return PrototypeBank(*(getattr(self, f).detach() for f in self.FIELDS),
                             self.proxy_hash, self.prompt_hash, self.views_per_sample)

    def arrays(self) -> dict[str, np.ndarray]:
        return {f: getattr(self, f).data for f in self.FIELDS}

    def equals(self, other: "PrototypeBank") -> bool:
        return (all(np.array_equal(getattr(self, f).data, getattr(other, f).data) for f in self.FIELDS)
                and (self.proxy_hash, self.prompt_hash, self.views_per_sample)
                == (other.proxy_hash, other.prompt_hash, other.views_per_sample))


def class_prototypes(encoder: DualEncoder, cache: ProxyCache, prompts: PromptState) -> PrototypeBank:
    """Class and augmented-class prototypes under ``prompts``.

    Differentiable with respect to the prompts when called inside a tape with
    leaf prompts, since everything is recomputed from the cached raw inputs.
    """
    C, K, A = cache.class_count, cache.samples_per_class, cache.views_per_sample
    M, dp = cache.images.shape[2:]
    d = encoder.cfg.embed_dim
    if C != encoder.cfg.class_count:
        raise InputError(f"cache has {C} classes, encoder expects {encoder.cfg.class_count}")
    classes = np.arange(C)

    vis = encoder.encode_image(cache.images.reshape(C * K, M, dp), prompts)
    h_v = T.mean(T.reshape(token_prototype(vis), (C, K, d)), axis=1)
    h_cls = T.mean(T.reshape(vis.cls_feature, (C, K, d)), axis=1)
    # every original sample of a class shares the base template, so one text pass per class
    txt = encoder.encode_templates(np.repeat(cache.template[None], C, axis=0), classes, prompts)
    h_t = token_prototype(txt)

    if A == 0:
        raise InputError("proxy cache holds no augmented views")
    vis_aug = encoder.encode_image(cache.views.reshape(C * K * A, M, dp), prompts,
                                   mask_index=cache.view_masks.reshape(-1))
    h_v_aug = T.mean(T.reshape(token_prototype(vis_aug), (C, K, A, d)), axis=1)
    h_cls_aug = T.mean(T.reshape(vis_aug.cls_feature, (C, K, A, d)), axis=1)
    txt_aug = encoder.encode_templates(cache.view_templates.reshape(C * K * A, -1),
                                       np.repeat(classes, K * A), prompts,
                                       mask_index=cache.view_masks.reshape(-1))
    h_t_aug = T.mean(T.reshape(token_prototype(txt_aug), (C, K, A, d)), axis=1)
    return PrototypeBank(h_t, h_v, h_cls, h_t_aug, h_v_aug, h_cls_aug,
                         cache.digest(), prompts.digest(), A)


# bank file


def save_bank(bank: PrototypeBank, path) -> None:
    C, A, d = bank.h_t_aug.shape
    with open(path, "wb") as f:
        f.write(BANK_MAGIC)
        f.write(struct.pack("<BIII", BANK_VERSION, C, d, A))
        f.write(bytes.fromhex(bank.proxy_hash or "0" * 64))
        f.write(bytes.fromhex(bank.prompt_hash or "0" * 64))
        f.write(struct.pack("<I", bank.views_per_sample))
        for c in range(C):
            for name in bank.FIELDS:
                f.write(np.ascontiguousarray(getattr(bank, name).data[c], dtype="<f8").tobytes())


def load_bank(path, class_count: int | None = None, proxy_hash: str | None = None,
              prompt_hash: str | None = None) -> PrototypeBank:
    """Read a bank file; any given expectation that differs raises :class:`StalenessError`."""
    raw = Path(path).read_bytes()
    if raw[:4] != BANK_MAGIC:
        raise FormatError(f"{path}: not a prototype bank file")
    head = struct.calcsize("<BIII")
    if len(raw) < 4 + head + 68:
        raise FormatError(f"{path}: truncated header")
    version, C, d, A = struct.unpack_from("<BIII", raw, 4)
    if version != BANK_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 4 + head
    p_hash, q_hash = raw[off:off + 32].hex(), raw[off + 32:off + 64].hex()
    (vps,) = struct.unpack_from("<I", raw, off + 64)
    off += 68
    per_class = 3 * d + 3 * A * d
    if len(raw) != off + 8 * C * per_class:
        raise FormatError(f"{path}: payload size does not match header")
    data = np.frombuffer(raw, dtype="<f8", offset=off).reshape(C, per_class).astype(np.float64)
    cuts = np.cumsum([d, d, d, A * d, A * d])
    parts = np.split(data, cuts, axis=1)
    shapes = [(C, d)] * 3 + [(C, A, d)] * 3
    bank = PrototypeBank(*(Tensor(p.reshape(s)) for p, s in zip(parts, shapes)), p_hash, q_hash, vps)
    if class_count is not None and C != class_count:
        raise StalenessError(f"{path}: bank has {C} classes, expected {class_count}")
    if proxy_hash is not None and p_hash != proxy_hash:
        raise StalenessError(f"{path}: bank was built from a different proxy cache")
    if prompt_hash is not None and q_hash != prompt_hash:
        raise StalenessError(f"{path}: bank was built under different prompts")
    return bank
