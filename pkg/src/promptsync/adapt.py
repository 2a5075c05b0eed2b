"""Per-sample test-time adaptation: meta-train on the proxy source, meta-test on the test views.

One episode:

1. meta-train: ``meta_train_steps`` AdamW steps on the discriminating loss,
   ``p -> p_hat`` (skipped in ``star`` mode, where ``p_hat`` is restored).
2. meta-test, ``n`` times: fresh views, confidence filter under ``p_hat``,
   gradient of ``w_ent * L_ent + w_align * L_A`` evaluated at ``p_hat``.
3. one AdamW step on ``p`` with the mean of the ``n`` gradients (first order:
   no derivative through step 1).

Every episode starts from the same initial prompts; nothing carries over.
"""
from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import ViewSpec, generate_views, mask_prompt_tokens, stack_views
from .encoders import DualEncoder, PromptState
from .errors import ConfigError, FormatError, StalenessError
from .losses import (LossConfig, alignment_loss, combined_objective, confidence_filter,
                     discriminating_loss, FilteredSet)
from .prototypes import PrototypeBank, ProxyCache, class_prototypes, token_prototype

PROMPT_MAGIC = b"PSPT"
PROMPT_VERSION = 1


@dataclass(frozen=True)
class AdaptationConfig:
    n: int = 1
    lr: float = 0.04
    lr_fine_grained: float = 5e-4
    fine_grained: bool = False
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    views: ViewSpec = field(default_factory=ViewSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    meta_train_steps: int = 1
    mode: str = "full"
    tune_coupling: bool = True
    use_meta_train: bool = True
    keep_meta_train_update: bool = False
    bank_mode: str = "recompute"
    predict_from: str = "original"

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("n must be at least 1")
        if self.lr < 0 or self.lr_fine_grained < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.meta_train_steps < 0:
            raise ConfigError("meta_train_steps must be non-negative")
        if self.mode not in ("full", "star"):
            raise ConfigError("mode must be 'full' or 'star'")
        if self.bank_mode not in ("recompute", "frozen"):
            raise ConfigError("bank_mode must be 'recompute' or 'frozen'")
        if self.predict_from not in ("original", "filtered"):
            raise ConfigError("predict_from must be 'original' or 'filtered'")

    @property
    def step_size(self) -> float:
        return self.lr_fine_grained if self.fine_grained else self.lr

    def digest(self) -> str:
        return hashlib.sha256(repr(asdict(self)).encode()).hexdigest()


@dataclass
class EpisodeResult:
    prediction: int
    probs: np.ndarray
    loss_trace: list
    backward_passes: int
    wall_clock: float
    members: np.ndarray
    p_hat_digest: str
    final_prompts: PromptState = field(repr=False, default=None)


class AdamW:
    """Decoupled-weight-decay Adam over a list of numpy parameters."""

    def __init__(self, lr, betas=(0.9, 0.999), weight_decay=0.01, eps=1e-8):
        self.lr, self.betas, self.wd, self.eps = lr, betas, weight_decay, eps
        self.t = 0
        self.m = self.v = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        b1, b2 = self.betas
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            out.append(p - self.lr * self.wd * p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


def _apply(prompts: PromptState, new: list[np.ndarray], tune_coupling: bool) -> PromptState:
    coupling = new[1] if tune_coupling else prompts.coupling.data
    return PromptState.from_arrays(new[0], coupling)


class TestTimeAdapter:
    """Runs adaptation episodes against one frozen encoder and one proxy cache."""

    __test__ = False  # keep pytest from collecting this as a test class

    def __init__(self, encoder: DualEncoder, cache: ProxyCache, cfg: AdaptationConfig = AdaptationConfig(),
                 synonym_table: dict | None = None, background: np.ndarray | None = None):
        self.encoder = encoder
        self.cache = cache
        self.cfg = cfg
        self.synonym_table = synonym_table
        self.background = background
        self._proxy_hash = None

    def _optimizer(self) -> AdamW:
        c = self.cfg
        return AdamW(c.step_size, c.betas, c.weight_decay, c.adam_eps)

    # meta-train

    def discriminating_value(self, prompts: PromptState) -> float:
        bank = class_prototypes(self.encoder, self.cache, prompts.detach())
        return float(discriminating_loss(bank, self.cfg.loss).data)

    def meta_train_step(self, prompts: PromptState) -> tuple[PromptState, list[float]]:
        """``p_hat`` after ``meta_train_steps`` optimizer steps on the discriminating loss."""
        cfg = self.cfg
        opt = self._optimizer()
        current = prompts
        trace = []
        for _ in range(cfg.meta_train_steps):
            leaves = current.leaves(cfg.tune_coupling)
            with T.Tape() as tape:
                loss = discriminating_loss(class_prototypes(self.encoder, self.cache, leaves), cfg.loss)
            grads = T.backward(loss, tape)
            trace.append(float(loss.data))
            params = [p.data for p in leaves.params()]
            g = [grads.get(p, np.zeros(p.shape)) for p in leaves.params()]
            current = _apply(current, opt.step(params, g), cfg.tune_coupling)
        return current.detach(), trace

    # meta-test

    def make_views(self, sample: np.ndarray, seed: int) -> list:
        spec = replace(self.cfg.views, seed=seed)
        views = generate_views(sample, spec, self.background, self.cache.template, self.synonym_table)
        return mask_prompt_tokens(views, spec.prompt_mask_fraction, seed,
                                  self.encoder.cfg.prompt_count_text)

    def view_probs(self, sample: np.ndarray, views: list, prompts: PromptState) -> tuple[np.ndarray, np.ndarray]:
        """Probabilities for the original sample and every view, without a tape."""
        enc = self.encoder
        text = enc.class_text_features(prompts.detach())
        original = enc.predict_probs(sample[None], prompts.detach(), text_features=text).data[0]
        if not views:
            return original, np.zeros((0, enc.cfg.class_count))
        images, masks = stack_views(views)
        return original, enc.predict_probs(images, prompts.detach(), masks, text_features=text).data

    def meta_test_grads(self, p_hat: PromptState, sample: np.ndarray, views: list,
                        bank: PrototypeBank) -> tuple[list[np.ndarray], dict, FilteredSet]:
        """Gradient of the combined objective w.r.t. the prompt tensors, evaluated at ``p_hat``."""
        cfg, enc = self.cfg, self.encoder
        lcfg = cfg.loss
        original, vprobs = self.view_probs(sample, views, p_hat)
        fset = confidence_filter(original, vprobs, lcfg.rho)
        sel = fset.members
        picked = [views[i] for i in sel[1:]]
        images = np.concatenate([sample[None]] + ([stack_views(picked)[0]] if picked else []), axis=0)
        masks = np.array([-1] + [v.mask_index for v in picked], dtype=np.int64)
        leaves = p_hat.leaves(cfg.tune_coupling)
        values = {}
        with T.Tape() as tape:
            text = enc.class_text_features(leaves)
            vis = enc.encode_image(images, leaves, masks)
            probs = enc.probs_from_features(vis.pooled, text)
            mean_probs = T.mean(probs, axis=0)
            align = None
            if lcfg.w_align:
                templates = np.stack([self.cache.template] +
                                     [v.template if v.template is not None else self.cache.template
                                      for v in picked])
                classes = np.argmax(fset.member_probs, axis=1)
                txt = enc.encode_templates(templates, classes, leaves, masks)
                align = alignment_loss(token_prototype(txt), token_prototype(vis), bank, mean_probs,
                                       lcfg, members_cls=vis.cls_feature)
                values["align"] = float(align.data)
            if lcfg.w_ent:
                values["ent"] = float(-np.sum(T.xlogx(mean_probs.detach()).data))
            loss = combined_objective(mean_probs, align, lcfg)
        grads = T.backward(loss, tape)
        values["objective"] = float(loss.data)
        return [grads.get(p, np.zeros(p.shape)) for p in leaves.params()], values, fset

    # episode

    def bank_for(self, p_hat: PromptState, bank: PrototypeBank | None = None) -> PrototypeBank:
        """Bank under ``p_hat``: the given one if frozen or if its provenance matches, else recomputed."""
        if self.cfg.bank_mode == "frozen":
            if bank is None:
                raise ConfigError("frozen bank mode needs a precomputed bank")
            return bank
        if bank is not None and bank.prompt_hash == p_hat.digest() and bank.proxy_hash == self.proxy_hash:
            return bank
        return class_prototypes(self.encoder, self.cache, p_hat.detach())

    @property
    def proxy_hash(self) -> str:
        if self._proxy_hash is None:
            self._proxy_hash = self.cache.digest()
        return self._proxy_hash

    def adapt_sample(self, sample, prompts: PromptState, seed: int | None = None,
                     p_hat: PromptState | None = None, bank: PrototypeBank | None = None) -> EpisodeResult:
        """Adapt the prompts to one test sample and predict its class."""
        cfg = self.cfg
        t0 = time.perf_counter()
        sample = np.asarray(sample, dtype=np.float64)
        seed = cfg.views.seed if seed is None else seed
        trace = {"disc": [], "ent": [], "align": []}
        backward_passes = 0
        if cfg.mode == "star":
            if p_hat is None:
                raise ConfigError("star mode needs restored prompts")
        elif cfg.use_meta_train and cfg.meta_train_steps:
            p_hat, trace["disc"] = self.meta_train_step(prompts)
            backward_passes += cfg.meta_train_steps
        else:
            p_hat = prompts.detach()
        lcfg = cfg.loss
        needs_bank = lcfg.w_align > 0
        bank = self.bank_for(p_hat, bank) if needs_bank else None

        acc = None
        members = np.array([-1])
        for i in range(cfg.n):
            views = self.make_views(sample, seed + i)
            grads, values, fset = self.meta_test_grads(p_hat, sample, views, bank)
            backward_passes += 1
            trace["ent"].append(values.get("ent"))
            trace["align"].append(values.get("align"))
            acc = grads if acc is None else [a + g for a, g in zip(acc, grads)]
            if i == 0:
                members = fset.members
        mean_grads = [a / cfg.n for a in acc]

        base = p_hat if cfg.keep_meta_train_update else prompts
        if lcfg.w_ent or lcfg.w_align:
            params = [p.data for p in base.params()]
            final = _apply(base, self._optimizer().step(params, mean_grads), cfg.tune_coupling)
        else:
            final = base.detach()

        if cfg.predict_from == "original":
            probs = self.encoder.predict_probs(sample[None], final).data[0]
        else:
            original, vprobs = self.view_probs(sample, self.make_views(sample, seed), final)
            probs = confidence_filter(original, vprobs, lcfg.rho).mean_probs
        return EpisodeResult(int(np.argmax(probs)), probs, [trace], backward_passes,
                             time.perf_counter() - t0, members, p_hat.digest(), final)

    def zero_shot(self, samples, prompts: PromptState) -> np.ndarray:
        """Probabilities of a batch of samples under ``prompts`` without adaptation."""
        return self.encoder.predict_probs(np.asarray(samples, dtype=np.float64), prompts.detach()).data


# saved prompts


def save_prompts(prompts: PromptState, path, proxy_hash: str, base_hash: str) -> None:
    """Write prompts with their provenance: the proxy cache and the prompts they were derived from."""
    tp, cp = prompts.text_prompts.data, prompts.coupling.data
    J, n, d = tp.shape
    with open(path, "wb") as f:
        f.write(PROMPT_MAGIC)
        f.write(struct.pack("<B", PROMPT_VERSION))
        f.write(bytes.fromhex(proxy_hash))
        f.write(bytes.fromhex(base_hash))
        f.write(struct.pack("<III", J, n, d))
        f.write(np.ascontiguousarray(tp, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(cp, dtype="<f8").tobytes())


def read_prompt_file(path) -> tuple[PromptState, str, str]:
    raw = Path(path).read_bytes()
    if raw[:4] != PROMPT_MAGIC:
        raise FormatError(f"{path}: not a saved-prompt file")
    if len(raw) < 81 or raw[4] != PROMPT_VERSION:
        raise FormatError(f"{path}: bad header")
    proxy_hash, base_hash = raw[5:37].hex(), raw[37:69].hex()
    J, n, d = struct.unpack_from("<III", raw, 69)
    off = 81
    need = 8 * (J * n * d + J * d * d)
    if len(raw) != off + need:
        raise FormatError(f"{path}: payload size does not match header")
    tp = np.frombuffer(raw, "<f8", J * n * d, off).reshape(J, n, d).astype(np.float64)
    cp = np.frombuffer(raw, "<f8", J * d * d, off + 8 * J * n * d).reshape(J, d, d).astype(np.float64)
    return PromptState.from_arrays(tp, cp), proxy_hash, base_hash


def restore_prompts(path, proxy_hash: str | None = None, base_hash: str | None = None) -> PromptState:
    """Load saved prompts, raising :class:`StalenessError` if the provenance differs."""
    prompts, p_hash, b_hash = read_prompt_file(path)
    if proxy_hash is not None and p_hash != proxy_hash:
        raise StalenessError(f"{path}: prompts were tuned on a different proxy cache")
    if base_hash is not None and b_hash != base_hash:
        raise StalenessError(f"{path}: prompts were derived from different initial prompts")
    return prompts
