"""Frozen toy dual encoder with deep, coupled text/visual prompts.

Text sequence layout is ``[SOS, p_1..p_T, t_1..t_L, c_k, EOS]`` and the visual
one is ``[CLS, q_1..q_V, e_1..e_M]``. At each of the first ``prompt_depth``
blocks the prompt slots are overwritten with that depth's prompts; visual
prompts are a per-depth linear map of the text prompts.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, InputError, ShapeError
from .tensor import Tensor

SOS, EOS, CLS, PROMPT, CONTENT = "SOS", "EOS", "CLS", "prompt", "content"

WEIGHT_MAGIC = b"PSWT"
WEIGHT_VERSION = 1


@dataclass
class EncoderConfig:
    embed_dim: int = 32
    layers: int = 4
    heads: int = 4
    patch_count: int = 16
    patch_dim: int = 16
    template_length: int = 4
    vocab_size: int = 64
    prompt_count_text: int = 2
    prompt_count_visual: int = 2
    prompt_depth: int = 3
    class_count: int = 10
    temperature: float = 0.01
    mlp_ratio: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.prompt_depth > self.layers:
            raise ConfigError("prompt_depth must not exceed layers")
        if self.prompt_count_text < 1 or self.prompt_count_visual < 1:
            raise ConfigError("prompt counts must be at least 1")
        if self.prompt_count_text != self.prompt_count_visual:
            # the coupling maps text token i to visual token i
            raise ConfigError("coupled prompts need prompt_count_text == prompt_count_visual")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")
        if self.class_count < 1 or self.prompt_depth < 1:
            raise ConfigError("class_count and prompt_depth must be positive")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")

    @property
    def text_tokens(self) -> int:
        return self.template_length + self.prompt_count_text + 3

    @property
    def visual_tokens(self) -> int:
        return 1 + self.prompt_count_visual + self.patch_count


def weight_layout(cfg: EncoderConfig) -> list[tuple[str, tuple]]:
    """Names and shapes of every frozen array, in checkpoint order."""
    d, h = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    out = [
        ("text.token_embedding", (cfg.vocab_size, d)),
        ("text.class_embedding", (cfg.class_count, d)),
        ("text.sos", (d,)),
        ("text.eos", (d,)),
        ("text.pos", (cfg.text_tokens, d)),
        ("visual.patch_proj", (cfg.patch_dim, d)),
        ("visual.cls", (d,)),
        ("visual.pos", (cfg.visual_tokens, d)),
    ]
    for branch in ("text", "visual"):
        for i in range(cfg.layers):
            p = f"{branch}.block{i}."
            out += [
                (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
                (p + "attn_in", (d, 3 * d)), (p + "attn_out", (d, d)),
                (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
                (p + "mlp_in", (d, h)), (p + "mlp_out", (h, d)),
            ]
        out += [(f"{branch}.ln_post.g", (d,)), (f"{branch}.ln_post.b", (d,)),
                (f"{branch}.proj", (d, d))]
    return out


def init_weights(cfg: EncoderConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    depth_scale = 1.0 / np.sqrt(2.0 * cfg.layers)
    weights = {}
    for name, shape in weight_layout(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf == "b":
            arr = np.zeros(shape)
        elif len(shape) == 2 and not name.endswith(("embedding", "pos")):
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
            if leaf in ("attn_out", "mlp_out"):
                arr *= depth_scale
        elif name.endswith("pos"):
            arr = rng.normal(0.0, 0.1, size=shape)
        else:
            arr = rng.normal(0.0, 1.0, size=shape)
        weights[name] = arr
    return weights


def weights_checksum(weights: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(weights):
        h.update(name.encode())
        h.update(np.ascontiguousarray(weights[name], dtype="<f8").tobytes())
    return h.hexdigest()


# prompts


def couple_prompts(text_prompts, coupling) -> Tensor:
    """Visual prompts ``[J, V, d]`` from text prompts ``[J, T, d]`` via per-depth ``[J, d, d]`` maps."""
    return T.matmul(text_prompts, coupling)


@dataclass
class PromptState:
    """Learnable prompt tokens. Visual prompts are recomputed on every read."""

    text_prompts: Tensor
    coupling: Tensor

    @property
    def visual_prompts(self) -> Tensor:
        return couple_prompts(self.text_prompts, self.coupling)

    @classmethod
    def initial(cls, cfg: EncoderConfig, seed: int | None = None, std: float = 0.02) -> "PromptState":
        rng = np.random.default_rng(cfg.seed + 1 if seed is None else seed)
        J, n, d = cfg.prompt_depth, cfg.prompt_count_text, cfg.embed_dim
        text = rng.normal(0.0, std, size=(J, n, d))
        coupling = np.broadcast_to(np.eye(d), (J, d, d)).copy()
        return cls(Tensor(text), Tensor(coupling))

    @classmethod
    def from_arrays(cls, text_prompts: np.ndarray, coupling: np.ndarray) -> "PromptState":
        return cls(Tensor(text_prompts), Tensor(coupling))

    def leaves(self, tune_coupling: bool = True) -> "PromptState":
        """Copy whose tensors are gradient leaves (coupling only if ``tune_coupling``)."""
        return PromptState(Tensor(self.text_prompts.data, requires_grad=True),
                           Tensor(self.coupling.data, requires_grad=tune_coupling))

    def detach(self) -> "PromptState":
        return PromptState(self.text_prompts.detach(), self.coupling.detach())

    def arrays(self) -> dict[str, np.ndarray]:
        return {"text_prompts": self.text_prompts.data, "coupling": self.coupling.data}

    def params(self) -> list[Tensor]:
        return [self.text_prompts, self.coupling]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.text_prompts.data, self.coupling.data):
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def equals(self, other: "PromptState") -> bool:
        return (np.array_equal(self.text_prompts.data, other.text_prompts.data)
                and np.array_equal(self.coupling.data, other.coupling.data))


# encoder outputs


@dataclass
class TokenOutputs:
    """Final-layer token features for a batch of sequences."""

    tokens: Tensor            # [B, N, d]
    pooled: Tensor            # [B, d], unit norm
    roles: tuple              # length N
    cls_feature: Tensor | None = None   # [B, d], visual only

    @property
    def prototype_index(self) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.roles) if r in (PROMPT, CONTENT)])


@dataclass
class TextSequence:
    embeddings: Tensor        # [B, N, d]
    roles: tuple
    mask: np.ndarray | None = field(default=None, repr=False)


class DualEncoder:
    """Frozen text and vision transformers sharing one embedding width."""

    def __init__(self, cfg: EncoderConfig, weights: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        weights = init_weights(cfg) if weights is None else weights
        layout = weight_layout(cfg)
        missing = [n for n, _ in layout if n not in weights]
        if missing:
            raise ConfigError(f"weights missing {missing[:3]}")
        for name, shape in layout:
            if tuple(weights[name].shape) != shape:
                raise ShapeError(f"weight {name}: expected {shape}, got {weights[name].shape}")
        self.w = {n: Tensor(weights[n]) for n, _ in layout}
        self.text_roles = (SOS,) + (PROMPT,) * cfg.prompt_count_text + \
            (CONTENT,) * (cfg.template_length + 1) + (EOS,)
        self.visual_roles = (CLS,) + (PROMPT,) * cfg.prompt_count_visual + (CONTENT,) * cfg.patch_count

    def weight_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.w.items()}

    def checksum(self) -> str:
        return weights_checksum(self.weight_arrays())

    # sequence assembly

    def embed_text(self, template, class_id, prompts: PromptState, mask_index=None) -> TextSequence:
        """Embed one or a batch of (template, class) pairs with depth-0 text prompts.

        ``template`` is ``[L]`` or ``[B, L]`` token ids; ``class_id`` an int or ``[B]``;
        ``mask_index`` optionally zeroes one learnable token per sequence (-1 = none).
        """
        cfg = self.cfg
        tmpl = np.asarray(template, dtype=np.int64)
        if tmpl.ndim == 1:
            tmpl = tmpl[None]
        cls_ids = np.atleast_1d(np.asarray(class_id, dtype=np.int64))
        if tmpl.shape[1] != cfg.template_length:
            raise InputError(f"template length {tmpl.shape[1]} != {cfg.template_length}")
        if cls_ids.shape[0] != tmpl.shape[0]:
            if cls_ids.shape[0] == 1:
                cls_ids = np.repeat(cls_ids, tmpl.shape[0])
            elif tmpl.shape[0] == 1:
                tmpl = np.repeat(tmpl, cls_ids.shape[0], axis=0)
            else:
                raise ShapeError("embed_text: template and class batch sizes differ")
        if np.any(cls_ids < 0) or np.any(cls_ids >= cfg.class_count):
            raise InputError(f"class id out of range [0, {cfg.class_count})")
        if np.any(tmpl < 0) or np.any(tmpl >= cfg.vocab_size):
            raise InputError("template token id out of vocabulary")
        B, d = tmpl.shape[0], cfg.embed_dim
        w = self.w
        prompts0 = self._masked(prompts.text_prompts[0], mask_index, B)
        parts = [
            T.broadcast_to(w["text.sos"], (B, 1, d)),
            prompts0,
            Tensor._wrap(w["text.token_embedding"].data[tmpl]),
            T.reshape(w["text.class_embedding"][cls_ids], (B, 1, d)),
            T.broadcast_to(w["text.eos"], (B, 1, d)),
        ]
        x = T.concat(parts, axis=1) + w["text.pos"]
        return TextSequence(x, self.text_roles, None if mask_index is None else np.asarray(mask_index))

    def _masked(self, prompts_j: Tensor, mask_index, batch: int) -> Tensor:
        n, d = prompts_j.shape
        if mask_index is None:
            return T.broadcast_to(prompts_j, (batch, n, d))
        idx = np.broadcast_to(np.asarray(mask_index, dtype=np.int64), (batch,))
        keep = np.ones((batch, n, 1))
        on = idx >= 0
        keep[np.nonzero(on)[0], idx[on], 0] = 0.0
        return T.mul(prompts_j, Tensor._wrap(keep))

    def embed_image(self, patches, prompts: PromptState, mask_index=None, visual_prompts=None) -> Tensor:
        cfg = self.cfg
        x = np.asarray(patches.data if isinstance(patches, Tensor) else patches, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (cfg.patch_count, cfg.patch_dim):
            raise ShapeError(f"image shape {x.shape[1:]} != {(cfg.patch_count, cfg.patch_dim)}")
        B, d = x.shape[0], cfg.embed_dim
        vp = prompts.visual_prompts if visual_prompts is None else visual_prompts
        w = self.w
        parts = [
            T.broadcast_to(w["visual.cls"], (B, 1, d)),
            self._masked(vp[0], mask_index, B),
            T.matmul(Tensor._wrap(x), w["visual.patch_proj"]),
        ]
        return T.concat(parts, axis=1) + w["visual.pos"]

    # transformer

    def _block(self, x: Tensor, prefix: str) -> Tensor:
        w, cfg = self.w, self.cfg
        B, N, d = x.shape
        H = cfg.heads
        dh = d // H
        h = T.layer_norm(x, w[prefix + "ln1.g"], w[prefix + "ln1.b"])
        qkv = T.transpose(T.reshape(h @ w[prefix + "attn_in"], (B, N, 3, H, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = T.softmax(q @ T.transpose(k, (0, 1, 3, 2)), temperature=float(np.sqrt(dh)))
        o = T.reshape(T.transpose(att @ v, (0, 2, 1, 3)), (B, N, d))
        x = x + o @ w[prefix + "attn_out"]
        h = T.layer_norm(x, w[prefix + "ln2.g"], w[prefix + "ln2.b"])
        return x + T.gelu(h @ w[prefix + "mlp_in"]) @ w[prefix + "mlp_out"]

    def _run(self, x: Tensor, branch: str, deep_prompts: Tensor, n_prompt: int) -> Tensor:
        cfg = self.cfg
        B, N, d = x.shape
        for i in range(cfg.layers):
            if 0 < i < cfg.prompt_depth:
                x = T.concat([x[:, :1], T.broadcast_to(deep_prompts[i], (B, n_prompt, d)),
                              x[:, 1 + n_prompt:]], axis=1)
            x = self._block(x, f"{branch}.block{i}.")
        x = T.layer_norm(x, self.w[f"{branch}.ln_post.g"], self.w[f"{branch}.ln_post.b"])
        return x @ self.w[f"{branch}.proj"]

    def encode_text(self, seq: TextSequence, prompts: PromptState) -> TokenOutputs:
        cfg = self.cfg
        if seq.embeddings.shape[1:] != (cfg.text_tokens, cfg.embed_dim):
            raise ShapeError("encode_text: sequence does not match the encoder config")
        tokens = self._run(seq.embeddings, "text", prompts.text_prompts, cfg.prompt_count_text)
        pooled = T.l2_normalize(tokens[:, cfg.text_tokens - 1])
        return TokenOutputs(tokens, pooled, seq.roles)

    def encode_image(self, patches, prompts: PromptState, mask_index=None) -> TokenOutputs:
        cfg = self.cfg
        vp = prompts.visual_prompts
        x = self.embed_image(patches, prompts, mask_index, visual_prompts=vp)
        tokens = self._run(x, "visual", vp, cfg.prompt_count_visual)
        cls_feature = tokens[:, 0]
        return TokenOutputs(tokens, T.l2_normalize(cls_feature), self.visual_roles, cls_feature)

    def encode_templates(self, templates, class_ids, prompts: PromptState, mask_index=None) -> TokenOutputs:
        return self.encode_text(self.embed_text(templates, class_ids, prompts, mask_index), prompts)

    # zero-shot head

    def class_text_features(self, prompts: PromptState, template=None) -> Tensor:
        """Unit text features ``[C, d]`` for every class under ``template``."""
        cfg = self.cfg
        tmpl = self.default_template() if template is None else np.asarray(template)
        ids = np.arange(cfg.class_count)
        return self.encode_templates(np.repeat(tmpl[None], cfg.class_count, axis=0), ids, prompts).pooled

    def default_template(self) -> np.ndarray:
        return np.arange(self.cfg.template_length, dtype=np.int64)

    def probs_from_features(self, image_pooled: Tensor, text_features: Tensor) -> Tensor:
        sims = T.cosine_similarity(T.reshape(image_pooled, (-1, 1, self.cfg.embed_dim)), text_features)
        return T.softmax(sims, temperature=self.cfg.temperature)

    def predict_probs(self, patches, prompts: PromptState, mask_index=None, text_features=None) -> Tensor:
        """Class probabilities ``[B, C]``: softmax of cosine similarities at ``temperature``."""
        if text_features is None:
            text_features = self.class_text_features(prompts)
        image = self.encode_image(patches, prompts, mask_index)
        return self.probs_from_features(image.pooled, text_features)


# checkpoint file


def save_weights(encoder: DualEncoder, path) -> None:
    header = json.dumps(asdict(encoder.cfg), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<B", WEIGHT_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for name, _ in weight_layout(encoder.cfg):
            f.write(np.ascontiguousarray(encoder.w[name].data, dtype="<f8").tobytes())


def load_weights(path) -> DualEncoder:
    raw = Path(path).read_bytes()
    if raw[:4] != WEIGHT_MAGIC:
        raise FormatError(f"{path}: not a weight checkpoint")
    if raw[4] != WEIGHT_VERSION:
        raise FormatError(f"{path}: unsupported version {raw[4]}")
    (n,) = struct.unpack_from("<I", raw, 5)
    cfg = EncoderConfig(**json.loads(raw[9:9 + n]))
    off = 9 + n
    weights = {}
    for name, shape in weight_layout(cfg):
        count = int(np.prod(shape))
        if off + 8 * count > len(raw):
            raise FormatError(f"{path}: truncated at {name}")
        weights[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return DualEncoder(cfg, weights)
