"""Seeded augmented views of patch-grid images, plus token-level text augmentation.

Images are ``[M, d_patch]`` patch embeddings laid out on a square grid.
Every view draws from its own generator seeded by ``(seed, view_index)``, so
views can be produced independently and in any order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class ViewSpec:
    n_views: int = 127
    crop_scale: tuple = (0.5, 1.0)
    flip_prob: float = 0.5
    background_substitution_prob: float = 0.2
    corruption_noise_std: float = 0.05
    prompt_mask_fraction: float = 0.15
    seed: int = 0
    text_per_view: bool = True

    def __post_init__(self):
        if self.n_views < 0:
            raise ConfigError("n_views must be non-negative")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError("crop_scale must satisfy 0 < lo <= hi <= 1")
        for name in ("flip_prob", "background_substitution_prob", "prompt_mask_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.corruption_noise_std < 0:
            raise ConfigError("corruption_noise_std must be non-negative")


@dataclass(frozen=True)
class View:
    image: np.ndarray = field(repr=False)
    record: dict
    template: np.ndarray | None = None
    substitutions: tuple = ()
    mask_index: int = -1


def grid_side(n_patches: int) -> int:
    side = math.isqrt(n_patches)
    if side * side != n_patches:
        raise InputError(f"patch count {n_patches} is not a square grid")
    return side


def _view_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, index])


def _resize_window(grid: np.ndarray, top: float, left: float, size: float) -> np.ndarray:
    """Bilinear resample of the square window ``size`` x ``size`` at (top, left) back to full grid."""
    g = grid.shape[0]
    # patch centres of the output, mapped into the window in source coordinates
    centres = (np.arange(g) + 0.5) / g * size - 0.5
    ys = np.clip(top + centres, 0, g - 1)
    xs = np.clip(left + centres, 0, g - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, g - 1)
    x1 = np.minimum(x0 + 1, g - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    a = grid[y0][:, x0]
    b = grid[y0][:, x1]
    c = grid[y1][:, x0]
    d = grid[y1][:, x1]
    return (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * c + wx * d)


def apply_record(image: np.ndarray, record: dict, background: np.ndarray | None = None) -> np.ndarray:
    """Rebuild a view from the original image and its transform record."""
    M, dp = image.shape
    g = grid_side(M)
    grid = image.reshape(g, g, dp)
    top, left, size = record["crop"]
    if size < g:
        grid = _resize_window(grid, top, left, size)
    if record["flip"]:
        grid = grid[:, ::-1]
    out = grid.reshape(M, dp).copy()
    if record["background"]:
        if background is None:
            raise InputError("record asks for background substitution but no background given")
        energy = np.sum(out * out, axis=1)
        low = energy < np.median(energy)
        out[low] = background[low]
    if record["noise_std"] > 0:
        rng = np.random.default_rng(record["noise_seed"])
        out = out + rng.normal(0.0, record["noise_std"], size=out.shape)
    return out


def _draw_record(rng: np.random.Generator, g: int, spec: ViewSpec, can_background: bool) -> dict:
    lo, hi = spec.crop_scale
    scale = rng.uniform(lo, hi)
    size = float(g * math.sqrt(scale))
    top = float(rng.uniform(0, g - size))
    left = float(rng.uniform(0, g - size))
    flip = bool(rng.random() < spec.flip_prob)
    background = bool(can_background and rng.random() < spec.background_substitution_prob)
    noise_seed = int(rng.integers(0, 2**63 - 1))
    return {"crop": (top, left, size), "flip": flip, "background": background,
            "noise_std": float(spec.corruption_noise_std), "noise_seed": noise_seed}


def generate_views(image, spec: ViewSpec, background=None, template=None,
                   synonym_table: dict | None = None) -> list[View]:
    """Exactly ``spec.n_views`` augmented views of ``image`` (the original is not included).

    When ``template`` and ``synonym_table`` are given, each view also carries an
    augmented template (one per view, or one shared per call if
    ``spec.text_per_view`` is false).
    """
    image = np.asarray(image, dtype=np.float64)
    g = grid_side(image.shape[0])
    bg = None if background is None else np.asarray(background, dtype=np.float64)
    shared_text = None
    if template is not None and synonym_table is not None and not spec.text_per_view:
        shared_text = augment_text(template, synonym_table, spec.seed)
    views = []
    for i in range(spec.n_views):
        rng = _view_rng(spec.seed, i)
        record = _draw_record(rng, g, spec, bg is not None)
        text, subs = None, ()
        if template is not None and synonym_table is not None:
            if shared_text is not None:
                text = shared_text
            else:
                text = augment_text(template, synonym_table, int(rng.integers(0, 2**63 - 1)))
            base = np.asarray(template)
            subs = tuple((int(p), int(base[p]), int(text[p])) for p in np.nonzero(text != base)[0])
        elif template is not None:
            text = np.asarray(template, dtype=np.int64)
        views.append(View(apply_record(image, record, bg), record, text, subs))
    return views


def mask_prompt_tokens(views: list[View], fraction: float, seed: int, n_tokens: int = 2) -> list[View]:
    """Mark ``round(fraction * len(views))`` views with one masked learnable-token index."""
    if not 0.0 <= fraction <= 1.0:
        raise InputError("mask fraction must lie in [0, 1]")
    n = len(views)
    count = int(math.floor(fraction * n + 0.5))
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0x6D61736B])
    chosen = rng.choice(n, size=count, replace=False) if count else np.array([], dtype=int)
    tokens = rng.integers(0, n_tokens, size=count)
    which = dict(zip(chosen.tolist(), tokens.tolist()))
    return [replace(v, mask_index=int(which.get(i, -1))) for i, v in enumerate(views)]


def augment_text(template, synonym_table: dict, seed: int) -> np.ndarray:
    """Replace each token by an entry drawn uniformly from its synonym list."""
    template = np.asarray(template, dtype=np.int64)
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    out = np.empty_like(template)
    for pos, tok in enumerate(template.tolist()):
        alts = synonym_table.get(tok)
        if not alts:
            raise ConfigError(f"synonym table has no entry for token {tok}")
        out[pos] = alts[int(rng.integers(len(alts)))]
    return out


def load_synonym_table(path) -> dict[int, list[int]]:
    """Parse ``id: alt1, alt2, ...`` lines (UTF-8). Blank lines and ``#`` comments are skipped."""
    table = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, rest = line.partition(":")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'id: alt1, alt2, ...'")
        try:
            alts = [int(tok) for tok in rest.split(",") if tok.strip()]
            table[int(key)] = alts
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
        if not alts:
            raise ConfigError(f"{path}:{lineno}: token {key} has no entries")
    return table


def save_synonym_table(table: dict, path) -> None:
    lines = [f"{k}: {', '.join(str(a) for a in table[k])}" for k in sorted(table)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def stack_views(views: list[View]) -> tuple[np.ndarray, np.ndarray]:
    """Images ``[N, M, d_patch]`` and mask indices ``[N]`` for a batch forward."""
    if not views:
        return np.zeros((0,)), np.zeros((0,), dtype=np.int64)
    return (np.stack([v.image for v in views]),
            np.array([v.mask_index for v in views], dtype=np.int64))
