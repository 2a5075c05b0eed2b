"""Benchmark configuration: a YAML file whose sections mirror the library dataclasses.

Top-level keys (all optional; defaults give the standard benchmark):

``seeds``            int count (seeds 0..n-1) or an explicit list
``test_per_class``   test samples per class and shift (5 -> 50 per shift at C=10)
``shifts``           list of ``{kind, magnitude}``
``methods``          subset of :data:`METHODS`
``cache_dir``        where ``build-cache`` writes per-seed artifacts
``proxy``            ``samples_per_class`` (K), ``views_per_sample`` (A)
``calibration``      ``steps``, ``lr``, ``min_accuracy``
``synthetic``        :class:`SyntheticSpec` fields (``seed`` is set per run seed)
``encoder``          :class:`EncoderConfig` fields (``seed`` is set per run seed)
``adaptation``       :class:`AdaptationConfig` fields, with nested ``views`` and ``loss``
``sweeps``           ``views``, ``steps``, ``seeds``, ``test_per_class``
``synonyms``         path to a synonym table, or null for the built-in table
``ablation``         ``variants``
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from ..adapt import AdaptationConfig
from ..augment import ViewSpec, load_synonym_table
from ..encoders import EncoderConfig
from ..errors import ConfigError
from ..losses import VARIANTS, LossConfig
from .synthetic import SHIFT_KINDS, ShiftSpec, SyntheticSpec

METHODS = ("zero_shot", "ent_only", "align_only", "disc_only", "full", "star")

DEFAULT_SHIFTS = (("rotation", 0.6), ("bias", 1.5), ("noise", 1.0), ("shuffle", 1.0))


def default_synonyms(template_length: int) -> dict[int, list[int]]:
    """Token ``t`` may become ``t``, ``t + L`` or ``t + 2L``."""
    L = template_length
    return {t: [t, t + L, t + 2 * L] for t in range(L)}


@dataclass(frozen=True)
class BenchConfig:
    seeds: tuple = tuple(range(10))
    test_per_class: int = 5
    shifts: tuple = tuple(ShiftSpec(k, m) for k, m in DEFAULT_SHIFTS)
    methods: tuple = METHODS
    cache_dir: str = "runs/cache"
    proxy_samples_per_class: int = 4
    proxy_views_per_sample: int = 4
    calibration_steps: int = 100
    calibration_lr: float = 0.1
    min_accuracy: float = 0.9
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    sweep_views: tuple = (8, 16, 32, 64, 128, 256)
    sweep_steps: tuple = (1, 2, 4, 8)
    sweep_seeds: tuple = (0,)
    sweep_test_per_class: int = 1
    variants: tuple = VARIANTS
    synonyms: str | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown alignment variants {bad}; choose from {VARIANTS}")
        if self.test_per_class < 1 or self.proxy_samples_per_class < 1:
            raise ConfigError("test_per_class and proxy samples_per_class must be positive")
        if self.proxy_views_per_sample < 1:
            raise ConfigError("proxy views_per_sample must be positive")
        s, e = self.synthetic, self.encoder
        if (s.class_count, s.patch_count, s.patch_dim) != (e.class_count, e.patch_count, e.patch_dim):
            raise ConfigError("synthetic and encoder sections disagree on class_count/patch_count/patch_dim")

    def synonym_table(self) -> dict[int, list[int]]:
        if self.synonyms:
            return load_synonym_table(self.synonyms)
        return default_synonyms(self.encoder.template_length)

    def for_seed(self, seed: int) -> tuple[SyntheticSpec, EncoderConfig]:
        return replace(self.synthetic, seed=seed), replace(self.encoder, seed=seed)

    def source_digest(self) -> str:
        """Hash of everything that determines a seed's source model and proxy cache."""
        views = {k: v for k, v in asdict(self.adaptation.views).items() if k not in ("n_views", "seed")}
        keys = {"synthetic": asdict(self.synthetic), "encoder": asdict(self.encoder),
                "proxy": [self.proxy_samples_per_class, self.proxy_views_per_sample],
                "calibration": [self.calibration_steps, self.calibration_lr],
                "views": views, "synonyms": self.synonym_table()}
        return _hash(keys)

    def meta_digest(self, adaptation: AdaptationConfig | None = None) -> str:
        """Hash of the settings that determine the meta-train output ``p_hat``."""
        a = adaptation or self.adaptation
        return _hash({"step_size": a.step_size, "betas": a.betas, "weight_decay": a.weight_decay,
                      "adam_eps": a.adam_eps, "meta_train_steps": a.meta_train_steps,
                      "tune_coupling": a.tune_coupling, "tau": a.loss.tau_contrast})

    def digest(self) -> str:
        return _hash(to_dict(self))


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _build(cls, data: dict | None, where: str, **extra):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    for key, value in data.items():
        if isinstance(value, list):
            data[key] = tuple(value)
    data.update(extra)
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _check_keys(data: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def from_dict(raw: dict | None) -> BenchConfig:
    raw = dict(raw or {})
    _check_keys(raw, {"seeds", "test_per_class", "shifts", "methods", "cache_dir", "proxy", "calibration",
                      "synthetic", "encoder", "adaptation", "sweeps", "synonyms", "ablation"}, "config")
    kw = {}
    if "seeds" in raw:
        s = raw["seeds"]
        kw["seeds"] = tuple(range(int(s))) if isinstance(s, int) else tuple(int(x) for x in s)
    for key in ("test_per_class", "cache_dir", "synonyms"):
        if key in raw:
            kw[key] = raw[key]
    if "methods" in raw:
        kw["methods"] = tuple(raw["methods"])
    if "shifts" in raw:
        shifts = []
        for item in raw["shifts"]:
            _check_keys(item, {"kind", "magnitude"}, "shifts")
            if item.get("kind") not in SHIFT_KINDS:
                raise ConfigError(f"shifts: unknown kind {item.get('kind')!r}")
            shifts.append(ShiftSpec(item["kind"], float(item.get("magnitude", 0.0))))
        kw["shifts"] = tuple(shifts)
    proxy = raw.get("proxy") or {}
    _check_keys(proxy, {"samples_per_class", "views_per_sample"}, "proxy")
    if "samples_per_class" in proxy:
        kw["proxy_samples_per_class"] = int(proxy["samples_per_class"])
    if "views_per_sample" in proxy:
        kw["proxy_views_per_sample"] = int(proxy["views_per_sample"])
    cal = raw.get("calibration") or {}
    _check_keys(cal, {"steps", "lr", "min_accuracy"}, "calibration")
    for src, dst in (("steps", "calibration_steps"), ("lr", "calibration_lr"), ("min_accuracy", "min_accuracy")):
        if src in cal:
            kw[dst] = cal[src]
    kw["synthetic"] = _build(SyntheticSpec, raw.get("synthetic"), "synthetic")
    kw["encoder"] = _build(EncoderConfig, raw.get("encoder"), "encoder")
    adapt = dict(raw.get("adaptation") or {})
    views = _build(ViewSpec, adapt.pop("views", None), "adaptation.views")
    loss = _build(LossConfig, adapt.pop("loss", None), "adaptation.loss")
    kw["adaptation"] = _build(AdaptationConfig, adapt, "adaptation", views=views, loss=loss)
    sweeps = raw.get("sweeps") or {}
    _check_keys(sweeps, {"views", "steps", "seeds", "test_per_class"}, "sweeps")
    for src, dst in (("views", "sweep_views"), ("steps", "sweep_steps"), ("seeds", "sweep_seeds")):
        if src in sweeps:
            kw[dst] = tuple(int(x) for x in sweeps[src])
    if "test_per_class" in sweeps:
        kw["sweep_test_per_class"] = int(sweeps["test_per_class"])
    abl = raw.get("ablation") or {}
    _check_keys(abl, {"variants"}, "ablation")
    if "variants" in abl:
        kw["variants"] = tuple(abl["variants"])
    return BenchConfig(**kw)


def to_dict(cfg: BenchConfig) -> dict:
    """Inverse of :func:`from_dict` (plain types only)."""
    adapt = asdict(cfg.adaptation)
    return {
        "seeds": list(cfg.seeds),
        "test_per_class": cfg.test_per_class,
        "shifts": [{"kind": s.kind, "magnitude": s.magnitude} for s in cfg.shifts],
        "methods": list(cfg.methods),
        "cache_dir": cfg.cache_dir,
        "proxy": {"samples_per_class": cfg.proxy_samples_per_class,
                  "views_per_sample": cfg.proxy_views_per_sample},
        "calibration": {"steps": cfg.calibration_steps, "lr": cfg.calibration_lr,
                        "min_accuracy": cfg.min_accuracy},
        "synthetic": _plain(asdict(cfg.synthetic)),
        "encoder": asdict(cfg.encoder),
        "adaptation": _plain(adapt),
        "sweeps": {"views": list(cfg.sweep_views), "steps": list(cfg.sweep_steps),
                   "seeds": list(cfg.sweep_seeds), "test_per_class": cfg.sweep_test_per_class},
        "synonyms": cfg.synonyms,
        "ablation": {"variants": list(cfg.variants)},
    }


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    return obj


def load_config(path=None) -> BenchConfig:
    if path is None:
        return BenchConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(raw)


def save_config(cfg: BenchConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False), encoding="utf-8")
