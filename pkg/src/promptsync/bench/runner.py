"""Per-seed cache building and the benchmark, ablation and sweep runners."""
from __future__ import annotations

import json
import multiprocessing as mp
import os
import subprocess
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..adapt import AdaptationConfig, TestTimeAdapter, restore_prompts, save_prompts
from ..encoders import DualEncoder, PromptState, load_weights, save_weights
from ..errors import ConfigError, EpisodeError, StalenessError
from ..prototypes import PrototypeBank, ProxyCache, build_proxy_cache, class_prototypes, load_bank, save_bank
from .config import BenchConfig, _hash
from .synthetic import ClassGenerators, Dataset, apply_shift, draw, generate_source, make_generators

TEST_STREAM = 3


def worker_count() -> int:
    """Size of the episode pool: CPU count, capped by ``PROMPTSYNC_THREADS``."""
    n = os.cpu_count() or 1
    cap = os.environ.get("PROMPTSYNC_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def build_id() -> str:
    root = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=root,
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from .. import __version__
    return f"v{__version__}"


# cache


def seed_dir(cfg: BenchConfig, seed: int) -> Path:
    return Path(cfg.cache_dir) / f"seed_{seed}"


PATHS = {"weights": "weights.pswt", "proxy": "proxy.npz", "prompts": "prompts.pspt",
         "bank": "bank.pspb", "p_hat": "p_hat.pspt", "bank_p_hat": "bank_p_hat.pspb", "manifest": "manifest.json"}


@dataclass
class SeedArtifacts:
    seed: int
    encoder: DualEncoder
    prompts: PromptState
    cache: ProxyCache
    bank: PrototypeBank
    p_hat: PromptState | None
    generators: ClassGenerators
    manifest: dict
    bank_p_hat: PrototypeBank | None = None

    @property
    def proxy_hash(self) -> str:
        return self.manifest["proxy_hash"]


def _proxy_images(train: Dataset, class_count: int, K: int) -> np.ndarray:
    out = []
    for c in range(class_count):
        imgs = train.images[train.labels == c][:K]
        if len(imgs) < K:
            raise ConfigError(f"class {c} has only {len(imgs)} source samples, proxy needs {K}")
        out.append(imgs)
    return np.stack(out)


def build_seed(cfg: BenchConfig, seed: int) -> dict:
    """Calibrate the source model for ``seed`` and write every artifact the runs need."""
    spec, enc_cfg = cfg.for_seed(seed)
    src = generate_source(spec, enc_cfg, cfg.calibration_steps, cfg.calibration_lr, cfg.min_accuracy)
    K, A = cfg.proxy_samples_per_class, cfg.proxy_views_per_sample
    view_spec = replace(cfg.adaptation.views, n_views=A, seed=seed)
    table = cfg.synonym_table()
    cache = build_proxy_cache(_proxy_images(src.train, spec.class_count, K), src.encoder.default_template(),
                              view_spec, src.generators.background, table, enc_cfg.prompt_count_text)
    d = seed_dir(cfg, seed)
    d.mkdir(parents=True, exist_ok=True)
    save_weights(src.encoder, d / PATHS["weights"])
    cache.save(d / PATHS["proxy"])
    proxy_hash = cache.digest()
    save_prompts(src.prompts, d / PATHS["prompts"], proxy_hash, src.encoder.checksum())
    save_bank(class_prototypes(src.encoder, cache, src.prompts), d / PATHS["bank"])
    adapter = TestTimeAdapter(src.encoder, cache, cfg.adaptation, table, src.generators.background)
    p_hat, trace = adapter.meta_train_step(src.prompts)
    save_prompts(p_hat, d / PATHS["p_hat"], proxy_hash, src.prompts.digest())
    save_bank(class_prototypes(src.encoder, cache, p_hat), d / PATHS["bank_p_hat"])
    manifest = {"seed": seed, "source_digest": cfg.source_digest(), "meta_digest": cfg.meta_digest(),
                "proxy_hash": proxy_hash, "prompt_hash": src.prompts.digest(), "p_hat_hash": p_hat.digest(),
                "weights_checksum": src.encoder.checksum(), "holdout_accuracy": src.holdout_accuracy,
                "calibration_loss": src.calibration_trace[-1], "meta_train_loss": trace}
    (d / PATHS["manifest"]).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def build_cache(cfg: BenchConfig, seeds=None, log=None) -> list[dict]:
    out = []
    for seed in (cfg.seeds if seeds is None else seeds):
        t0 = time.perf_counter()
        m = build_seed(cfg, seed)
        if log:
            log(f"seed {seed}: held-out zero-shot {m['holdout_accuracy']:.3f} "
                f"({time.perf_counter() - t0:.1f}s) -> {seed_dir(cfg, seed)}")
        out.append(m)
    return out


def load_artifacts(cfg: BenchConfig, seed: int, need_p_hat: bool = False,
                   adaptation: AdaptationConfig | None = None) -> SeedArtifacts:
    """Load a seed's cache, checking provenance against ``cfg``."""
    d = seed_dir(cfg, seed)
    mpath = d / PATHS["manifest"]
    if not mpath.exists():
        raise StalenessError(f"no cache for seed {seed} under {cfg.cache_dir}; run build-cache first")
    manifest = json.loads(mpath.read_text())
    if manifest.get("source_digest") != cfg.source_digest():
        raise StalenessError(f"cache for seed {seed} was built from a different configuration; rebuild it")
    encoder = load_weights(d / PATHS["weights"])
    if encoder.checksum() != manifest["weights_checksum"]:
        raise StalenessError(f"seed {seed}: weight checkpoint does not match the manifest")
    cache = ProxyCache.load(d / PATHS["proxy"])
    proxy_hash = cache.digest()
    if proxy_hash != manifest["proxy_hash"]:
        raise StalenessError(f"seed {seed}: proxy cache does not match the manifest")
    prompts = restore_prompts(d / PATHS["prompts"], proxy_hash, encoder.checksum())
    bank = load_bank(d / PATHS["bank"], encoder.cfg.class_count, proxy_hash, prompts.digest())
    p_hat = bank_p_hat = None
    fresh = manifest.get("meta_digest") == cfg.meta_digest(adaptation)
    if need_p_hat and not fresh:
        raise StalenessError(f"seed {seed}: saved p_hat came from different meta-train settings; "
                             "run save-prompts")
    if fresh:
        p_hat = restore_prompts(d / PATHS["p_hat"], proxy_hash, prompts.digest())
        bank_p_hat = load_bank(d / PATHS["bank_p_hat"], encoder.cfg.class_count, proxy_hash, p_hat.digest())
    spec, _ = cfg.for_seed(seed)
    return SeedArtifacts(seed, encoder, prompts, cache, bank, p_hat, make_generators(spec), manifest,
                         bank_p_hat)


def save_p_hat(cfg: BenchConfig, seed: int, out=None) -> Path:
    """Recompute ``p_hat`` for ``seed`` under the current meta-train settings and save it."""
    art = load_artifacts(cfg, seed)
    adapter = TestTimeAdapter(art.encoder, art.cache, cfg.adaptation, cfg.synonym_table(),
                              art.generators.background)
    p_hat, _ = adapter.meta_train_step(art.prompts)
    path = Path(out) if out else seed_dir(cfg, seed) / PATHS["p_hat"]
    save_prompts(p_hat, path, art.proxy_hash, art.prompts.digest())
    if out is None:
        save_bank(class_prototypes(art.encoder, art.cache, p_hat), seed_dir(cfg, seed) / PATHS["bank_p_hat"])
        mpath = seed_dir(cfg, seed) / PATHS["manifest"]
        manifest = json.loads(mpath.read_text())
        manifest.update(meta_digest=cfg.meta_digest(), p_hat_hash=p_hat.digest())
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


# methods and episodes


def method_config(base: AdaptationConfig, method: str) -> AdaptationConfig | None:
    """Adaptation settings for one benchmark method (``None`` for zero-shot)."""
    loss = base.loss
    if method == "zero_shot":
        return None
    if method == "ent_only":
        return replace(base, mode="full", use_meta_train=False, loss=replace(loss, w_align=0.0))
    if method == "align_only":
        return replace(base, mode="full", use_meta_train=False, loss=replace(loss, w_ent=0.0))
    if method == "disc_only":
        return replace(base, mode="full", keep_meta_train_update=True,
                       loss=replace(loss, w_ent=0.0, w_align=0.0))
    if method == "full":
        return replace(base, mode="full")
    if method == "star":
        return replace(base, mode="star")
    raise ValueError(method)


def test_sets(cfg: BenchConfig, art: SeedArtifacts, per_class: int | None = None) -> list[Dataset]:
    base = draw(art.generators, cfg.test_per_class if per_class is None else per_class, TEST_STREAM)
    return [apply_shift(base, replace(s, seed=art.seed)) for s in cfg.shifts]


def shift_labels(shifts) -> list[str]:
    names = [s.kind for s in shifts]
    return [n if names.count(n) == 1 else f"{n}@{s.magnitude:g}" for n, s in zip(names, shifts)]


def episode_seed(seed: int, shift_index: int, sample_index: int) -> int:
    return seed * 1_000_003 + shift_index * 10_007 + sample_index


_JOB: dict = {}


def _episode(task):
    j, i = task
    job = _JOB
    sample = job["sets"][j].images[i]
    try:
        r = job["adapter"].adapt_sample(sample, job["prompts"], seed=episode_seed(job["seed"], j, i),
                                        p_hat=job["p_hat"], bank=job["bank"])
    except Exception as exc:  # noqa: BLE001 - re-raised with the sample id
        kind = job["kinds"][j]
        raise EpisodeError(f"episode failed: seed {job['seed']}, shift {kind}, sample {i}: {exc}") from exc
    trace = r.loss_trace[0]
    losses = {k: float(np.mean([v for v in trace[k] if v is not None]))
              for k in ("disc", "ent", "align") if any(v is not None for v in trace[k])}
    return r.prediction, r.backward_passes, losses, r.wall_clock, r.p_hat_digest


def _map(tasks, threads):
    if threads <= 1 or len(tasks) < 2:
        return [_episode(t) for t in tasks]
    ctx = mp.get_context("fork")
    with ctx.Pool(threads) as pool:
        return pool.map(_episode, tasks, chunksize=max(1, len(tasks) // (4 * threads)))


def run_method(cfg: BenchConfig, art: SeedArtifacts, method: str, sets: list[Dataset],
               adaptation: AdaptationConfig | None = None, threads: int | None = None) -> dict:
    """Predictions and per-episode accounting for one method on one seed."""
    t0 = time.perf_counter()
    acfg = method_config(adaptation or cfg.adaptation, method)
    kinds = shift_labels(cfg.shifts)
    if acfg is None:
        preds = [np.argmax(art.encoder.predict_probs(d.images, art.prompts).data, axis=1).tolist() for d in sets]
        return {"predictions": preds, "backward": [[0] * len(d) for d in sets], "losses": [],
                "episode_seconds": [], "seconds": time.perf_counter() - t0}
    if acfg.mode == "star" and art.p_hat is None:
        raise StalenessError(f"seed {art.seed}: star mode needs a saved p_hat")
    adapter = TestTimeAdapter(art.encoder, art.cache, acfg, cfg.synonym_table(), art.generators.background)
    _JOB.clear()
    # a saved bank is only used when its provenance matches the prompts it is needed for
    meta = acfg.mode == "star" or (acfg.use_meta_train and acfg.meta_train_steps > 0)
    bank = art.bank_p_hat if meta and art.bank_p_hat is not None else art.bank
    _JOB.update(adapter=adapter, prompts=art.prompts, p_hat=art.p_hat if acfg.mode == "star" else None,
                bank=bank, sets=sets, seed=art.seed, kinds=kinds)
    tasks = [(j, i) for j, d in enumerate(sets) for i in range(len(d))]
    results = _map(tasks, worker_count() if threads is None else threads)
    preds = [[] for _ in sets]
    backward = [[] for _ in sets]
    for (j, _), (pred, bp, _, _, _) in zip(tasks, results):
        preds[j].append(pred)
        backward[j].append(bp)
    return {"predictions": preds, "backward": backward, "losses": [r[2] for r in results],
            "episode_seconds": [r[3] for r in results], "p_hat_digests": sorted({r[4] for r in results}),
            "seconds": time.perf_counter() - t0}


# reports


@dataclass
class BenchReport:
    """Run results. ``timing`` holds every wall-clock field and is written to its own file."""

    kind: str
    config_hash: str
    proxy_hash: str
    build_id: str
    seeds: list
    shifts: list
    rows: list = field(default_factory=list)
    details: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def row(self, **values) -> dict:
        r = dict(values, config_hash=self.config_hash, proxy_hash=self.proxy_hash, build_id=self.build_id)
        self.rows.append(r)
        return r

    def results(self) -> dict:
        return {"kind": self.kind, "config_hash": self.config_hash, "proxy_hash": self.proxy_hash,
                "build_id": self.build_id, "seeds": self.seeds, "shifts": self.shifts,
                "rows": self.rows, "checks": self.checks, "details": self.details}

    def accuracy(self, key: str, value, field_name: str = "method") -> float:
        for r in self.rows:
            if r.get(field_name) == value:
                return r[key]
        raise KeyError(value)

    def table(self) -> str:
        return format_table(self.kind, self.rows, [s["label"] for s in self.shifts])

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"results": out / f"{self.kind}.json", "timing": out / f"{self.kind}.timing.json",
                 "table": out / f"{self.kind}.txt"}
        paths["results"].write_text(json.dumps(self.results(), indent=1, sort_keys=True) + "\n")
        paths["timing"].write_text(json.dumps(self.timing, indent=1, sort_keys=True) + "\n")
        paths["table"].write_text(self.table() + "\n")
        return paths

    @classmethod
    def read(cls, path) -> "BenchReport":
        path = Path(path)
        data = json.loads(path.read_text())
        timing_path = path.with_name(path.stem + ".timing.json")
        timing = json.loads(timing_path.read_text()) if timing_path.exists() else {}
        return cls(data["kind"], data["config_hash"], data["proxy_hash"], data["build_id"], data["seeds"],
                   data["shifts"], data["rows"], data.get("details", {}), data.get("checks", {}), timing)


TABLE_COLUMNS = {
    "benchmark": ("method", "top1", "backward_mean", "episodes"),
    "ablation": ("variant", "top1", "zero_shot_top1", "episodes"),
    "sweep_views": ("views", "zero_shot_top1", "full_top1", "episodes"),
    "sweep_steps": ("steps", "zero_shot_top1", "full_top1", "backward_mean", "episodes"),
}


def format_table(kind: str, rows: list[dict], shift_order=None) -> str:
    cols = TABLE_COLUMNS.get(kind, ("method", "top1"))
    extra = []
    if rows and "top1_per_shift" in rows[0]:
        extra = list(shift_order or rows[0]["top1_per_shift"])
    header = list(cols) + extra
    cells = []
    for r in rows:
        line = [_fmt(r.get(c)) for c in cols] + [_fmt(r["top1_per_shift"][k]) for k in extra]
        cells.append(line)
    widths = [max(len(h), *(len(c[i]) for c in cells)) if cells else len(h) for i, h in enumerate(header)]
    out = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    out.append("  ".join("-" * w for w in widths))
    out += ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(line, widths)))
            for line in cells]
    return "\n".join(out)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _new_report(cfg: BenchConfig, kind: str, seeds, proxy_hashes: list[str]) -> BenchReport:
    return BenchReport(kind, cfg.digest(), _hash(proxy_hashes), build_id(), list(seeds),
                       [{"kind": s.kind, "magnitude": s.magnitude, "label": label}
                        for s, label in zip(cfg.shifts, shift_labels(cfg.shifts))])


def _accuracy(preds: dict, labels: dict, seeds) -> tuple[float, list, list]:
    """Mean top-1 over all episodes, per seed, and per shift index."""
    per_seed = [float(np.mean(np.concatenate([np.equal(p, l) for p, l in zip(preds[s], labels[s])])))
                for s in seeds]
    n_shifts = len(next(iter(labels.values())))
    per_shift = [float(np.mean(np.concatenate([np.equal(preds[s][j], labels[s][j]) for s in seeds])))
                 for j in range(n_shifts)]
    allv = np.concatenate([np.equal(p, l) for s in seeds for p, l in zip(preds[s], labels[s])])
    return float(np.mean(allv)), per_seed, per_shift


def _evaluate(cfg: BenchConfig, methods, seeds, adaptation=None, per_class=None, log=None):
    """Run ``methods`` on every seed; returns per-method outputs plus labels and proxy hashes."""
    outputs = {m: {} for m in methods}
    labels, hashes = {}, []
    for seed in seeds:
        art = load_artifacts(cfg, seed, need_p_hat="star" in methods, adaptation=adaptation)
        hashes.append(art.proxy_hash)
        sets = test_sets(cfg, art, per_class)
        labels[seed] = [d.labels.tolist() for d in sets]
        for m in methods:
            outputs[m][seed] = run_method(cfg, art, m, sets, adaptation)
            if log:
                log(f"seed {seed} {m}: {outputs[m][seed]['seconds']:.1f}s")
    return outputs, labels, hashes


def _method_row(report: BenchReport, name_key: str, name, out: dict, labels: dict, seeds, kinds) -> dict:
    preds = {s: out[s]["predictions"] for s in seeds}
    top1, per_seed, per_shift = _accuracy(preds, labels, seeds)
    backward = [b for s in seeds for shift in out[s]["backward"] for b in shift]
    losses = [entry for s in seeds for entry in out[s]["losses"]]
    mean_losses = {k: float(np.mean([e[k] for e in losses if k in e]))
                   for k in ("disc", "ent", "align") if any(k in e for e in losses)}
    return report.row(**{name_key: name}, top1=top1, top1_per_seed=per_seed,
                      top1_per_shift=dict(zip(kinds, per_shift)), mean_losses=mean_losses,
                      backward_mean=float(np.mean(backward)), backward_min=int(min(backward)),
                      backward_max=int(max(backward)), episodes=len(backward))


def _timing(out: dict, seeds) -> dict:
    eps = [t for s in seeds for t in out[s]["episode_seconds"]]
    return {"seconds": float(sum(out[s]["seconds"] for s in seeds)),
            "episode_mean_seconds": float(np.mean(eps)) if eps else 0.0}


def run_benchmark(cfg: BenchConfig, methods=None, seeds=None, adaptation: AdaptationConfig | None = None,
                  log=None) -> BenchReport:
    """Every enabled method on every test sample of every seed."""
    methods = tuple(cfg.methods if methods is None else methods)
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    kinds = shift_labels(cfg.shifts)
    outputs, labels, hashes = _evaluate(cfg, methods, seeds, adaptation, log=log)
    report = _new_report(cfg, "benchmark", seeds, hashes)
    for m in methods:
        _method_row(report, "method", m, outputs[m], labels, seeds, kinds)
        report.timing[m] = _timing(outputs[m], seeds)
    report.details = {"labels": {str(s): labels[s] for s in seeds},
                      "predictions": {m: {str(s): outputs[m][s]["predictions"] for s in seeds} for m in methods},
                      "backward": {m: {str(s): outputs[m][s]["backward"] for s in seeds} for m in methods}}
    return report


def run_ablation(cfg: BenchConfig, variants=None, seeds=None, log=None) -> BenchReport:
    """The full method once per alignment-loss variant, on identical seeds and samples."""
    variants = tuple(cfg.variants if variants is None else variants)
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    kinds = shift_labels(cfg.shifts)
    report = None
    for v in variants:
        adaptation = replace(cfg.adaptation, loss=replace(cfg.adaptation.loss, variant=v))
        outputs, labels, hashes = _evaluate(cfg, ("zero_shot", "full"), seeds, adaptation, log=log)
        if report is None:
            report = _new_report(cfg, "ablation", seeds, hashes)
        row = _method_row(report, "variant", v, outputs["full"], labels, seeds, kinds)
        zs, _, _ = _accuracy({s: outputs["zero_shot"][s]["predictions"] for s in seeds}, labels, seeds)
        row["zero_shot_top1"] = zs
        report.timing[v] = _timing(outputs["full"], seeds)
    return report


def _sweep(cfg: BenchConfig, kind: str, key: str, values, make, log=None) -> BenchReport:
    seeds = tuple(cfg.sweep_seeds)
    kinds = shift_labels(cfg.shifts)
    report = None
    baseline = []
    for value in values:
        adaptation = make(value)
        outputs, labels, hashes = _evaluate(cfg, ("zero_shot", "full"), seeds, adaptation,
                                            per_class=cfg.sweep_test_per_class, log=log)
        if report is None:
            report = _new_report(cfg, kind, seeds, hashes)
        row = _method_row(report, key, value, outputs["full"], labels, seeds, kinds)
        row["full_top1"] = row.pop("top1")
        zs, _, _ = _accuracy({s: outputs["zero_shot"][s]["predictions"] for s in seeds}, labels, seeds)
        row["zero_shot_top1"] = zs
        baseline.append({s: outputs["zero_shot"][s]["predictions"] for s in seeds})
        report.timing[str(value)] = _timing(outputs["full"], seeds)
    report.checks = {"zero_shot_constant": all(b == baseline[0] for b in baseline),
                     "values": list(values)}
    return report


def sweep_views(cfg: BenchConfig, views=None, log=None) -> BenchReport:
    """Full method over test-time view counts; zero-shot is the constant baseline."""
    views = tuple(cfg.sweep_views if views is None else views)
    return _sweep(cfg, "sweep_views", "views", views,
                  lambda v: replace(cfg.adaptation, views=replace(cfg.adaptation.views, n_views=v)), log)


def sweep_steps(cfg: BenchConfig, steps=None, log=None) -> BenchReport:
    """Full method over accumulation iterations ``n``."""
    steps = tuple(cfg.sweep_steps if steps is None else steps)
    return _sweep(cfg, "sweep_steps", "steps", steps, lambda n: replace(cfg.adaptation, n=n), log)


__all__ = ["BenchReport", "SeedArtifacts", "build_cache", "build_seed", "load_artifacts", "method_config",
           "run_ablation", "run_benchmark", "run_method", "save_p_hat", "sweep_steps", "sweep_views",
           "test_sets", "worker_count"]
