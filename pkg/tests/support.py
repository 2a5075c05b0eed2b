"""Small shared builders for the test modules."""
import numpy as np

from promptsync.encoders import EncoderConfig, PromptState

TINY = dict(embed_dim=8, layers=2, heads=2, patch_count=4, patch_dim=3, template_length=2, vocab_size=8,
            prompt_count_text=2, prompt_count_visual=2, prompt_depth=2, class_count=3, temperature=0.5)


def tiny_config(**kw) -> EncoderConfig:
    return EncoderConfig(**{**TINY, **kw})


def random_prompts(cfg: EncoderConfig, seed: int, std: float = 0.3) -> PromptState:
    """Prompts away from the identity coupling so every gradient path is exercised."""
    rng = np.random.default_rng(seed)
    J, n, d = cfg.prompt_depth, cfg.prompt_count_text, cfg.embed_dim
    coupling = np.eye(d) + 0.2 * rng.normal(size=(J, d, d))
    return PromptState.from_arrays(rng.normal(0, std, size=(J, n, d)), coupling)


def tiny_synonyms(cfg: EncoderConfig) -> dict:
    L = cfg.template_length
    return {t: [t, t + L] for t in range(L)}


def prompt_vector(prompts: PromptState) -> np.ndarray:
    return np.concatenate([prompts.text_prompts.data.ravel(), prompts.coupling.data.ravel()])


def prompts_from_vector(vec, like: PromptState) -> PromptState:
    n = like.text_prompts.data.size
    tp = np.asarray(vec[:n]).reshape(like.text_prompts.shape)
    return PromptState.from_arrays(tp, np.asarray(vec[n:]).reshape(like.coupling.shape))


def fd_prompt_grad(value, prompts: PromptState, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``value(prompts)`` over every prompt coordinate."""
    base = prompt_vector(prompts)
    numeric = np.zeros_like(base)
    for i in range(base.size):
        hi, lo = base.copy(), base.copy()
        hi[i] += h
        lo[i] -= h
        numeric[i] = (float(value(prompts_from_vector(hi, prompts)).data)
                      - float(value(prompts_from_vector(lo, prompts)).data)) / (2 * h)
    return numeric


def prompt_grad_error(loss_fn, prompts: PromptState) -> float:
    """Relative error between the tape gradient of ``loss_fn(prompts)`` and central differences.

    The gradient covers both prompt tensors (text tokens and coupling).
    """
    from promptsync import tensor as T
    leaves = prompts.leaves(True)
    with T.Tape() as tape:
        loss = loss_fn(leaves)
    g = T.backward(loss, tape)
    analytic = np.concatenate([g.get(p, np.zeros(p.shape)).ravel() for p in leaves.params()])
    return T.relative_error(analytic, fd_prompt_grad(loss_fn, prompts))


TINY_BENCH = {
    "seeds": [0, 1],
    "test_per_class": 2,
    "proxy": {"samples_per_class": 2, "views_per_sample": 2},
    "calibration": {"steps": 60, "lr": 0.1, "min_accuracy": 0.8},
    "synthetic": {"class_count": 3, "patch_count": 4, "patch_dim": 4, "samples_per_class": 8,
                  "holdout_per_class": 10, "object_size": 2, "noise_std": 0.3},
    "encoder": {"embed_dim": 8, "layers": 2, "heads": 2, "patch_count": 4, "patch_dim": 4, "template_length": 2,
                "vocab_size": 8, "prompt_depth": 2, "class_count": 3},
    "adaptation": {"views": {"n_views": 8}, "loss": {"rho": 0.25}},
    "sweeps": {"views": [2, 4], "steps": [1, 2], "seeds": [0], "test_per_class": 1},
    "ablation": {"variants": ["full", "sub"]},
}


def tiny_bench(cache_dir, **overrides):
    from promptsync.bench.config import from_dict
    return from_dict({**TINY_BENCH, "cache_dir": str(cache_dir), **overrides})
