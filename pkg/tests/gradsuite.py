"""Randomized desk fixtures whose objectives are differentiated w.r.t. the prompt tokens."""
import numpy as np

from promptsync import tensor as T
from promptsync.adapt import AdaptationConfig, TestTimeAdapter
from promptsync.augment import ViewSpec
from promptsync.encoders import DualEncoder
from promptsync.losses import VARIANTS, LossConfig, alignment_loss, discriminating_loss, entropy_loss
from promptsync.prototypes import build_proxy_cache, class_prototypes, token_prototype
from support import fd_prompt_grad, prompt_grad_error, random_prompts, tiny_config, tiny_synonyms

OBJECTIVES = ("entropy", "discriminating") + tuple(f"alignment:{v}" for v in VARIANTS) + ("meta_test",)


class Fixture:
    def __init__(self, seed: int):
        cfg = tiny_config(seed=seed, embed_dim=4, heads=1)
        self.cfg = cfg
        self.encoder = DualEncoder(cfg)
        rng = np.random.default_rng([seed, 99])
        shape = (cfg.patch_count, cfg.patch_dim)
        images = rng.normal(size=(cfg.class_count, 2) + shape)
        self.background = rng.normal(0, 0.1, size=shape)
        self.synonyms = tiny_synonyms(cfg)
        self.cache = build_proxy_cache(images, np.arange(cfg.template_length), ViewSpec(n_views=2, seed=seed),
                                       self.background, self.synonyms, cfg.prompt_count_text)
        self.prompts = random_prompts(cfg, seed + 1000)
        self.sample = rng.normal(size=shape)
        self.views = rng.normal(size=(3,) + shape)
        self.classes = rng.integers(0, cfg.class_count, size=4)
        self.templates = rng.integers(0, cfg.vocab_size, size=(4, cfg.template_length))
        self.bank = class_prototypes(self.encoder, self.cache, self.prompts).detach()
        self.tau = float(rng.uniform(0.3, 1.0))

    def images(self):
        return np.concatenate([self.sample[None], self.views])

    # objectives as functions of the prompts

    def entropy(self, p):
        return entropy_loss(T.mean(self.encoder.predict_probs(self.images(), p), axis=0))

    def discriminating(self, p):
        return discriminating_loss(class_prototypes(self.encoder, self.cache, p), LossConfig(tau_contrast=self.tau))

    def alignment(self, p, variant):
        enc = self.encoder
        vis = enc.encode_image(self.images(), p)
        probs = enc.probs_from_features(vis.pooled, enc.class_text_features(p))
        txt = enc.encode_templates(self.templates, self.classes, p)
        return alignment_loss(token_prototype(txt), token_prototype(vis), self.bank, T.mean(probs, axis=0),
                              LossConfig(variant=variant))

    def meta_test_error(self) -> float:
        """Whole meta-test objective: filter under p_hat, entropy plus alignment."""
        acfg = AdaptationConfig(views=ViewSpec(n_views=10, seed=self.cfg.seed), loss=LossConfig(rho=0.3))
        adapter = TestTimeAdapter(self.encoder, self.cache, acfg, self.synonyms, self.background)
        views = adapter.make_views(self.sample, self.cfg.seed)
        base = adapter.meta_test_grads(self.prompts, self.sample, views, self.bank)[2].members

        def value(p):
            _, vals, fset = adapter.meta_test_grads(p.detach(), self.sample, views, self.bank)
            assert np.array_equal(fset.members, base), "filter membership moved under the probe"
            return T.as_tensor(vals["objective"])

        grads, _, _ = adapter.meta_test_grads(self.prompts, self.sample, views, self.bank)
        analytic = np.concatenate([g.ravel() for g in grads])
        return T.relative_error(analytic, fd_prompt_grad(value, self.prompts))

    def defined(self, objective: str) -> bool:
        """False where the objective is infinite, so it has no gradient (sum_exp once the weighted cosine < ~1/709)."""
        if not objective.startswith("alignment:"):
            return True
        with np.errstate(over="ignore"):
            return bool(np.isfinite(self.alignment(self.prompts, objective.split(":", 1)[1]).item()))

    def error(self, objective: str) -> float:
        if objective == "meta_test":
            return self.meta_test_error()
        if objective.startswith("alignment:"):
            variant = objective.split(":", 1)[1]
            return prompt_grad_error(lambda p: self.alignment(p, variant), self.prompts)
        return prompt_grad_error(getattr(self, objective), self.prompts)

