from dataclasses import replace

import numpy as np
import pytest

from promptsync import tensor as T
from promptsync.adapt import AdamW, AdaptationConfig, TestTimeAdapter, restore_prompts, save_prompts
from promptsync.augment import ViewSpec
from promptsync.bench.synthetic import SyntheticSpec, draw, generate_source
from promptsync.encoders import EncoderConfig
from promptsync.errors import ConfigError
from promptsync.losses import LossConfig, combined_objective, entropy_loss
from promptsync.prototypes import build_proxy_cache, class_prototypes
from support import random_prompts, tiny_synonyms

VIEWS = ViewSpec(n_views=12, seed=1)
LOSS = LossConfig(rho=0.25, tau_contrast=0.5)


@pytest.fixture
def prompts(tiny_cfg):
    return random_prompts(tiny_cfg, 21)


@pytest.fixture
def sample(tiny_cfg):
    return np.random.default_rng(3).normal(size=(tiny_cfg.patch_count, tiny_cfg.patch_dim))


def adapter(encoder, cache, **kw):
    cfg = AdaptationConfig(**{"views": VIEWS, "loss": LOSS, **kw})
    return TestTimeAdapter(encoder, cache, cfg, tiny_synonyms(encoder.cfg), np.zeros((4, 3)))


class TestAdamW:
    def test_first_step_by_hand(self):
        p, g = np.array([1.0, -2.0, 0.5]), np.array([0.3, -0.1, 0.0])
        out = AdamW(0.1, weight_decay=0.01).step([p], [g])[0]
        # bias-corrected first moment over root second moment is g / |g|
        want = p - 0.1 * 0.01 * p - 0.1 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(out, want, rtol=0, atol=1e-15)

    def test_two_steps_by_hand(self):
        p, g1, g2 = np.array([0.5]), np.array([1.0]), np.array([-3.0])
        opt = AdamW(0.01, betas=(0.8, 0.9), weight_decay=0.0, eps=0.0)
        p1 = opt.step([p], [g1])[0]
        p2 = opt.step([p1], [g2])[0]
        m = (0.2 * 0.8 * 1.0 + 0.2 * -3.0) / (1 - 0.64)
        v = (0.1 * 0.9 * 1.0 + 0.1 * 9.0) / (1 - 0.81)
        assert p2[0] == pytest.approx(p[0] - 0.01 - 0.01 * m / np.sqrt(v), abs=1e-15)


class TestMetaTrain:
    def test_zero_lr_is_identity(self, tiny_encoder, tiny_cache, prompts):
        p_hat, trace = adapter(tiny_encoder, tiny_cache, lr=0.0).meta_train_step(prompts)
        assert p_hat.text_prompts.data.tobytes() == prompts.text_prompts.data.tobytes()
        assert p_hat.coupling.data.tobytes() == prompts.coupling.data.tobytes()
        assert len(trace) == 1

    def test_deterministic(self, tiny_encoder, tiny_cache, prompts):
        a = adapter(tiny_encoder, tiny_cache).meta_train_step(prompts)[0]
        b = adapter(tiny_encoder, tiny_cache).meta_train_step(prompts)[0]
        assert a.digest() == b.digest()

    def test_input_unchanged(self, tiny_encoder, tiny_cache, prompts):
        before = prompts.digest()
        adapter(tiny_encoder, tiny_cache).meta_train_step(prompts)
        assert prompts.digest() == before

    @pytest.mark.parametrize("seed", range(3))
    def test_descent_small_step(self, tiny_encoder, tiny_cache, seed):
        p = random_prompts(tiny_encoder.cfg, seed)
        ad = adapter(tiny_encoder, tiny_cache, lr=1e-4)
        p_hat, trace = ad.meta_train_step(p)
        assert ad.discriminating_value(p_hat) < trace[0]

    def test_coupling_flag(self, tiny_encoder, tiny_cache, prompts):
        p_hat = adapter(tiny_encoder, tiny_cache, tune_coupling=False).meta_train_step(prompts)[0]
        np.testing.assert_array_equal(p_hat.coupling.data, prompts.coupling.data)
        assert not np.array_equal(p_hat.text_prompts.data, prompts.text_prompts.data)


class TestMetaTest:
    def setup(self, enc, cache, prompts, sample, **kw):
        ad = adapter(enc, cache, **kw)
        bank = class_prototypes(enc, cache, prompts).detach()
        return ad, ad.make_views(sample, 5), bank

    def test_zero_weights_zero_gradient(self, tiny_encoder, tiny_cache, prompts, sample):
        ad, views, bank = self.setup(tiny_encoder, tiny_cache, prompts, sample,
                                     loss=replace(LOSS, w_ent=0.0, w_align=0.0))
        grads, values, _ = ad.meta_test_grads(prompts, sample, views, bank)
        assert all(not g.any() for g in grads) and values["objective"] == 0.0

    def test_single_member(self, tiny_encoder, tiny_cache, prompts, sample):
        # rho small enough that only the original sample survives the filter
        ad, views, bank = self.setup(tiny_encoder, tiny_cache, prompts, sample,
                                     loss=replace(LOSS, rho=0.05, w_align=0.0))
        grads, _, fset = ad.meta_test_grads(prompts, sample, views, bank)
        assert fset.members.tolist() == [-1]
        leaves = prompts.leaves()
        with T.Tape() as tape:
            loss = entropy_loss(tiny_encoder.predict_probs(sample[None], leaves)[0])
        g = T.backward(loss, tape)
        for got, leaf in zip(grads, leaves.params()):
            np.testing.assert_allclose(got, g[leaf], rtol=1e-12, atol=1e-15)

    def test_objective_value(self, tiny_encoder, tiny_cache, prompts, sample):
        ad, views, bank = self.setup(tiny_encoder, tiny_cache, prompts, sample)
        _, values, fset = ad.meta_test_grads(prompts, sample, views, bank)
        want = combined_objective(fset.mean_probs, T.as_tensor(values["align"]), LOSS).item()
        assert values["objective"] == pytest.approx(want, rel=1e-12)
        assert len(fset) == 1 + 3


class TestEpisode:
    def test_noop_equals_zero_shot(self, tiny_encoder, tiny_cache, prompts):
        ad = adapter(tiny_encoder, tiny_cache, lr=0.5, loss=replace(LOSS, w_ent=0.0, w_align=0.0))
        xs = np.random.default_rng(9).normal(size=(8, 4, 3))
        zs = np.argmax(ad.zero_shot(xs, prompts), axis=1)
        for i, x in enumerate(xs):
            r = ad.adapt_sample(x, prompts, seed=i)
            assert r.prediction == zs[i]
            assert r.final_prompts.digest() == prompts.digest()

    def test_backward_counts(self, tiny_encoder, tiny_cache, prompts, sample):
        assert adapter(tiny_encoder, tiny_cache).adapt_sample(sample, prompts).backward_passes == 2
        assert adapter(tiny_encoder, tiny_cache, n=3, meta_train_steps=2).adapt_sample(
            sample, prompts).backward_passes == 5
        p_hat = adapter(tiny_encoder, tiny_cache).meta_train_step(prompts)[0]
        star = adapter(tiny_encoder, tiny_cache, mode="star", n=3)
        assert star.adapt_sample(sample, prompts, p_hat=p_hat).backward_passes == 3

    def test_star_needs_prompts(self, tiny_encoder, tiny_cache, prompts, sample):
        with pytest.raises(ConfigError):
            adapter(tiny_encoder, tiny_cache, mode="star").adapt_sample(sample, prompts)

    def test_star_matches_full(self, tiny_encoder, tiny_cache, prompts, tmp_path):
        full = adapter(tiny_encoder, tiny_cache, n=2)
        p_hat = full.meta_train_step(prompts)[0]
        save_prompts(p_hat, tmp_path / "p.pspt", tiny_cache.digest(), prompts.digest())
        restored = restore_prompts(tmp_path / "p.pspt", tiny_cache.digest(), prompts.digest())
        star = adapter(tiny_encoder, tiny_cache, n=2, mode="star")
        for i, x in enumerate(np.random.default_rng(4).normal(size=(5, 4, 3))):
            a = full.adapt_sample(x, prompts, seed=i)
            b = star.adapt_sample(x, prompts, seed=i, p_hat=restored)
            assert a.prediction == b.prediction and np.array_equal(a.probs, b.probs)
            assert np.array_equal(a.members, b.members) and a.p_hat_digest == b.p_hat_digest
            assert a.backward_passes > b.backward_passes

    def test_invariants(self, tiny_encoder, tiny_cache, prompts, sample):
        checksum, digest = tiny_encoder.checksum(), prompts.digest()
        ad = adapter(tiny_encoder, tiny_cache, n=2)
        a = ad.adapt_sample(sample, prompts, seed=3)
        b = ad.adapt_sample(sample, prompts, seed=3)
        assert tiny_encoder.checksum() == checksum and prompts.digest() == digest
        assert a.probs.tobytes() == b.probs.tobytes()
        assert a.final_prompts.digest() == b.final_prompts.digest()

    def test_first_order_accumulation(self, tiny_encoder, tiny_cache, prompts, sample):
        ad = adapter(tiny_encoder, tiny_cache, n=2)
        result = ad.adapt_sample(sample, prompts, seed=7)
        p_hat = ad.meta_train_step(prompts)[0]
        bank = class_prototypes(tiny_encoder, tiny_cache, p_hat)
        g1 = ad.meta_test_grads(p_hat, sample, ad.make_views(sample, 7), bank)[0]
        g2 = ad.meta_test_grads(p_hat, sample, ad.make_views(sample, 8), bank)[0]
        mean = [(a + b) / 2 for a, b in zip(g1, g2)]
        want = AdamW(0.04).step([prompts.text_prompts.data, prompts.coupling.data], mean)
        np.testing.assert_allclose(result.final_prompts.text_prompts.data, want[0], rtol=0, atol=1e-14)
        np.testing.assert_allclose(result.final_prompts.coupling.data, want[1], rtol=0, atol=1e-14)

    def test_keep_meta_train_update(self, tiny_encoder, tiny_cache, prompts, sample):
        ad = adapter(tiny_encoder, tiny_cache, keep_meta_train_update=True,
                     loss=replace(LOSS, w_ent=0.0, w_align=0.0))
        r = ad.adapt_sample(sample, prompts)
        assert r.final_prompts.digest() == r.p_hat_digest != prompts.digest()

    def test_predict_from_filtered(self, tiny_encoder, tiny_cache, prompts, sample):
        r = adapter(tiny_encoder, tiny_cache, predict_from="filtered").adapt_sample(sample, prompts)
        assert abs(r.probs.sum() - 1) < 1e-12 and r.prediction == int(np.argmax(r.probs))

    def test_loss_trace(self, tiny_encoder, tiny_cache, prompts, sample):
        r = adapter(tiny_encoder, tiny_cache, n=2).adapt_sample(sample, prompts)
        trace = r.loss_trace[0]
        assert len(trace["disc"]) == 1 and len(trace["ent"]) == len(trace["align"]) == 2


class TestBank:
    def test_reuse_and_recompute(self, tiny_encoder, tiny_cache, prompts):
        ad = adapter(tiny_encoder, tiny_cache)
        bank = class_prototypes(tiny_encoder, tiny_cache, prompts)
        assert ad.bank_for(prompts, bank) is bank
        other = random_prompts(tiny_encoder.cfg, 99)
        fresh = ad.bank_for(other, bank)
        assert fresh is not bank and fresh.prompt_hash == other.digest()

    def test_frozen(self, tiny_encoder, tiny_cache, prompts):
        ad = adapter(tiny_encoder, tiny_cache, bank_mode="frozen")
        bank = class_prototypes(tiny_encoder, tiny_cache, prompts)
        assert ad.bank_for(random_prompts(tiny_encoder.cfg, 1), bank) is bank
        with pytest.raises(ConfigError):
            ad.bank_for(prompts)


@pytest.mark.parametrize("kw", [dict(n=0), dict(lr=-1.0), dict(meta_train_steps=-1), dict(mode="fast"),
                                dict(bank_mode="x"), dict(predict_from="mean")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        AdaptationConfig(**kw)


def test_fine_grained_rate():
    assert AdaptationConfig().step_size == 0.04
    assert AdaptationConfig(fine_grained=True).step_size == 5e-4


@pytest.fixture(scope="module")
def separable():
    spec = SyntheticSpec(class_count=4, patch_count=9, patch_dim=6, samples_per_class=12, noise_std=0.3, seed=2)
    enc = EncoderConfig(embed_dim=16, layers=2, heads=2, patch_count=9, patch_dim=6, template_length=2,
                        vocab_size=16, prompt_depth=2, class_count=4, seed=2)
    src = generate_source(spec, enc, steps=60)
    images = np.stack([src.train.images[src.train.labels == c][:2] for c in range(4)])
    cache = build_proxy_cache(images, np.arange(2), ViewSpec(n_views=2, seed=2), src.generators.background,
                              tiny_synonyms(enc), 2)
    return src, cache


def test_confident_predictions_survive(separable):
    src, cache = separable
    test = draw(src.generators, 6, 3)
    probs = src.encoder.predict_probs(test.images, src.prompts).data
    top2 = np.sort(probs, axis=1)[:, -2:]
    confident = (np.argmax(probs, 1) == test.labels) & (top2[:, 1] - top2[:, 0] > 0.3)
    assert confident.sum() >= 10
    ad = TestTimeAdapter(src.encoder, cache, AdaptationConfig(views=ViewSpec(n_views=16)),
                         tiny_synonyms(src.encoder.cfg), src.generators.background)
    for i in np.flatnonzero(confident):
        assert ad.adapt_sample(test.images[i], src.prompts, seed=int(i)).prediction == test.labels[i]
