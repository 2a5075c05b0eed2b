import math

import numpy as np
import pytest

from promptsync import tensor as T
from promptsync.encoders import (CLS, CONTENT, EOS, PROMPT, SOS, DualEncoder, EncoderConfig, PromptState,
                                 couple_prompts, init_weights)
from promptsync.errors import ConfigError, InputError, ShapeError
from promptsync.tensor import Tensor
from support import prompt_grad_error, random_prompts, tiny_config


@pytest.fixture
def enc():
    return DualEncoder(tiny_config())


@pytest.fixture
def prompts():
    return random_prompts(tiny_config(), 5)


def patches(cfg, n=3, seed=0):
    return np.random.default_rng(seed).normal(size=(n, cfg.patch_count, cfg.patch_dim))


class TestEmbedText:
    def test_default_length(self):
        cfg = EncoderConfig()
        seq = DualEncoder(cfg).embed_text(np.arange(cfg.template_length), 0, PromptState.initial(cfg))
        assert seq.embeddings.shape[1] == cfg.template_length + cfg.prompt_count_text + 3

    def test_empty_template(self):
        cfg = tiny_config(template_length=0)
        seq = DualEncoder(cfg).embed_text(np.zeros(0, dtype=int), 1, PromptState.initial(cfg))
        assert seq.embeddings.shape[1] == cfg.prompt_count_text + 3
        assert seq.roles == (SOS, PROMPT, PROMPT, CONTENT, EOS)

    def test_class_locality(self, enc, prompts):
        cfg = enc.cfg
        a = enc.embed_text([1, 3], 0, prompts).embeddings.data[0]
        b = enc.embed_text([1, 3], 2, prompts).embeddings.data[0]
        slot = 1 + cfg.prompt_count_text + cfg.template_length
        differs = np.any(a != b, axis=1)
        assert differs.tolist() == [i == slot for i in range(len(a))]

    def test_roles_partition(self, enc):
        cfg = enc.cfg
        assert len(enc.text_roles) == cfg.text_tokens
        assert len(enc.visual_roles) == cfg.visual_tokens
        assert enc.text_roles.count(SOS) == enc.text_roles.count(EOS) == 1
        assert enc.visual_roles.count(CLS) == 1
        assert set(enc.text_roles) | set(enc.visual_roles) == {SOS, EOS, CLS, PROMPT, CONTENT}

    @pytest.mark.parametrize("cls", [-1, 3])
    def test_class_out_of_range(self, enc, prompts, cls):
        with pytest.raises(InputError):
            enc.embed_text([0, 1], cls, prompts)

    def test_bad_template(self, enc, prompts):
        with pytest.raises(InputError):
            enc.embed_text([0, 1, 2], 0, prompts)
        with pytest.raises(InputError):
            enc.embed_text([0, 99], 0, prompts)

    def test_mask_touches_only_one_prompt(self, enc, prompts):
        plain = enc.embed_text([0, 1], 1, prompts).embeddings.data[0]
        masked = enc.embed_text([0, 1], 1, prompts, mask_index=[1]).embeddings.data[0]
        assert np.flatnonzero(np.any(plain != masked, axis=1)).tolist() == [2]
        np.testing.assert_array_equal(masked[2], enc.w["text.pos"].data[2])


class TestEncode:
    def test_determinism(self, enc, prompts):
        x = patches(enc.cfg)
        a, b = enc.encode_image(x, prompts), enc.encode_image(x.copy(), prompts)
        assert a.tokens.data.tobytes() == b.tokens.data.tobytes()
        t1 = enc.encode_templates([[0, 1]], [2], prompts).tokens.data
        t2 = enc.encode_templates([[0, 1]], [2], prompts).tokens.data
        assert t1.tobytes() == t2.tobytes()

    def test_pooled_unit_norm(self, enc, prompts):
        img = enc.encode_image(patches(enc.cfg, 5), prompts).pooled.data
        txt = enc.class_text_features(prompts).data
        np.testing.assert_allclose(np.linalg.norm(img, axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(np.linalg.norm(txt, axis=1), 1.0, atol=1e-9)

    def test_shape_mismatch(self, enc, prompts):
        with pytest.raises(ShapeError):
            enc.encode_image(np.zeros((1, 5, enc.cfg.patch_dim)), prompts)

    @pytest.mark.parametrize("branch", ["text", "visual"])
    def test_pooled_gradient(self, branch):
        cfg = tiny_config(embed_dim=4, heads=1)
        enc = DualEncoder(cfg)
        x = patches(cfg, 2)
        w = Tensor(np.random.default_rng(1).normal(size=cfg.embed_dim))

        def loss(p):
            pooled = enc.encode_image(x, p).pooled if branch == "visual" else enc.class_text_features(p)
            return T.tensor_sum(pooled * w)

        p = random_prompts(cfg, 2)
        leaves = p.leaves()
        with T.Tape() as tape:
            out = loss(leaves)
        assert np.linalg.norm(T.backward(out, tape)[leaves.text_prompts]) > 0
        assert prompt_grad_error(loss, p) < 1e-4

    def test_gradients_only_on_prompts(self, enc, prompts):
        leaves = prompts.leaves()
        with T.Tape() as tape:
            loss = T.tensor_sum(enc.predict_probs(patches(enc.cfg), leaves) ** 2)
        grads = T.backward(loss, tape)
        assert set(grads) <= {leaves.text_prompts, leaves.coupling}
        assert not any(w.requires_grad for w in enc.w.values())

    def test_deep_prompts_used(self, enc, prompts):
        x = patches(enc.cfg, 1)
        # only the depth-1 prompts move
        deep_only = PromptState.from_arrays(prompts.text_prompts.data + np.array([0.0, 1.0])[:, None, None],
                                            prompts.coupling.data)
        base = enc.encode_image(x, prompts).tokens.data
        assert not np.array_equal(base, enc.encode_image(x, deep_only).tokens.data)


class TestPredict:
    def test_identical_text_features_uniform(self, enc, prompts):
        text = Tensor(np.tile(enc.class_text_features(prompts).data[:1], (3, 1)))
        probs = enc.predict_probs(patches(enc.cfg), prompts, text_features=text).data
        np.testing.assert_allclose(probs, 1 / 3, atol=1e-15)

    def test_two_class_softmax(self):
        cfg = tiny_config(class_count=2, temperature=0.5)
        enc = DualEncoder(cfg)
        e = np.eye(cfg.embed_dim)
        probs = enc.probs_from_features(Tensor(e[:1]), Tensor(e[:2])).data[0]
        assert probs[0] == pytest.approx(1 / (1 + math.exp(-1 / 0.5)), abs=1e-15)
        assert probs[0] == pytest.approx(0.8807970779778823, abs=1e-15)

    def test_sums_to_one(self, enc, prompts):
        probs = enc.predict_probs(patches(enc.cfg, 4), prompts).data
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_class_permutation_equivariance(self, prompts):
        cfg = tiny_config()
        w = init_weights(cfg)
        perm = np.array([2, 0, 1])
        w2 = dict(w, **{"text.class_embedding": w["text.class_embedding"][perm]})
        x = patches(cfg)
        a = DualEncoder(cfg, w).predict_probs(x, prompts).data
        b = DualEncoder(cfg, w2).predict_probs(x, prompts).data
        np.testing.assert_allclose(b, a[:, perm], rtol=0, atol=1e-14)


class TestCoupling:
    def test_identity(self):
        cfg = tiny_config()
        p = PromptState.initial(cfg)
        np.testing.assert_array_equal(p.visual_prompts.data, p.text_prompts.data)

    def test_zero(self):
        tp = np.random.default_rng(0).normal(size=(2, 2, 8))
        assert not couple_prompts(tp, np.zeros((2, 8, 8))).data.any()

    def test_gradient_through_coupling(self):
        cfg = tiny_config(embed_dim=4, heads=1)
        enc = DualEncoder(cfg)
        x = patches(cfg, 2)
        loss = lambda p: T.tensor_sum(enc.encode_image(x, p).tokens ** 2)
        p = random_prompts(cfg, 9)
        leaves = p.leaves()
        with T.Tape() as tape:
            out = loss(leaves)
        g = T.backward(out, tape)
        assert np.linalg.norm(g[leaves.text_prompts]) > 0 and np.linalg.norm(g[leaves.coupling]) > 0
        assert prompt_grad_error(loss, p) < 1e-4


class TestState:
    def test_digest_tracks_values(self, prompts):
        other = PromptState.from_arrays(prompts.text_prompts.data + 1e-12, prompts.coupling.data)
        assert prompts.digest() != other.digest()
        assert prompts.digest() == prompts.detach().digest()
        assert prompts.equals(prompts.leaves().detach())

    def test_leaves_respect_coupling_flag(self, prompts):
        assert not prompts.leaves(False).coupling.requires_grad
        assert prompts.leaves(False).text_prompts.requires_grad


@pytest.mark.parametrize("kw", [dict(prompt_depth=5, layers=4), dict(prompt_count_text=0),
                                dict(prompt_count_visual=3), dict(embed_dim=10, heads=4),
                                dict(temperature=0.0), dict(class_count=0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        EncoderConfig(**kw)


def test_weight_shape_checked():
    cfg = tiny_config()
    w = init_weights(cfg)
    w["visual.cls"] = np.zeros(3)
    with pytest.raises(ShapeError):
        DualEncoder(cfg, w)
    del w["visual.cls"]
    with pytest.raises(ConfigError):
        DualEncoder(cfg, w)
