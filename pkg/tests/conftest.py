import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from promptsync.augment import ViewSpec
from promptsync.encoders import DualEncoder
from promptsync.prototypes import build_proxy_cache
from support import tiny_config, tiny_synonyms

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_encoder(tiny_cfg):
    return DualEncoder(tiny_cfg)


@pytest.fixture
def tiny_cache(tiny_cfg):
    rng = np.random.default_rng(7)
    images = rng.normal(size=(tiny_cfg.class_count, 2, tiny_cfg.patch_count, tiny_cfg.patch_dim))
    background = rng.normal(0, 0.1, size=(tiny_cfg.patch_count, tiny_cfg.patch_dim))
    return build_proxy_cache(images, np.arange(tiny_cfg.template_length), ViewSpec(n_views=2, seed=3),
                             background, tiny_synonyms(tiny_cfg), tiny_cfg.prompt_count_text)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record an acceptance outcome; the session summary prints one line per criterion."""
    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
