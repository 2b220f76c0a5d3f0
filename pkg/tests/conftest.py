import numpy as np
import pytest

from goat_tts.model.config import ModelConfig, config_for_world
from goat_tts.toy_world import WorldConfig, text_vocab


def tiny_config(seed: int = 0, **kw) -> ModelConfig:
    base = dict(M=2, d_model=8, n_heads=2, context=96, query_capacity=32, G=4, V_t=43, V_s=257,
                F=16, enc_channels=8, enc_heads=2, enc_max_len=64, proj_channels=8,
                head_std=0.3, init_std=0.3, seed=seed)
    base.update(kw)
    return ModelConfig(**base)


def small_config(seed: int = 0, **kw) -> ModelConfig:
    """World-compatible model that is quick to train for a few steps."""
    base = dict(M=4, d_model=16, n_heads=2, enc_channels=8, proj_channels=16, seed=seed)
    base.update(kw)
    return config_for_world(WorldConfig(), **base)


@pytest.fixture(scope="session")
def world():
    return WorldConfig()


@pytest.fixture(scope="session")
def vocab(world):
    return text_vocab(world)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance verdict for the summary."""
    def record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = (bool(ok), detail)
        return bool(ok)
    return record


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and rep.failed:
        n = marker.args[0]
        detail = ACCEPTANCE.get(n, (False, ""))[1]
        reason = str(call.excinfo.value).splitlines()[0][:120] if call.excinfo else rep.when
        ACCEPTANCE[n] = (False, f"{detail} [{item.name} failed: {reason}]".strip())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 12):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
