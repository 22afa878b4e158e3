import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def textured():
    from bluref.synthgen import random_texture

    return random_texture(64, 64, seed=7)


HELDOUT_WARPS = ({"kind": "homography", "corner_perturbation": 0.0}, {"kind": "homography"})
MATCHER_WARPS = tuple({**w, "occluders": 3} for w in HELDOUT_WARPS)


def matcher_heldout(n: int = 64, warps=HELDOUT_WARPS):
    from bluref.synthgen import DegradationConfig, WarpConfig, WarpPairStream, texture_pool

    return WarpPairStream(texture_pool(16, (128, 128), 99), [WarpConfig(**w) for w in warps],
                          DegradationConfig(), 7).take(n)


@pytest.fixture(scope="session")
def trained_matcher():
    """2k-step matcher on translation and homography pairs, trained once per session."""
    import time

    from bluref.densematch import MatcherTrainConfig, train_matcher
    from bluref.synthgen import DegradationConfig, WarpConfig, WarpPairStream, texture_pool

    stream = WarpPairStream(texture_pool(48, (128, 128), 1), [WarpConfig(**w) for w in MATCHER_WARPS],
                            DegradationConfig(), 0)
    t0 = time.time()
    net, losses = train_matcher(stream, MatcherTrainConfig(steps=2000, batch_size=4, log_every=0), seed=0)
    net.train_seconds = time.time() - t0
    return net


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert."""

    def record(number: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
