"""Behaviour of a matcher trained for the full 2k-step schedule (shared session fixture)."""
import numpy as np
import pytest

from bluref.datasetproto import matching_content_percentage
from bluref.densematch import MatcherNet, MatcherTrainConfig, brute_force_match, mean_epe, predict, train_matcher
from bluref.imgcore import warp_backward
from bluref.synthgen import DegradationConfig, WarpConfig, WarpPairStream, random_texture, texture_pool

from conftest import matcher_heldout

pytestmark = pytest.mark.slow


def test_trained_beats_fresh(trained_matcher):
    held = matcher_heldout(32)
    assert mean_epe(trained_matcher, held) < mean_epe(MatcherNet(), held)


@pytest.mark.parametrize("seed", range(4))
def test_self_match(trained_matcher, seed):
    img = random_texture(64, 64, 500 + seed)
    res = predict(trained_matcher, img, img)
    sure = res.confidence >= 0.7
    assert sure.mean() > 0.5
    assert np.linalg.norm(res.flow, axis=-1)[sure].mean() <= 0.5
    assert np.abs(warp_backward(img, res.flow) - img)[sure].mean() <= 0.02


@pytest.mark.parametrize("seed", range(4))
def test_agrees_with_brute_force(trained_matcher, seed):
    img = random_texture(64, 64, 600 + seed)
    ref = np.roll(img, (-1, 2), axis=(0, 1))
    net = predict(trained_matcher, img, ref)
    brute = brute_force_match(img, ref, patch=7, radius=4)
    both = (net.confidence >= 0.9) & (brute.confidence >= 0.9)
    both[:4], both[-4:], both[:, :4], both[:, -4:] = False, False, False, False
    assert both.mean() > 0.3
    gap = np.linalg.norm(net.flow - brute.flow, axis=-1)[both]
    # sub-pixel net against integer brute force: allow a thin tail
    assert np.quantile(gap, 0.95) <= 1.0 and gap.max() <= 2.0


def test_matching_content_percentage(trained_matcher):
    imgs = [random_texture(64, 64, 700 + s) for s in range(4)]
    noise = np.random.default_rng(0).random((64, 64, 3))
    for img in imgs:
        assert matching_content_percentage(img, [img], trained_matcher) >= 85.0
        assert matching_content_percentage(img, [noise], trained_matcher) <= 10.0


def test_translation_only_training():
    warps = [WarpConfig(corner_perturbation=0.0, max_translation=4.0)]
    stream = WarpPairStream(texture_pool(48, (128, 128), 11), warps, DegradationConfig(), 3)
    held = WarpPairStream(texture_pool(16, (128, 128), 12), warps, DegradationConfig(), 4).take(48)
    net, _ = train_matcher(stream, MatcherTrainConfig(steps=2000, batch_size=4, log_every=0), seed=0)
    assert mean_epe(net, held) <= 1.0
