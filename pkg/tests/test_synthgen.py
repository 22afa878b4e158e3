from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bluref.imgcore import ImageError, inside_mask, warp_backward
from bluref.synthgen import (DegradationConfig, VideoConfig, WarpConfig, WarpPairStream, convolve, degrade,
                             homography_flow, make_warp_pair, motion_blur_kernel, random_texture, read_flow,
                             sample_degradation_plan, sample_flow_field, scene_layout, synthesize_blur,
                             synthesize_toy_video, tps_flow, write_flow, write_warp_pairs)

seeds = st.integers(0, 2**31 - 1)


def test_motion_kernel_examples():
    np.testing.assert_array_equal(motion_blur_kernel(1, 0.3), [[1.0]])
    k = motion_blur_kernel(3, 0.0)
    np.testing.assert_allclose(k[k.shape[0] // 2], [1 / 3, 1 / 3, 1 / 3], atol=1e-12)
    assert k.sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        motion_blur_kernel(0, 0.0)


@given(st.floats(1.0, 15.0), st.floats(0.0, 2 * np.pi))
def test_motion_kernel_normalized_and_preserves_constant(length, angle):
    k = motion_blur_kernel(length, angle)
    assert (k >= 0).all()
    assert abs(k.sum() - 1.0) <= 1e-9
    img = np.full((24, 24, 3), 0.37)
    np.testing.assert_allclose(convolve(img, k), img, atol=1e-12)


def test_degrade_disabled_is_identity(textured):
    assert np.array_equal(degrade(textured, DegradationConfig.disabled(), 3), textured)


@pytest.mark.parametrize("seed", range(5))
def test_linear_stages_preserve_constant(seed):
    img = np.full((32, 32, 3), 0.42)
    cfg = DegradationConfig.only("gaussian_blur", "aniso_blur", "motion_blur", "resample")
    np.testing.assert_allclose(degrade(img, cfg, seed), img, atol=1e-6)


def test_jpeg_quality_drawn_in_range():
    cfg = DegradationConfig.only("jpeg")
    qs = [sample_degradation_plan(cfg, s)[0][1]["quality"] for s in range(1000)]
    assert min(qs) >= 30 and max(qs) <= 60
    assert len(set(qs)) > 20


def test_kernel_sizes_drawn_from_set():
    cfg = DegradationConfig.only("gaussian_blur")
    ks = {sample_degradation_plan(cfg, s)[0][1]["ksize"] for s in range(200)}
    assert ks == {7, 9, 11}


def test_unshuffled_plan_keeps_declared_order():
    cfg = DegradationConfig.only("noise", "gaussian_blur", "jpeg")
    assert [s for s, _ in sample_degradation_plan(cfg, 0)] == ["gaussian_blur", "noise", "jpeg"]


def test_shuffle_varies_order():
    cfg = DegradationConfig(stage_prob=1.0)
    orders = {tuple(s for s, _ in sample_degradation_plan(cfg, i)) for i in range(50)}
    assert len(orders) > 10


@given(seeds)
def test_degrade_range_and_determinism(seed):
    img = np.random.default_rng(seed).random((24, 24, 3))
    a = degrade(img, DegradationConfig(), seed)
    assert np.isfinite(a).all() and a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, degrade(img, DegradationConfig(), seed))


def test_zero_strength_flows_are_zero():
    hom = WarpConfig(kind="homography", corner_perturbation=0, max_translation=0)
    assert not sample_flow_field(hom, 5).any()
    tps = WarpConfig(kind="thin_plate_spline", tps_sigma=0, max_translation=0)
    assert not sample_flow_field(tps, 5).any()
    ctrl = np.array([[0, 0], [10, 0], [0, 10], [10, 10]], dtype=float)
    assert not tps_flow(ctrl, np.zeros((4, 2)), 12, 12).any()


def test_translation_homography_gives_constant_flow():
    mat = np.array([[1, 0, 2.5], [0, 1, -1.25], [0, 0, 1]], dtype=float)
    flow = homography_flow(mat, 10, 12)
    np.testing.assert_allclose(flow[..., 0], 2.5)
    np.testing.assert_allclose(flow[..., 1], -1.25)


def test_identity_pair(textured):
    cfg = WarpConfig(corner_perturbation=0, max_translation=0)
    p = make_warp_pair(textured, cfg, DegradationConfig.disabled(), 0)
    assert np.array_equal(p.warped, p.gt)
    assert not p.gt_flow.any() and p.valid.all()


def test_integer_translation_pair(textured, monkeypatch):
    import bluref.synthgen as sg

    cfg = WarpConfig()
    hb, wb = cfg.big_size
    flow = np.zeros((hb, wb, 2))
    flow[..., 0] = 2.0
    monkeypatch.setattr(sg, "sample_flow_field", lambda c, s: flow)
    p = make_warp_pair(textured, cfg, DegradationConfig.disabled(), 0)
    v = p.valid.astype(bool)
    v[:, -2:] = False
    shifted = np.roll(p.gt, -2, axis=1)
    np.testing.assert_allclose(p.warped[v], shifted[v], atol=1e-12)


def test_small_source_rejected():
    with pytest.raises(ImageError):
        make_warp_pair(np.zeros((20, 40, 3)), WarpConfig(), DegradationConfig(), 0)


@given(seeds, st.sampled_from(["homography", "thin_plate_spline"]))
def test_warp_pair_consistency(seed, kind):
    src = random_texture(80, 80, seed % 1000)
    p = make_warp_pair(src, WarpConfig(kind=kind), DegradationConfig.disabled(), seed)
    v = p.valid > 0.5
    rec = warp_backward(p.gt, p.gt_flow)
    assert np.abs(rec - p.warped)[v].mean() <= 0.02
    np.testing.assert_array_equal(p.valid, inside_mask(p.gt_flow))


def test_disabled_degradation_reproduces_clean_geometry(textured):
    a = make_warp_pair(textured, WarpConfig(), DegradationConfig(), 11)
    b = make_warp_pair(textured, WarpConfig(), DegradationConfig.disabled(), 11)
    np.testing.assert_array_equal(a.gt_flow, b.gt_flow)


@pytest.mark.parametrize("seed", range(6))
def test_occluders_only_touch_marked_pixels(textured, seed):
    plain = make_warp_pair(textured, WarpConfig(), DegradationConfig.disabled(), seed)
    occ = make_warp_pair(textured, WarpConfig(occluders=3), DegradationConfig.disabled(), seed)
    assert plain.occluded is None
    assert set(np.unique(occ.occluded)) <= {0.0, 1.0}
    keep = occ.occluded == 0
    np.testing.assert_array_equal(occ.warped[keep], plain.warped[keep])
    np.testing.assert_array_equal(occ.gt_flow, plain.gt_flow)
    np.testing.assert_array_equal(occ.valid, plain.valid)


def test_occluders_appear_somewhere(textured):
    cover = [make_warp_pair(textured, WarpConfig(occluders=3), DegradationConfig.disabled(), s).occluded.mean()
             for s in range(20)]
    assert max(cover) > 0.02 and min(cover) >= 0.0


def test_video_determinism_and_motion():
    a = synthesize_toy_video(3, 10, dims=(48, 48))
    b = synthesize_toy_video(3, 10, dims=(48, 48))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert all(np.abs(x - y).mean() > 0 for x, y in zip(a, a[1:]))
    with pytest.raises(ValueError):
        synthesize_toy_video(3, 7)


def test_sprite_moves_at_configured_velocity():
    cfg = VideoConfig(height=64, width=64, pan_velocity=(0, 0), pan_jitter=0, shake_amplitude=0,
                      n_sprites=1, background_contrast=0.0, sprite_speed=(0.5, 0.5))
    layout = scene_layout(cfg, 5, 12)
    frames = synthesize_toy_video(5, 12, cfg=cfg)
    ys, xs = np.mgrid[0:64, 0:64]
    cents = []
    for f in frames:
        w = np.abs(f - 0.5).sum(-1)
        cents.append([(w * xs).sum() / w.sum(), (w * ys).sum() / w.sum()])
    steps = np.diff(np.array(cents), axis=0)
    # frames where the sprite crosses the border are skipped
    ok = np.linalg.norm(steps - layout.sprites[0].velocity, axis=1) < 0.1
    assert ok.mean() >= 0.7
    np.testing.assert_allclose(np.median(steps[ok], axis=0), layout.sprites[0].velocity, atol=0.03)


def test_synthesize_blur_examples():
    frames = [np.full((8, 8, 1), v) for v in (0.0, 1.0, 0.0, 1.0, 0.0)]
    np.testing.assert_allclose(synthesize_blur(frames, 3), 2 / 3)
    np.testing.assert_allclose(synthesize_blur(frames, 3, center=1), 1 / 3)
    np.testing.assert_allclose(synthesize_blur(frames, 3, center=2), 2 / 3)
    assert np.array_equal(synthesize_blur(frames, 1), frames[2])
    const = [np.full((8, 8, 3), 0.3)] * 5
    np.testing.assert_allclose(synthesize_blur(const, 5), 0.3)
    with pytest.raises(ValueError):
        synthesize_blur(frames, 7)
    with pytest.raises(ValueError):
        synthesize_blur(frames, 2)


def test_flow_file_layout(tmp_path, rng):
    flow = rng.normal(size=(5, 7, 2)).astype(np.float32).astype(np.float64)
    write_flow(tmp_path / "f.bflw", flow)
    raw = (tmp_path / "f.bflw").read_bytes()
    assert raw[:4] == b"BFLW" and len(raw) == 16 + 5 * 7 * 2 * 4
    assert int.from_bytes(raw[4:8], "little") == 5 and int.from_bytes(raw[8:12], "little") == 7
    dx0 = np.frombuffer(raw[16:20], "<f4")[0]
    assert dx0 == np.float32(flow[0, 0, 0])
    np.testing.assert_array_equal(read_flow(tmp_path / "f.bflw"), flow)


def test_warp_pair_directory(tmp_path, textured):
    stream = WarpPairStream([textured], WarpConfig(), DegradationConfig(), 1)
    pairs = stream.take(3)
    manifest = write_warp_pairs(tmp_path, pairs, [0, 1, 2], WarpConfig(), DegradationConfig())
    assert manifest["count"] == 3
    for i in range(3):
        d = tmp_path / "pairs" / f"{i:05d}"
        assert {p.name for p in d.iterdir()} == {"warped.png", "gt.png", "flow.bflw", "valid.png"}
    assert np.array_equal(stream.pair(1).warped, pairs[1].warped)


def test_config_validation():
    with pytest.raises(ValueError):
        WarpConfig(big_size=(64, 64), crop_size=(64, 64))
    with pytest.raises(ValueError):
        WarpConfig(corner_perturbation=-1)
    with pytest.raises(ValueError):
        DegradationConfig(gaussian_ksizes=(6,))
    with pytest.raises(ValueError):
        replace(VideoConfig(), channels=2)
