"""Acceptance suite: one PASS/FAIL line per criterion (also gathered in the terminal summary).

Run alone with ``pytest tests/test_acceptance.py -v -s``.
"""
import filecmp
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy.ndimage import gaussian_filter

from bluref.blureftrain import (BlurRefConfig, DeblurNet, PairTrainConfig, deblur, export_pseudo_pairs,
                                masked_loss, masked_loss_grad, run_bluref, train_from_pairs, write_pairs)
from bluref.cli import main
from bluref.datasetproto import (ProtocolConfig, audit_disjoint, assemble_toy_dataset, build_reference_sets,
                                 select_blur_indices)
from bluref.densematch import brute_force_match, dm_apply, mean_epe
from bluref.imgcore import psnr
from bluref.pseudosharp import aggregate_progressive, aggregate_sequential, weighted_average
from bluref.synthgen import DegradationConfig, VideoConfig, degrade

from conftest import matcher_heldout
from stubs import TableDM, make_case, oracle

pytestmark = pytest.mark.slow

# toy scene used by the end-to-end criteria: gentle shake, smooth background, many shapes
TOY_VIDEO = VideoConfig()
TOY_PROTOCOL = dict(delta=2, n_refs=6, window=7, frames_per_scene=40)
TOY_SCENES, TOY_HELDOUT_SCENES = 24, 2
TOY_BLUREF = BlurRefConfig(strategy="prog", blended_input=True, normalized=True)


def noise_image(seed: int, size: int = 64) -> np.ndarray:
    r = np.random.default_rng(seed)
    g = gaussian_filter(r.normal(size=(size, size, 3)), (1.2, 1.2, 0))
    return np.clip(0.5 + 0.18 * g / g.std(), 0, 1)


def test_criterion_1_brute_force_exact(verdict):
    t0 = time.time()
    rng = np.random.default_rng(1)
    exact, radius = [], 4
    for i in range(10):
        img = noise_image(100 + i)
        dx, dy = (int(v) for v in rng.integers(-radius, radius + 1, size=2))
        ref = np.roll(img, (dy, dx), axis=(0, 1))  # img(x) == ref(x + (dx, dy))
        res = brute_force_match(img, ref, patch=7, radius=radius)
        m = radius + 3
        inner = res.flow[m:-m, m:-m]
        exact.append(float(np.mean((inner[..., 0] == dx) & (inner[..., 1] == dy))))
    dt = time.time() - t0
    verdict(1, min(exact) == 1.0 and dt <= 60,
            f"brute force exact on {100 * min(exact):.1f}% of interior pixels (worst of 10), {dt:.1f}s")


def test_criterion_2_matcher_quality(trained_matcher, verdict):
    epe = mean_epe(trained_matcher, matcher_heldout(64))
    dt = trained_matcher.train_seconds
    verdict(2, epe <= 1.5 and dt <= 15 * 60, f"held-out EPE {epe:.3f} px (<= 1.5), training {dt:.0f}s")


def test_criterion_3_aggregation_oracle(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    variants = [("avg", False, False), ("avg", True, False), ("seq", False, False),
                ("prog", False, False), ("prog", True, False), ("prog", False, True), ("prog", True, True)]
    for case in range(50):
        n = int(rng.integers(1, 7))
        refs, tables, gains, confs, blur = make_case(rng, n)
        strategy, normalized, blended = variants[case % len(variants)]
        dm = TableDM(refs, tables, gains, confs)
        if strategy == "avg":
            img, msk = weighted_average(dm, blur, refs, normalized=normalized)
        elif strategy == "seq":
            img, msk = aggregate_sequential(dm, blur, refs)
        else:
            img, msk = aggregate_progressive(dm, blur, refs, blended_input=blended, normalized=normalized)
        want_img, want_msk = oracle(strategy, tables, gains, confs, blur, normalized, blended)
        worst = max(worst, float(np.abs(img - want_img).max()), float(np.abs(msk - want_msk).max()))
    verdict(3, worst <= 1e-9, f"50 stub cases, max abs deviation from scalar transcription {worst:.2e}")


def test_criterion_4_gradient_check(verdict):
    rng = np.random.default_rng(4)
    eps, worst = 1e-4, 0.0
    for metric in ("l1", "l2"):
        for _ in range(20):
            pred = rng.uniform(0.1, 0.9, (3, 3, 1))
            target = rng.uniform(0.1, 0.9, (3, 3, 1))
            # keep L1 away from its kink
            close = np.abs(pred - target) < 10 * eps
            target[close] = np.clip(pred[close] + 0.05, 0, 1)
            mask = (rng.random((3, 3)) < 0.7).astype(float)
            mask[0, 0] = 1.0
            analytic = masked_loss_grad(pred, target, mask, metric)
            auto_in = torch.tensor(pred, requires_grad=True)
            masked_loss(auto_in.permute(2, 0, 1)[None], torch.tensor(target).permute(2, 0, 1)[None],
                        torch.tensor(mask)[None], metric).backward()
            numeric = np.zeros_like(pred)
            for idx in np.ndindex(pred.shape):
                hi, lo = pred.copy(), pred.copy()
                hi[idx] += eps
                lo[idx] -= eps
                numeric[idx] = (masked_loss(hi, target, mask, metric) - masked_loss(lo, target, mask, metric)) / (2 * eps)
            scale = max(np.abs(numeric).max(), 1e-12)
            rel = max(np.abs(analytic - numeric).max(), np.abs(auto_in.grad.numpy() - numeric).max()) / scale
            worst = max(worst, float(rel))
    verdict(4, worst <= 1e-3, f"40 instances (L1, L2), max relative error {worst:.2e}")


def test_criterion_5_toy_bluref(trained_matcher, verdict, toy_run):
    state, net, test, dt = toy_run
    blur_psnr = float(np.mean([psnr(b, g) for b, g in zip(test.blur, test.gt)]))
    out_psnr = float(np.mean([psnr(deblur(net, b), g) for b, g in zip(test.blur, test.gt)]))
    first = state.history[0]["masked_psnr_pseudo"]
    last = state.history[-1]["masked_psnr_pseudo"]
    ok_a = out_psnr >= blur_psnr + 2.0
    ok_b = last >= first
    verdict(5, ok_a and ok_b and dt <= 30 * 60,
            f"(a) held-out {out_psnr:.2f} dB vs blur {blur_psnr:.2f} dB (gain {out_psnr - blur_psnr:+.2f}, "
            f"need +2.00) {'ok' if ok_a else 'not met'}; (b) masked pseudo PSNR epoch 0 {first:.2f} -> "
            f"epoch {len(state.history) - 1} {last:.2f} {'ok' if ok_b else 'not met'}; {dt:.0f}s")


def test_criterion_6_pseudo_pair_reuse(toy_run, toy_train, tmp_path, verdict):
    state, _, test, _ = toy_run
    t0 = time.time()
    export_pseudo_pairs(state, toy_train.blur, tmp_path / "pseudo")
    write_pairs(tmp_path / "real", toy_train.blur, toy_train.gt, target_name="gt")
    cfg = PairTrainConfig(steps=TOY_BLUREF.epochs * TOY_BLUREF.steps_per_epoch, lr=TOY_BLUREF.lr,
                          lr_final=TOY_BLUREF.lr_final)
    scores = {}
    for name in ("pseudo", "real"):
        net = train_from_pairs(tmp_path / name, train_cfg=cfg)
        scores[name] = float(np.mean([psnr(deblur(net, b), g) for b, g in zip(test.blur, test.gt)]))
    dt = time.time() - t0
    gap = scores["real"] - scores["pseudo"]
    verdict(6, gap <= 1.5 and dt <= 20 * 60,
            f"held-out PSNR pseudo pairs {scores['pseudo']:.2f} dB vs real pairs {scores['real']:.2f} dB "
            f"(gap {gap:.2f}, need <= 1.50), {dt:.0f}s")


def test_criterion_7_protocol_invariants(verdict):
    rng = np.random.default_rng(7)
    violations = 0
    for _ in range(1000):
        delta = int(rng.integers(1, 25))
        n = 2 * int(rng.integers(1, 6))
        total = int(rng.integers(2 * (delta + n // 2) + 1, 200))
        blur = select_blur_indices(total, delta, n)
        index_map = build_reference_sets(ProtocolConfig(delta, n, tuple(blur), total))
        for t, refs in index_map.items():
            left, right = refs[:n // 2], refs[n // 2:]
            violations += len(refs) != n
            violations += left != list(range(t - delta - n // 2 + 1, t - delta + 1))
            violations += right != list(range(t + delta, t + delta + n // 2))
            violations += any(r < 0 or r >= total for r in refs)
        violations += len(audit_disjoint(index_map)) + (len(blur) == 0)
    verdict(7, violations == 0, f"1000 random protocol configs, {violations} violations")


def _write(path: Path, doc: dict) -> str:
    path.write_text(json.dumps({"schema_version": "1", **doc}))
    return str(path)


def _tree_identical(a: Path, b: Path) -> list[str]:
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    if files_a != files_b:
        return ["<file lists differ>"]
    return [str(f) for f in files_a if not filecmp.cmp(a / f, b / f, shallow=False)]


def test_criterion_8_determinism(tmp_path, verdict):
    diffs = {}
    for run in ("a", "b"):
        root = tmp_path / run
        _write(root.parent / f"gen_{run}.json", {"out_dir": str(root / "gen"), "protocol": {"scenes": 2},
                                                "warp_pairs": {"count": 8}})
        assert main(["gen-data", "--config", str(root.parent / f"gen_{run}.json")]) == 0
        _write(root.parent / f"dm_{run}.json", {"out_dir": str(root / "dm"), "train": {"steps": 100},
                                               "epe_budget": 100.0})
        assert main(["train-dm", "--config", str(root.parent / f"dm_{run}.json")]) == 0
        _write(root.parent / f"br_{run}.json", {"out_dir": str(root / "br"),
                                               "dataset": str(root / "gen" / "dataset"),
                                               "matcher": str(root / "dm" / "matcher.safetensors"),
                                               "bluref": {"epochs": 1}})
        assert main(["run-bluref", "--config", str(root.parent / f"br_{run}.json")]) == 0
    for stage in ("gen", "dm", "br"):
        diffs[stage] = _tree_identical(tmp_path / "a" / stage, tmp_path / "b" / stage)
    # resolved configs embed the run's own paths; compare them with the root swapped
    for stage in ("gen", "dm", "br"):
        name = "resolved_config.json"
        if name in diffs[stage]:
            ta = (tmp_path / "a" / stage / name).read_text().replace(str(tmp_path / "a"), "<root>")
            tb = (tmp_path / "b" / stage / name).read_text().replace(str(tmp_path / "b"), "<root>")
            if ta == tb:
                diffs[stage].remove(name)
    bad = {k: v for k, v in diffs.items() if v}
    verdict(8, not bad, "gen-data, train-dm (100 steps), run-bluref (1 epoch) byte-identical"
            + ("" if not bad else f"; differing files {bad}"))


def test_criterion_9_range_safety(trained_matcher, verdict):
    rng = np.random.default_rng(9)
    deblur_net = DeblurNet()
    with torch.no_grad():
        for p in deblur_net.parameters():
            p.normal_(0, 0.2)  # a perturbed net, so the residual branch is exercised
    dcfg = DegradationConfig()
    bad = []

    def check(tag, *arrays):
        for a in arrays:
            if not (np.all(np.isfinite(a)) and a.min() >= 0.0 and a.max() <= 1.0):
                bad.append(tag)

    for i in range(1000):
        h, w = (int(v) for v in rng.integers(16, 41, size=2))
        kind = i % 5
        if kind == 0:
            img = rng.random((h, w, 3))
        elif kind == 1:
            img = np.full((h, w, 3), float(rng.choice([0.0, 1.0, rng.random()])))
        elif kind == 2:
            img = (rng.random((h, w, 3)) < 0.5).astype(float)
        elif kind == 3:
            img = np.clip(rng.normal(0.5, 2.0, (h, w, 3)), 0, 1)
        else:
            img = np.zeros((h, w, 3))
            img[rng.integers(h), :, :] = 1.0
        out = degrade(img, dcfg, i)
        check("degrade", out)
        ref = rng.random((h, w, 3)) if i % 2 else np.roll(img, 1, axis=1)
        trans, conf = dm_apply(trained_matcher, out, ref)
        check("dm_apply", trans, conf)
        refs = [ref, img]
        for name, (pi, pm) in {
            "avg": weighted_average(trained_matcher, out, refs),
            "avgN": weighted_average(trained_matcher, out, refs, normalized=True),
            "seq": aggregate_sequential(trained_matcher, out, refs),
            "prog": aggregate_progressive(trained_matcher, out, refs),
            "progBN": aggregate_progressive(trained_matcher, out, refs, blended_input=True, normalized=True),
        }.items():
            check(name, pi, pm)
        check("deblur", deblur(deblur_net, img))
    verdict(9, not bad, f"1000 fuzzed images, {len(bad)} out-of-range or non-finite outputs"
            + (f" (first: {bad[:5]})" if bad else ""))


@pytest.fixture(scope="module")
def toy_train():
    return assemble_toy_dataset(None, TOY_VIDEO, scenes=TOY_SCENES, seed=0, **TOY_PROTOCOL)


@pytest.fixture(scope="module")
def toy_run(trained_matcher, toy_train):
    test = assemble_toy_dataset(None, TOY_VIDEO, scenes=TOY_HELDOUT_SCENES, seed=1000, **TOY_PROTOCOL)
    t0 = time.time()
    net, state = run_bluref(toy_train.blur, toy_train.refs, toy_train.gt, trained_matcher, TOY_BLUREF)
    return state, net, test, time.time() - t0


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
