"""Reference-collection protocol and toy dataset assembly.

For a blurry frame ``t`` the ``N`` sharp references are two runs of ``N/2``
consecutive frames, one on each side, displaced by ``delta`` frames::

    left  = t - delta - N/2 + 1, ..., t - delta
    right = t + delta, ..., t + delta + N/2 - 1

Toy datasets are cut from a synthesized high-rate video: dataset frame ``f``
owns the ``window`` sub-frames ``[f * window, (f + 1) * window)``; its blurry
image is their average and its sharp image is the centre sub-frame.  A frame
is used either as a blurry sample or as a reference, never both.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imgcore import read_png, write_png
from .pseudosharp import ReferenceSet, as_dense_match
from .synthgen import VideoConfig, child_seeds, synthesize_blur, synthesize_toy_video

DELTA_PRESETS = (1, 10, 20)


class ProtocolError(ValueError):
    """Reference windows leave the clip; ``overflow`` maps frame -> overflowing sides."""

    def __init__(self, overflow: dict[int, list[str]]):
        self.overflow = overflow
        detail = ", ".join(f"{t}: {'+'.join(sides)}" for t, sides in sorted(overflow.items()))
        super().__init__(f"reference window out of range for frames {{{detail}}}")


@dataclass(frozen=True)
class ProtocolConfig:
    delta: int
    n_refs: int = 6
    blur_indices: tuple[int, ...] = ()
    total_frames: int = 0

    def __post_init__(self):
        if self.delta < 1:
            raise ValueError(f"ProtocolConfig.delta must be >= 1, got {self.delta}")
        if self.n_refs < 2 or self.n_refs % 2:
            raise ValueError(f"ProtocolConfig.n_refs must be even and >= 2, got {self.n_refs}")


def reference_indices(t: int, delta: int, n_refs: int) -> tuple[list[int], list[int]]:
    half = n_refs // 2
    left = list(range(t - delta - half + 1, t - delta + 1))
    right = list(range(t + delta, t + delta + half))
    return left, right


def build_reference_sets(cfg: ProtocolConfig, drop_overflow: bool = False) -> dict[int, list[int]]:
    """Temporal-order reference indices per blurry frame.

    Frames whose windows leave ``[0, total_frames)`` raise ``ProtocolError``,
    or are silently dropped when ``drop_overflow`` is set.
    """
    out: dict[int, list[int]] = {}
    overflow: dict[int, list[str]] = {}
    for t in cfg.blur_indices:
        left, right = reference_indices(t, cfg.delta, cfg.n_refs)
        sides = []
        if left[0] < 0:
            sides.append("left")
        if right[-1] >= cfg.total_frames:
            sides.append("right")
        if sides:
            overflow[t] = sides
            continue
        out[t] = left + right
    if overflow and not drop_overflow:
        raise ProtocolError(overflow)
    return out


def select_blur_indices(total_frames: int, delta: int, n_refs: int) -> list[int]:
    """Greedy left-to-right pick of blurry frames keeping blur and reference frames disjoint."""
    chosen: list[int] = []
    used_refs: set[int] = set()
    for t in range(total_frames):
        left, right = reference_indices(t, delta, n_refs)
        if left[0] < 0 or right[-1] >= total_frames:
            continue
        refs = set(left + right)
        if t in used_refs or refs & set(chosen):
            continue
        chosen.append(t)
        used_refs |= refs
    return chosen


def audit_disjoint(index_map: dict[int, list[int]]) -> list[tuple[int, int]]:
    """``(blur_frame, ref_frame)`` pairs where a reference is also a blurry frame."""
    blur = set(index_map)
    return [(t, r) for t, refs in index_map.items() for r in refs if r in blur]


def matching_content_percentage(gt, refs, matcher, tau: float = 0.7) -> float:
    """Mean over references of the share of pixels matched with confidence >= tau, in percent."""
    refs = refs if isinstance(refs, ReferenceSet) else ReferenceSet(list(refs))
    dm = as_dense_match(matcher)
    fractions = []
    for ref in refs:
        _, conf = dm(gt, ref)
        fractions.append(float(np.mean(np.asarray(conf) >= tau)))
    return 100.0 * float(np.mean(fractions))


# --------------------------------------------------------------------------
# toy dataset
# --------------------------------------------------------------------------


@dataclass
class ToySample:
    sample_id: str
    blur: np.ndarray
    refs: ReferenceSet
    gt: np.ndarray


@dataclass
class ToyDataset:
    root: Path | None
    samples: list[ToySample] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    @property
    def blur(self) -> list[np.ndarray]:
        return [s.blur for s in self.samples]

    @property
    def refs(self) -> list[ReferenceSet]:
        return [s.refs for s in self.samples]

    @property
    def gt(self) -> list[np.ndarray]:
        return [s.gt for s in self.samples]


def _scene_samples(scene: int, scene_seed: int, video_cfg: VideoConfig, frames: int,
                   window: int, delta: int, n_refs: int):
    sub = synthesize_toy_video(scene_seed, frames * window, cfg=video_cfg)
    sharp = [sub[f * window + window // 2] for f in range(frames)]
    blur_idx = select_blur_indices(frames, delta, n_refs)
    index_map = build_reference_sets(ProtocolConfig(delta, n_refs, tuple(blur_idx), frames))
    samples, entries = [], []
    for t, ref_idx in index_map.items():
        sid = f"s{scene:02d}_f{t:04d}"
        blur = synthesize_blur(sub[t * window:(t + 1) * window], window)
        samples.append(ToySample(sid, blur, ReferenceSet([sharp[r] for r in ref_idx], ref_idx), sharp[t]))
        entries.append({"id": sid, "scene": scene, "frame": t, "refs": ref_idx,
                        "blur_subframes": [t * window, (t + 1) * window - 1]})
    return samples, entries, index_map


def assemble_toy_dataset(out_dir, video_cfg: VideoConfig | None = None, delta: int = 2,
                         n_refs: int = 6, window: int = 7, scenes: int = 24,
                         frames_per_scene: int = 40, seed: int = 0) -> ToyDataset:
    """Synthesize scenes and write ``blur/``, ``refs/<id>/``, ``gt/`` and ``manifest.json``.

    ``out_dir=None`` keeps everything in memory.
    """
    video_cfg = video_cfg or VideoConfig()
    if window < 1 or window % 2 == 0:
        raise ValueError(f"assemble_toy_dataset: window must be odd, got {window}")
    ProtocolConfig(delta, n_refs)
    need = 2 * (delta + n_refs // 2) + 1
    if frames_per_scene < max(need, 8):
        raise ValueError(f"assemble_toy_dataset: need at least {max(need, 8)} frames per scene "
                         f"for delta={delta}, N={n_refs}; got {frames_per_scene}")
    samples, entries = [], []
    scene_seeds = child_seeds(seed, scenes)
    for s, sseed in enumerate(scene_seeds):
        smp, ent, index_map = _scene_samples(s, sseed, video_cfg, frames_per_scene, window, delta, n_refs)
        if audit_disjoint(index_map):
            raise AssertionError(f"scene {s}: blur/reference frames overlap")
        samples += smp
        entries += ent
    manifest = {
        "delta": delta, "n_refs": n_refs, "window": window, "seed": seed,
        "scene_seeds": scene_seeds, "frames_per_scene": frames_per_scene,
        "video": json.loads(json.dumps(asdict(video_cfg))), "samples": entries,
    }
    root = None
    if out_dir is not None:
        root = Path(out_dir)
        for smp in samples:
            write_png(root / "blur" / f"{smp.sample_id}.png", smp.blur)
            write_png(root / "gt" / f"{smp.sample_id}.png", smp.gt)
            for n, ref in enumerate(smp.refs):
                write_png(root / "refs" / smp.sample_id / f"{n}.png", ref)
        root.mkdir(parents=True, exist_ok=True)
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return ToyDataset(root=root, samples=samples, manifest=manifest)


def load_toy_dataset(root) -> ToyDataset:
    """Read a dataset written by ``assemble_toy_dataset`` (8-bit quantised)."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    samples = []
    for e in manifest["samples"]:
        sid = e["id"]
        refs = [read_png(root / "refs" / sid / f"{n}.png") for n in range(len(e["refs"]))]
        gt_path = root / "gt" / f"{sid}.png"
        gt = read_png(gt_path) if gt_path.exists() else None
        samples.append(ToySample(sid, read_png(root / "blur" / f"{sid}.png"), ReferenceSet(refs, e["refs"]), gt))
    return ToyDataset(root=root, samples=samples, manifest=manifest)
