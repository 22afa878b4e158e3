"""Synthetic training data.

Two generators live here:

* warp pairs for the dense matcher: a sharp image is resized, deformed by a
  random homography or thin-plate spline, centre-cropped and then degraded
  by a shuffled blind-degradation pipeline;
* a toy video source (textured panning background with drifting sprites)
  whose frame averages stand in for real long-exposure blur.

Every function is a pure function of its inputs and an integer seed.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import cv2
import numpy as np
from scipy.interpolate import RBFInterpolator
from scipy.ndimage import gaussian_filter

from .imgcore import (
    ImageError,
    as_flow,
    as_image,
    bilinear_sample,
    inside_mask,
    pixel_grid,
    warp_backward,
    write_mask_png,
    write_png,
)

STAGES = ("gaussian_blur", "aniso_blur", "motion_blur", "noise", "jpeg", "resample")
FLOW_MAGIC = b"BFLW"


def child_seeds(seed: int, n: int) -> list[int]:
    """Independent integer seeds derived from ``seed``."""
    ss = np.random.SeedSequence(int(seed))
    return [int(c.generate_state(1)[0]) for c in ss.spawn(n)]


# --------------------------------------------------------------------------
# configs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DegradationConfig:
    gaussian_blur: bool = True
    gaussian_ksizes: tuple[int, ...] = (7, 9, 11)
    gaussian_sigma: tuple[float, float] = (0.5, 2.5)
    aniso_blur: bool = True
    aniso_sigma: tuple[float, float] = (0.5, 3.0)
    motion_blur: bool = True
    motion_length: tuple[float, float] = (3.0, 9.0)
    motion_angle: tuple[float, float] = (0.0, math.pi)
    noise: bool = True
    noise_sigma: tuple[float, float] = (1.0 / 255, 15.0 / 255)
    jpeg: bool = True
    jpeg_quality: tuple[float, float] = (30.0, 60.0)
    resample: bool = True
    resample_scale: tuple[float, float] = (0.5, 0.9)
    resample_modes: tuple[str, ...] = ("bicubic", "bilinear")
    shuffle: bool = True
    stage_prob: float = 0.5

    def __post_init__(self):
        for name in ("gaussian_sigma", "aniso_sigma", "motion_length", "motion_angle",
                     "noise_sigma", "jpeg_quality", "resample_scale"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"DegradationConfig.{name}: empty range ({lo}, {hi})")
        if not self.gaussian_ksizes or any(k % 2 == 0 or k < 1 for k in self.gaussian_ksizes):
            raise ValueError("DegradationConfig.gaussian_ksizes must be odd and non-empty")
        if not self.resample_modes or any(m not in ("bicubic", "bilinear") for m in self.resample_modes):
            raise ValueError("DegradationConfig.resample_modes must be bicubic/bilinear")
        if self.motion_length[0] < 1:
            raise ValueError("DegradationConfig.motion_length must be >= 1")
        if not 0.0 <= self.stage_prob <= 1.0:
            raise ValueError("DegradationConfig.stage_prob must be in [0, 1]")
        lo, hi = self.jpeg_quality
        if lo < 1 or hi > 100:
            raise ValueError("DegradationConfig.jpeg_quality must lie in [1, 100]")

    @classmethod
    def disabled(cls) -> "DegradationConfig":
        return cls(**{s: False for s in STAGES}, shuffle=False)

    @classmethod
    def only(cls, *stages: str, **kw) -> "DegradationConfig":
        unknown = set(stages) - set(STAGES)
        if unknown:
            raise ValueError(f"unknown stages {sorted(unknown)}")
        flags = {s: s in stages for s in STAGES}
        return cls(**flags, **{"shuffle": False, **kw})

    def enabled(self) -> list[str]:
        return [s for s in STAGES if getattr(self, s)]


@dataclass(frozen=True)
class WarpConfig:
    kind: str = "homography"
    corner_perturbation: float = 0.08
    max_translation: float = 4.0
    tps_grid: int = 4
    tps_sigma: float = 2.0
    big_size: tuple[int, int] = (96, 96)
    crop_size: tuple[int, int] = (64, 64)
    occluders: int = 0
    occluder_radius: tuple[float, float] = (4.0, 16.0)

    def __post_init__(self):
        if self.kind not in ("homography", "thin_plate_spline"):
            raise ValueError(f"WarpConfig.kind: unknown transform {self.kind!r}")
        if min(self.corner_perturbation, self.max_translation, self.tps_sigma) < 0:
            raise ValueError("WarpConfig strengths must be >= 0")
        if self.tps_grid < 2:
            raise ValueError("WarpConfig.tps_grid must be >= 2")
        if self.occluders < 0 or not 0 < self.occluder_radius[0] <= self.occluder_radius[1]:
            raise ValueError("WarpConfig: occluders must be >= 0 with 0 < radius range")
        (hb, wb), (h, w) = self.big_size, self.crop_size
        if not (hb > h and wb > w):
            raise ValueError(f"WarpConfig: oversize {self.big_size} must exceed crop {self.crop_size}")
        if min(h, w) < 8:
            raise ValueError("WarpConfig: crop must be at least 8x8")

    @property
    def crop_offset(self) -> tuple[int, int]:
        (hb, wb), (h, w) = self.big_size, self.crop_size
        return (hb - h) // 2, (wb - w) // 2


@dataclass(frozen=True)
class VideoConfig:
    """Toy scene: a shaking, slowly drifting camera over a textured background
    plus a few drifting sprites.

    The camera offset at frame ``t`` is ``pan * t + shake(t)`` where ``shake``
    oscillates with ``shake_amplitude`` pixels along a per-scene direction and
    is zero at the middle frame of every ``shake_period`` block, so a
    ``shake_period`` average is centred on that middle frame.  Velocities are
    pixels per frame in view coordinates.
    """

    height: int = 96
    width: int = 96
    channels: int = 3
    pan_velocity: tuple[float, float] = (0.12, 0.05)
    pan_jitter: float = 0.03
    shake_amplitude: float = 2.5
    shake_period: int = 7
    shake_angle: tuple[float, float] = (0.3, 0.7)
    n_sprites: int = 3
    sprite_radius: tuple[float, float] = (6.0, 11.0)
    sprite_speed: tuple[float, float] = (0.2, 0.6)
    background_contrast: float = 1.0
    background_noise: float = 0.3
    shape_density: float = 1 / 150

    def __post_init__(self):
        if min(self.height, self.width) < 8:
            raise ValueError("VideoConfig: frames must be at least 8x8")
        if self.channels not in (1, 3):
            raise ValueError("VideoConfig.channels must be 1 or 3")
        if self.shake_period < 1 or self.shake_amplitude < 0:
            raise ValueError("VideoConfig: shake_period >= 1 and shake_amplitude >= 0 required")


@dataclass
class WarpPair:
    warped: np.ndarray
    gt: np.ndarray
    gt_flow: np.ndarray
    valid: np.ndarray
    occluded: np.ndarray | None = None  # 1 where foreign content covers the warped image


# --------------------------------------------------------------------------
# textures
# --------------------------------------------------------------------------


def random_texture(height: int, width: int, seed: int, channels: int = 3,
                   contrast: float = 1.0, noise: float = 1.0, shape_density: float = 1 / 900) -> np.ndarray:
    """Band-limited multi-octave noise (scaled by ``noise``) under hard-edged shapes,
    about ``shape_density`` shapes per pixel."""
    rng = np.random.default_rng(seed)
    lum = np.zeros((height, width))
    for sigma, weight in ((0.8, 0.35), (1.6, 0.6), (3.2, 0.8), (6.4, 1.0)):
        lum += weight * gaussian_filter(rng.standard_normal((height, width)), sigma, mode="wrap") * sigma
    lum = (lum - lum.mean()) / (lum.std() + 1e-12)
    out = np.empty((height, width, channels))
    for c in range(channels):
        tint = gaussian_filter(rng.standard_normal((height, width)), 4.0, mode="wrap")
        tint = (tint - tint.mean()) / (tint.std() + 1e-12)
        chan = lum + (0.35 * tint if channels > 1 else 0.0)
        out[..., c] = 0.5 + 0.13 * noise * chan
    yy, xx = np.mgrid[0:height, 0:width]
    n_shapes = max(2, int(height * width * shape_density))
    for _ in range(n_shapes):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        ry, rx = rng.uniform(2, 9, size=2)
        if rng.random() < 0.5:
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        shape = gaussian_filter(inside.astype(np.float64), 0.6)
        color = rng.uniform(0.1, 0.9, size=channels)
        out = out * (1 - shape[..., None]) + color * shape[..., None]
    out = 0.5 + contrast * (out - 0.5)
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# degradation
# --------------------------------------------------------------------------


def gaussian_kernel(ksize: int, sigma: float) -> np.ndarray:
    r = np.arange(ksize) - (ksize - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def anisotropic_gaussian_kernel(sigma_x: float, sigma_y: float, theta: float,
                                ksize: int | None = None) -> np.ndarray:
    if ksize is None:
        ksize = 2 * int(math.ceil(3 * max(sigma_x, sigma_y))) + 1
    r = np.arange(ksize) - (ksize - 1) / 2.0
    yy, xx = np.meshgrid(r, r, indexing="ij")
    c, s = math.cos(theta), math.sin(theta)
    u = c * xx + s * yy
    v = -s * xx + c * yy
    k = np.exp(-0.5 * ((u / sigma_x) ** 2 + (v / sigma_y) ** 2))
    return k / k.sum()


def motion_blur_kernel(length: float, angle: float) -> np.ndarray:
    """Line-segment averaging kernel of ``length`` pixels at ``angle`` radians.

    The segment ``[-length/2, length/2]`` is supersampled uniformly and each
    sample is binned to its nearest pixel, so length 3 at angle 0 is
    ``[1/3, 1/3, 1/3]`` and length 1 is a 1x1 delta.
    """
    if length < 1:
        raise ValueError(f"motion_blur_kernel: length must be >= 1, got {length}")
    m = 32 * int(math.ceil(length))
    ts = (np.arange(m) + 0.5) / m * length - length / 2.0
    cols = np.rint(ts * math.cos(angle)).astype(int)
    rows = np.rint(ts * math.sin(angle)).astype(int)
    radius = int(max(np.abs(cols).max(), np.abs(rows).max()))
    size = 2 * radius + 1
    k = np.zeros((size, size))
    np.add.at(k, (rows + radius, cols + radius), 1.0)
    return k / k.sum()


def convolve(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = cv2.filter2D(img, -1, kernel, borderType=cv2.BORDER_REFLECT_101)
    return out.reshape(img.shape)


def sample_degradation_plan(dcfg: DegradationConfig, seed: int) -> list[tuple[str, dict]]:
    """Draw the ordered list of ``(stage, params)`` that ``degrade`` applies."""
    rng = np.random.default_rng(seed)
    stages = dcfg.enabled()
    if dcfg.shuffle:
        stages = [stages[i] for i in rng.permutation(len(stages))]
    plan = []
    for stage in stages:
        active = rng.random() < dcfg.stage_prob if dcfg.shuffle else True
        params = _draw_params(stage, dcfg, rng)
        if active:
            plan.append((stage, params))
    return plan


def _draw_params(stage: str, dcfg: DegradationConfig, rng: np.random.Generator) -> dict:
    if stage == "gaussian_blur":
        return {"ksize": int(rng.choice(dcfg.gaussian_ksizes)),
                "sigma": float(rng.uniform(*dcfg.gaussian_sigma))}
    if stage == "aniso_blur":
        return {"sigma_x": float(rng.uniform(*dcfg.aniso_sigma)),
                "sigma_y": float(rng.uniform(*dcfg.aniso_sigma)),
                "theta": float(rng.uniform(0, math.pi))}
    if stage == "motion_blur":
        return {"length": float(rng.uniform(*dcfg.motion_length)),
                "angle": float(rng.uniform(*dcfg.motion_angle))}
    if stage == "noise":
        return {"sigma": float(rng.uniform(*dcfg.noise_sigma)),
                "seed": int(rng.integers(2**31))}
    if stage == "jpeg":
        lo, hi = dcfg.jpeg_quality
        q = int(np.clip(round(rng.uniform(lo, hi)), math.ceil(lo), math.floor(hi)))
        return {"quality": q}
    if stage == "resample":
        return {"scale": float(rng.uniform(*dcfg.resample_scale)),
                "mode": str(rng.choice(dcfg.resample_modes))}
    raise ValueError(f"unknown stage {stage!r}")


def apply_stage(img: np.ndarray, stage: str, p: dict) -> np.ndarray:
    if stage == "gaussian_blur":
        out = convolve(img, gaussian_kernel(p["ksize"], p["sigma"]))
    elif stage == "aniso_blur":
        out = convolve(img, anisotropic_gaussian_kernel(p["sigma_x"], p["sigma_y"], p["theta"]))
    elif stage == "motion_blur":
        out = convolve(img, motion_blur_kernel(p["length"], p["angle"]))
    elif stage == "noise":
        rng = np.random.default_rng(p["seed"])
        out = img + rng.normal(0.0, p["sigma"], size=img.shape)
    elif stage == "jpeg":
        q = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
        bgr = q[..., ::-1] if q.shape[2] == 3 else q[..., 0]
        ok, buf = cv2.imencode(".jpg", np.ascontiguousarray(bgr), [cv2.IMWRITE_JPEG_QUALITY, p["quality"]])
        if not ok:
            raise RuntimeError("JPEG encoding failed")
        dec = cv2.imdecode(buf, cv2.IMREAD_UNCHANGED)
        dec = dec[..., ::-1] if dec.ndim == 3 else dec[..., None]
        out = dec.astype(np.float64) / 255.0
    elif stage == "resample":
        h, w = img.shape[:2]
        interp = cv2.INTER_CUBIC if p["mode"] == "bicubic" else cv2.INTER_LINEAR
        sh, sw = max(4, int(round(h * p["scale"]))), max(4, int(round(w * p["scale"])))
        small = cv2.resize(img, (sw, sh), interpolation=interp)
        out = cv2.resize(small, (w, h), interpolation=interp).reshape(img.shape)
    else:
        raise ValueError(f"unknown stage {stage!r}")
    return np.clip(out, 0.0, 1.0)


def degrade(img, dcfg: DegradationConfig, seed: int) -> np.ndarray:
    out = as_image(img).copy()
    for stage, params in sample_degradation_plan(dcfg, seed):
        out = apply_stage(out, stage, params)
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# geometric warps
# --------------------------------------------------------------------------


def homography_flow(matrix: np.ndarray, height: int, width: int) -> np.ndarray:
    """Flow ``H(x) - x`` for a 3x3 homography mapping output to source pixels."""
    xs, ys = pixel_grid(height, width)
    pts = np.stack([xs, ys, np.ones_like(xs)], axis=-1) @ np.asarray(matrix, dtype=np.float64).T
    return np.stack([pts[..., 0] / pts[..., 2] - xs, pts[..., 1] / pts[..., 2] - ys], axis=-1)


def _is_convex(quad: np.ndarray) -> bool:
    signs = []
    for i in range(4):
        a, b, c = quad[i], quad[(i + 1) % 4], quad[(i + 2) % 4]
        u, v = b - a, c - b
        signs.append(u[0] * v[1] - u[1] * v[0])
    signs = np.array(signs)
    return bool(np.all(signs > 1e-6) or np.all(signs < -1e-6))


def sample_homography(cfg: WarpConfig, rng: np.random.Generator) -> np.ndarray:
    (hb, wb), (h, w) = cfg.big_size, cfg.crop_size
    oy, ox = cfg.crop_offset
    corners = np.array([[ox, oy], [ox + w - 1, oy], [ox + w - 1, oy + h - 1], [ox, oy + h - 1]],
                       dtype=np.float64)
    amp = cfg.corner_perturbation * min(h, w)
    for _ in range(100):
        shift = rng.uniform(-cfg.max_translation, cfg.max_translation, size=2)
        moved = corners + rng.uniform(-amp, amp, size=(4, 2)) + shift
        if not _is_convex(moved):
            continue
        mat = cv2.getPerspectiveTransform(corners.astype(np.float32), moved.astype(np.float32))
        mat = mat.astype(np.float64)
        if abs(np.linalg.det(mat[:2, :2])) < 1e-3:
            continue
        xs = np.array([0, wb - 1, wb - 1, 0], dtype=np.float64)
        ys = np.array([0, 0, hb - 1, hb - 1], dtype=np.float64)
        denom = mat[2, 0] * xs + mat[2, 1] * ys + mat[2, 2]
        if np.all(denom > 1e-3):
            return mat
    raise RuntimeError("could not sample a non-degenerate homography")


def tps_flow(control_xy: np.ndarray, displacement: np.ndarray, height: int, width: int) -> np.ndarray:
    """Dense flow interpolating ``displacement`` at ``control_xy`` with a thin-plate spline."""
    control_xy = np.asarray(control_xy, dtype=np.float64)
    displacement = np.asarray(displacement, dtype=np.float64)
    if not np.any(displacement):
        return np.zeros((height, width, 2))
    interp = RBFInterpolator(control_xy, displacement, kernel="thin_plate_spline")
    xs, ys = pixel_grid(height, width)
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    return interp(pts).reshape(height, width, 2)


def sample_flow_field(cfg: WarpConfig, seed: int) -> np.ndarray:
    """Dense ``H' x W'`` backward flow of a random homography or TPS."""
    rng = np.random.default_rng(seed)
    hb, wb = cfg.big_size
    if cfg.kind == "homography":
        if cfg.corner_perturbation == 0 and cfg.max_translation == 0:
            return np.zeros((hb, wb, 2))
        return homography_flow(sample_homography(cfg, rng), hb, wb)
    k = cfg.tps_grid
    gx, gy = np.meshgrid(np.linspace(0, wb - 1, k), np.linspace(0, hb - 1, k))
    control = np.stack([gx.ravel(), gy.ravel()], axis=1)
    disp = rng.normal(0.0, cfg.tps_sigma, size=control.shape) if cfg.tps_sigma > 0 else np.zeros_like(control)
    if cfg.max_translation > 0:
        disp = disp + rng.uniform(-cfg.max_translation, cfg.max_translation, size=2)
    return tps_flow(control, disp, hb, wb)


def resize_image(img: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = img.shape[:2]
    interp = cv2.INTER_AREA if (height < h or width < w) else cv2.INTER_CUBIC
    out = cv2.resize(img, (width, height), interpolation=interp).reshape(height, width, img.shape[2])
    return np.clip(out, 0.0, 1.0)


def make_warp_pair(sharp, wcfg: WarpConfig, dcfg: DegradationConfig, seed: int) -> WarpPair:
    """One synthetic matcher sample: ``(degraded warped crop, sharp crop, flow, valid)``.

    Geometry and degradation draw from independent seed streams, so the same
    seed with degradation disabled yields the clean warped crop.
    """
    sharp = as_image(sharp, "sharp")
    if min(sharp.shape[:2]) < 32:
        raise ImageError(f"make_warp_pair: source {sharp.shape[:2]} too small (min dim 32)")
    geo_seed, deg_seed, occ_seed = child_seeds(seed, 3)
    hb, wb = wcfg.big_size
    h, w = wcfg.crop_size
    oy, ox = wcfg.crop_offset
    big = resize_image(sharp, hb, wb)
    flow_big = sample_flow_field(wcfg, geo_seed)
    deformed = warp_backward(big, flow_big)
    crop = (slice(oy, oy + h), slice(ox, ox + w))
    gt = big[crop].copy()
    gt_flow = flow_big[crop].copy()
    clean, occluded = deformed[crop], None
    if wcfg.occluders > 0:
        clean, occluded = paste_occluders(clean, wcfg, occ_seed)
    warped = degrade(clean, dcfg, deg_seed)
    return WarpPair(warped=warped, gt=gt, gt_flow=gt_flow, valid=inside_mask(gt_flow), occluded=occluded)


def paste_occluders(img: np.ndarray, wcfg: WarpConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Cover up to ``wcfg.occluders`` random blobs with unrelated texture.

    Returns the edited image and a binary mask of covered pixels.  These
    regions have no counterpart in the sharp crop, which is what teaches the
    confidence head to say no.
    """
    rng = np.random.default_rng(seed)
    h, w, c = img.shape
    out = img.copy()
    alpha = np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(0, wcfg.occluders + 1))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(*wcfg.occluder_radius, size=2)
        if rng.random() < 0.5:
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        tex = random_texture(h, w, int(rng.integers(2**31)), c, noise=float(rng.uniform(0.25, 1.0)))
        out = np.where(inside[..., None], tex, out)
        alpha = np.maximum(alpha, inside)
    return out, alpha.astype(np.float64)


# --------------------------------------------------------------------------
# toy video
# --------------------------------------------------------------------------


@dataclass
class Sprite:
    position: np.ndarray  # (x, y) of the centre at frame 0, view coordinates
    velocity: np.ndarray  # (vx, vy) pixels per frame
    texture: np.ndarray  # premultiplied colour, zero-padded
    alpha: np.ndarray


@dataclass
class SceneLayout:
    background: np.ndarray
    origin: np.ndarray
    pan_velocity: np.ndarray
    shake_direction: np.ndarray
    sprites: list[Sprite] = field(default_factory=list)

    def camera_offset(self, cfg: "VideoConfig", t: float) -> np.ndarray:
        phase = 2 * math.pi * ((t - cfg.shake_period // 2) / cfg.shake_period)
        return self.origin + self.pan_velocity * t + cfg.shake_amplitude * math.sin(phase) * self.shake_direction


def scene_layout(cfg: VideoConfig, scene_seed: int, frames: int) -> SceneLayout:
    """Deterministic scene description; ``synthesize_toy_video`` renders it."""
    bg_seed, rng_seed = child_seeds(scene_seed, 2)
    rng = np.random.default_rng(rng_seed)
    pan = np.asarray(cfg.pan_velocity, dtype=np.float64) + rng.uniform(-cfg.pan_jitter, cfg.pan_jitter, 2)
    ang = rng.uniform(*cfg.shake_angle)
    shake_dir = np.array([math.cos(ang), math.sin(ang)])
    travel = np.abs(pan) * max(frames - 1, 0)
    margin = 4 + int(math.ceil(cfg.shake_amplitude))
    ch = cfg.height + int(math.ceil(travel[1])) + 2 * margin
    cw = cfg.width + int(math.ceil(travel[0])) + 2 * margin
    background = random_texture(ch, cw, bg_seed, cfg.channels, cfg.background_contrast,
                                cfg.background_noise, cfg.shape_density)
    origin = np.array([margin + (travel[0] if pan[0] < 0 else 0.0),
                       margin + (travel[1] if pan[1] < 0 else 0.0)])
    sprites = []
    for _ in range(cfg.n_sprites):
        r = rng.uniform(*cfg.sprite_radius)
        size = 2 * int(math.ceil(r)) + 5
        c = (size - 1) / 2.0
        yy, xx = np.mgrid[0:size, 0:size]
        dist = np.hypot(xx - c, yy - c)
        alpha = np.clip(r - dist + 0.5, 0.0, 1.0)
        tex = random_texture(size, size, int(rng.integers(2**31)), cfg.channels)
        speed = rng.uniform(*cfg.sprite_speed)
        ang = rng.uniform(0, 2 * math.pi)
        pos = np.array([rng.uniform(r, cfg.width - r), rng.uniform(r, cfg.height - r)])
        sprites.append(Sprite(position=pos, velocity=speed * np.array([math.cos(ang), math.sin(ang)]),
                              texture=tex * alpha[..., None], alpha=alpha))
    return SceneLayout(background=background, origin=origin, pan_velocity=pan,
                       shake_direction=shake_dir, sprites=sprites)


def render_frame(layout: SceneLayout, cfg: VideoConfig, t: float) -> np.ndarray:
    xs, ys = pixel_grid(cfg.height, cfg.width)
    off = layout.camera_offset(cfg, t)
    frame = bilinear_sample(layout.background, xs + off[0], ys + off[1])
    for sp in layout.sprites:
        size = sp.alpha.shape[0]
        c = (size - 1) / 2.0
        period = np.array([cfg.width + size, cfg.height + size], dtype=np.float64)
        # sprites wrap around the view so they keep re-entering the scene
        pos = np.mod(sp.position + sp.velocity * t + size / 2.0, period) - size / 2.0
        lx, ly = xs - pos[0] + c, ys - pos[1] + c
        inside = (lx >= 0) & (lx <= size - 1) & (ly >= 0) & (ly <= size - 1)
        if not inside.any():
            continue
        a = bilinear_sample(sp.alpha, lx, ly)[..., 0] * inside
        premul = bilinear_sample(sp.texture, lx, ly) * inside[..., None]
        frame = frame * (1 - a[..., None]) + premul
    return np.clip(frame, 0.0, 1.0)


def synthesize_toy_video(scene_seed: int, frames: int, dims: tuple[int, int] | None = None,
                         cfg: VideoConfig | None = None) -> list[np.ndarray]:
    """Sharp frames of a seeded toy scene (shaking camera + moving sprites)."""
    if frames < 8:
        raise ValueError(f"synthesize_toy_video: need at least 8 frames, got {frames}")
    cfg = cfg or VideoConfig()
    if dims is not None:
        cfg = replace(cfg, height=int(dims[0]), width=int(dims[1]))
    layout = scene_layout(cfg, scene_seed, frames)
    return [render_frame(layout, cfg, t) for t in range(frames)]


def synthesize_blur(frames: list, window: int, center: int | None = None) -> np.ndarray:
    """Pixel-wise mean of ``window`` consecutive frames centred at ``center``."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"synthesize_blur: window must be odd and >= 1, got {window}")
    if window > len(frames):
        raise ValueError(f"synthesize_blur: window {window} exceeds {len(frames)} frames")
    if center is None:
        center = len(frames) // 2
    lo = center - window // 2
    hi = lo + window
    if lo < 0 or hi > len(frames):
        raise ValueError(f"synthesize_blur: window {window} at {center} exceeds frame range")
    stack = np.stack([as_image(f) for f in frames[lo:hi]])
    return stack.mean(axis=0)


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------


def write_flow(path, flow) -> None:
    """Little-endian: ``BFLW``, u32 H, u32 W, u32 planes (=2), f32 dx plane, f32 dy plane."""
    flow = as_flow(flow)
    h, w = flow.shape[:2]
    header = FLOW_MAGIC + struct.pack("<III", h, w, 2)
    body = np.ascontiguousarray(flow.transpose(2, 0, 1), dtype="<f4").tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(header + body)


def read_flow(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FLOW_MAGIC:
        raise ImageError(f"{path}: not a BFLW flow file")
    h, w, planes = struct.unpack("<III", raw[4:16])
    if planes != 2 or len(raw) != 16 + 8 * h * w:
        raise ImageError(f"{path}: corrupt BFLW payload")
    data = np.frombuffer(raw, dtype="<f4", offset=16).reshape(2, h, w)
    return data.transpose(1, 2, 0).astype(np.float64)


def config_dict(cfg) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def config_from_dict(cls, data: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    conv = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return cls(**conv)


def write_warp_pairs(out_dir, pairs: list[WarpPair], seeds: list[int],
                     wcfg: WarpConfig, dcfg: DegradationConfig) -> dict:
    """Write ``pairs/<index>/{warped,gt,valid}.png`` + ``flow.bflw`` and a manifest."""
    out = Path(out_dir)
    entries = []
    for i, (pair, seed) in enumerate(zip(pairs, seeds)):
        d = out / "pairs" / f"{i:05d}"
        write_png(d / "warped.png", pair.warped)
        write_png(d / "gt.png", pair.gt)
        write_flow(d / "flow.bflw", pair.gt_flow)
        write_mask_png(d / "valid.png", pair.valid)
        if pair.occluded is not None:
            write_mask_png(d / "occluded.png", pair.occluded)
        entries.append({"index": i, "seed": int(seed), "dir": f"pairs/{i:05d}"})
    manifest = {"count": len(entries), "warp": config_dict(wcfg),
                "degradation": config_dict(dcfg), "pairs": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def texture_pool(count: int, size: tuple[int, int], seed: int, channels: int = 3) -> list[np.ndarray]:
    """Sharp source images for matcher training, disjoint from any toy scene.

    Noise strength and shape density vary per texture so the pool spans both
    busy noise fields and smooth, shape-dominated scenes.
    """
    out = []
    for s in child_seeds(seed, count):
        rng = np.random.default_rng([s, 1])
        noise = float(rng.uniform(0.25, 1.0))
        density = float(np.exp(rng.uniform(np.log(1 / 900), np.log(1 / 120))))
        out.append(random_texture(size[0], size[1], s, channels, noise=noise, shape_density=density))
    return out


class WarpPairStream:
    """Endless deterministic stream of warp pairs; sample ``i`` depends only on ``(seed, i)``."""

    def __init__(self, sources: list[np.ndarray], wcfgs, dcfg: DegradationConfig, seed: int):
        if not sources:
            raise ValueError("WarpPairStream: no source images")
        self.sources = sources
        self.wcfgs = list(wcfgs) if isinstance(wcfgs, (list, tuple)) else [wcfgs]
        self.dcfg = dcfg
        self.seed = int(seed)

    def pair(self, i: int) -> WarpPair:
        pick, pseed = child_seeds(self.seed * 1_000_003 + i, 2)
        rng = np.random.default_rng(pick)
        src = self.sources[int(rng.integers(len(self.sources)))]
        wcfg = self.wcfgs[int(rng.integers(len(self.wcfgs)))]
        return make_warp_pair(src, wcfg, self.dcfg, pseed)

    def take(self, n: int, start: int = 0) -> list[WarpPair]:
        return [self.pair(i) for i in range(start, start + n)]

    def __iter__(self):
        i = 0
        while True:
            yield self.pair(i)
            i += 1
