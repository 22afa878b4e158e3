"""Image containers, backward warping and full-reference metrics.

Conventions used across the package:

* an image is a float64 array of shape ``(H, W, C)`` with ``C`` in {1, 3}
  and values in [0, 1];
* a flow field is a float array of shape ``(H, W, 2)`` holding ``(dx, dy)``
  in pixels, mapping a target pixel ``x`` to the reference location
  ``x + flow(x)``;
* confidence maps and binary masks are ``(H, W)`` arrays.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import correlate

PSNR_CAP = 100.0
LUMA = np.array([0.299, 0.587, 0.114])


class ImageError(ValueError):
    """Raised when an image, flow or mask violates its contract."""


def as_image(img, name: str = "image") -> np.ndarray:
    """Return ``img`` as an ``(H, W, C)`` float64 array, promoting 2-D input."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ImageError(f"{name}: expected (H, W, C) with C in {{1, 3}}, got {arr.shape}")
    return arr


def as_flow(flow, name: str = "flow") -> np.ndarray:
    arr = np.asarray(flow, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ImageError(f"{name}: expected (H, W, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ImageError(f"{name}: contains non-finite values")
    return arr


def _check_same_hw(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape[:2] != b.shape[:2]:
        raise ImageError(f"{what}: spatial dims differ {a.shape[:2]} vs {b.shape[:2]}")


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ImageError(f"{what}: shapes differ {a.shape} vs {b.shape}")


def to_gray(img) -> np.ndarray:
    """Luma of an image as an ``(H, W)`` array (identity on single channel)."""
    img = as_image(img)
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img @ LUMA


def bilinear_sample(img, xs, ys) -> np.ndarray:
    """Sample ``img`` at real coordinates with edge-clamped bilinear weights."""
    img = as_image(img)
    h, w = img.shape[:2]
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def warp_backward(ref, flow) -> np.ndarray:
    """Backward-warp ``ref``: ``out(x) = ref(x + flow(x))``, bilinear, edge-clamped."""
    ref = as_image(ref, "ref")
    flow = as_flow(flow)
    _check_same_hw(ref, flow, "warp_backward")
    xs, ys = pixel_grid(*ref.shape[:2])
    return bilinear_sample(ref, xs + flow[..., 0], ys + flow[..., 1])


def inside_mask(flow) -> np.ndarray:
    """1 where ``x + flow(x)`` lands inside the image without clamping."""
    flow = as_flow(flow)
    h, w = flow.shape[:2]
    xs, ys = pixel_grid(h, w)
    tx = xs + flow[..., 0]
    ty = ys + flow[..., 1]
    ok = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    return ok.astype(np.float64)


def _psnr_from_mse(mse: float, peak: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(peak**2 / mse)))


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = as_image(a, "a"), as_image(b, "b")
    _check_same_shape(a, b, "psnr")
    return _psnr_from_mse(float(np.mean((a - b) ** 2)), peak)


def masked_psnr(a, b, mask, peak: float = 1.0) -> float:
    """PSNR restricted to pixels where ``mask`` is 1 (all channels there)."""
    a, b = as_image(a, "a"), as_image(b, "b")
    _check_same_shape(a, b, "masked_psnr")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.shape[:2]:
        raise ImageError(f"masked_psnr: mask shape {mask.shape} vs image {a.shape[:2]}")
    sel = mask > 0.5
    if not sel.any():
        raise ImageError("masked_psnr: mask selects no pixels")
    diff = (a - b)[sel]
    return _psnr_from_mse(float(np.mean(diff**2)), peak)


def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a, b, peak: float = 1.0, win_size: int = 7, sigma: float = 1.5) -> float:
    """Mean single-scale SSIM over all full 7x7 Gaussian windows (luma for RGB)."""
    ga, gb = to_gray(a), to_gray(b)
    if ga.shape != gb.shape:
        raise ImageError(f"ssim: shapes differ {ga.shape} vs {gb.shape}")
    if min(ga.shape) < win_size:
        raise ImageError(f"ssim: image {ga.shape} smaller than {win_size}x{win_size} window")
    win = gaussian_window(win_size, sigma)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    pad = win_size // 2

    def filt(x):
        return correlate(x, win, mode="constant")[pad:-pad, pad:-pad]

    mu_a, mu_b = filt(ga), filt(gb)
    var_a = filt(ga * ga) - mu_a**2
    var_b = filt(gb * gb) - mu_b**2
    cov = filt(ga * gb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(as_image(img), 0.0, 1.0) * 255.0).astype(np.uint8)


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return as_image(arr)


def write_png(path, img) -> None:
    q = to_uint8(img)
    data = q[:, :, 0] if q.shape[2] == 1 else q
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(data).save(path, format="PNG", optimize=False)


def write_mask_png(path, mask) -> None:
    write_png(path, (np.asarray(mask) > 0.5).astype(np.float64))


def read_mask_png(path) -> np.ndarray:
    return (read_png(path)[:, :, 0] > 0.5).astype(np.float64)
