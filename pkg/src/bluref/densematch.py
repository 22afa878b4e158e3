"""Dense matching: a small coarse-to-fine correlation network with a
confidence head, its self-supervised trainer, and an exhaustive ZNCC matcher
used as an independent oracle.

The network sees the luma of both images, normalised per image to zero mean
and unit variance.  At every pyramid level the reference features are warped
by the upsampled coarser flow, correlated with the target features inside a
``(2r+1)^2`` window, turned into a soft-argmax displacement and refined by a
small convolutional decoder.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load_file, save_file
from scipy.ndimage import uniform_filter

from .imgcore import ImageError, as_image, to_gray, warp_backward
from .synthgen import WarpPair

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


class MatchResult(NamedTuple):
    flow: np.ndarray
    confidence: np.ndarray


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------


def warp_tensor(x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Edge-clamped bilinear backward warp of ``(B, C, H, W)`` by ``(B, 2, H, W)`` pixel flow."""
    b, _, h, w = x.shape
    ys, xs = torch.meshgrid(torch.arange(h, dtype=x.dtype), torch.arange(w, dtype=x.dtype), indexing="ij")
    gx = (xs + flow[:, 0]) * (2.0 / max(w - 1, 1)) - 1.0
    gy = (ys + flow[:, 1]) * (2.0 / max(h - 1, 1)) - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=True)


def local_correlation(ft: torch.Tensor, fr: torch.Tensor, radius: int) -> torch.Tensor:
    """Dot products of ``ft(x)`` with ``fr(x + d)`` for every ``d`` in the window."""
    fr_pad = F.pad(fr, (radius, radius, radius, radius), mode="replicate")
    return _ShiftedDot.apply(ft, fr_pad, radius)


class _ShiftedDot(torch.autograd.Function):
    # Autograd on the per-shift slices allocates a zeroed padded gradient for every
    # displacement; accumulating into one buffer keeps training memory-light.

    @staticmethod
    def forward(ctx, ft, fr_pad, radius):
        _, _, h, w = ft.shape
        k = 2 * radius + 1
        out = ft.new_empty(ft.shape[0], k * k, h, w)
        for i in range(k * k):
            dy, dx = divmod(i, k)
            torch.sum(ft * fr_pad[:, :, dy:dy + h, dx:dx + w], dim=1, out=out[:, i])
        ctx.save_for_backward(ft, fr_pad)
        ctx.k = k
        return out

    @staticmethod
    def backward(ctx, grad):
        ft, fr_pad = ctx.saved_tensors
        _, _, h, w = ft.shape
        g_ft = torch.zeros_like(ft) if ctx.needs_input_grad[0] else None
        g_fr = torch.zeros_like(fr_pad) if ctx.needs_input_grad[1] else None
        for i in range(ctx.k * ctx.k):
            dy, dx = divmod(i, ctx.k)
            g = grad[:, i:i + 1]
            if g_ft is not None:
                g_ft.addcmul_(g, fr_pad[:, :, dy:dy + h, dx:dx + w])
            if g_fr is not None:
                g_fr[:, :, dy:dy + h, dx:dx + w].addcmul_(g, ft)
        return g_ft, g_fr, None


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.LeakyReLU(0.1))


class MatcherNet(nn.Module):
    """Coarse-to-fine matcher. Flows are in pixels of the input resolution."""

    def __init__(self, widths: Sequence[int] = (16, 32, 48), radii: Sequence[int] = (2, 3, 4),
                 decoder_width: int = 32, conf_radius: int = 2, presmooth: float = 1.0):
        super().__init__()
        if len(radii) != len(widths):
            raise ValueError("MatcherNet: one search radius per pyramid level")
        if presmooth < 0:
            raise ValueError("MatcherNet: presmooth must be >= 0")
        self.arch = {"widths": list(widths), "radii": list(radii), "decoder_width": decoder_width,
                     "conf_radius": conf_radius, "presmooth": float(presmooth)}
        self.presmooth = presmooth
        self.radii = tuple(radii)
        self.conf_radius = conf_radius
        stages, cin = [], 1
        for i, c in enumerate(widths):
            stages.append(nn.Sequential(_conv(cin, c, 1 if i == 0 else 2), _conv(c, c)))
            cin = c
        self.stages = nn.ModuleList(stages)
        self.decoders = nn.ModuleList()
        for c, r in zip(widths, radii):
            k2 = (2 * r + 1) ** 2
            head = nn.Conv2d(decoder_width, 2, 3, 1, 1)
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            self.decoders.append(nn.Sequential(_conv(k2 + c + 2, decoder_width),
                                               _conv(decoder_width, decoder_width), head))
        self.log_beta = nn.Parameter(torch.full((len(widths),), math.log(10.0)))
        kc = (2 * conf_radius + 1) ** 2
        self.conf_head = nn.Sequential(_conv(kc + widths[0] + 2, 16), nn.Conv2d(16, 1, 3, 1, 1))

    @staticmethod
    def _offsets(radius: int) -> torch.Tensor:
        r = torch.arange(-radius, radius + 1, dtype=torch.float32)
        dy, dx = torch.meshgrid(r, r, indexing="ij")
        return torch.stack([dx.flatten(), dy.flatten()])

    @property
    def levels(self) -> int:
        return len(self.stages)

    @property
    def stride(self) -> int:
        return 2 ** (self.levels - 1)

    def arch_hash(self) -> str:
        shapes = sorted((k, list(v.shape)) for k, v in self.state_dict().items())
        blob = json.dumps({"arch": self.arch, "params": shapes}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def smooth(self, x: torch.Tensor) -> torch.Tensor:
        """Fixed Gaussian low-pass applied to both inputs; damps artifacts the two images don't share."""
        if self.presmooth <= 0:
            return x
        r = max(1, int(math.ceil(3 * self.presmooth)))
        g = torch.exp(-torch.arange(-r, r + 1, dtype=x.dtype) ** 2 / (2 * self.presmooth**2))
        g = g / g.sum()
        x = F.conv2d(F.pad(x, (r, r, 0, 0), mode="replicate"), g.view(1, 1, 1, -1))
        return F.conv2d(F.pad(x, (0, 0, r, r), mode="replicate"), g.view(1, 1, -1, 1))

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.smooth(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def forward(self, target: torch.Tensor, ref: torch.Tensor):
        """Return (list of per-level flows fine->coarse, confidence in [0, 1])."""
        b = target.shape[0]
        both = self.features(torch.cat([target, ref]))
        ft_all, fr_all = [f[:b] for f in both], [f[b:] for f in both]
        flows = []
        flow = None
        for lvl in reversed(range(self.levels)):
            ft, fr = ft_all[lvl], fr_all[lvl]
            b, _, h, w = ft.shape
            if flow is None:
                flow = ft.new_zeros(b, 2, h, w)
            else:
                flow = 2.0 * F.interpolate(flow, size=(h, w), mode="bilinear", align_corners=False)
            fr_w = warp_tensor(fr, flow)
            radius = self.radii[lvl]
            corr = local_correlation(F.normalize(ft, dim=1), F.normalize(fr_w, dim=1), radius)
            prob = torch.softmax(corr * self.log_beta[lvl].exp(), dim=1)
            soft = torch.einsum("bkhw,ck->bchw", prob, self._offsets(radius))
            flow = flow + soft + self.decoders[lvl](torch.cat([corr, ft, flow], dim=1))
            flows.append(flow)
        ft0 = F.normalize(ft_all[0], dim=1)
        fr0 = F.normalize(warp_tensor(fr_all[0], flow), dim=1)
        corr = local_correlation(ft0, fr0, self.conf_radius)
        centre = corr[:, corr.shape[1] // 2:corr.shape[1] // 2 + 1]
        peak = corr.max(dim=1, keepdim=True).values
        logits = self.conf_head(torch.cat([corr, ft_all[0], centre, peak], dim=1))
        return flows[::-1], torch.sigmoid(logits)[:, 0]


def normalize_input(img) -> np.ndarray:
    g = to_gray(img)
    return (g - g.mean()) / (g.std() + 1e-2)


def _to_tensor(gray_batch: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(gray_batch)[:, None].astype(np.float32))


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------


def _pad_to(x: np.ndarray, mult: int) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = x.shape
    ph, pw = (-h) % mult, (-w) % mult
    if ph or pw:
        x = np.pad(x, ((0, ph), (0, pw)), mode="edge")
    return x, (h, w)


@torch.no_grad()
def predict(net: MatcherNet, target, ref) -> MatchResult:
    target, ref = as_image(target, "target"), as_image(ref, "ref")
    if target.shape[:2] != ref.shape[:2]:
        raise ImageError(f"matcher: target {target.shape[:2]} and ref {ref.shape[:2]} differ")
    t, (h, w) = _pad_to(normalize_input(target), net.stride)
    r, _ = _pad_to(normalize_input(ref), net.stride)
    net.eval()
    flows, conf = net(_to_tensor([t]), _to_tensor([r]))
    flow = flows[0][0].permute(1, 2, 0).numpy().astype(np.float64)[:h, :w]
    conf = conf[0].numpy().astype(np.float64)[:h, :w]
    flow = np.nan_to_num(flow, nan=0.0, posinf=0.0, neginf=0.0)
    conf = np.clip(np.nan_to_num(conf, nan=0.0), 0.0, 1.0)
    return MatchResult(flow=flow, confidence=conf)


def dm_apply(net: MatcherNet, target, ref) -> tuple[np.ndarray, np.ndarray]:
    """Warp ``ref`` onto ``target``'s geometry; returns ``(trans, confidence)``."""
    res = predict(net, target, ref)
    trans = np.clip(warp_backward(as_image(ref), res.flow), 0.0, 1.0)
    return trans, res.confidence


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class MatcherTrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    lr_final: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    level_weights: tuple[float, ...] = (1.0, 0.5, 0.25)
    conf_weight: float = 1.0
    conf_tau: float = 1.0
    min_pairs: int = 1
    log_every: int = 100


def cosine_lr(step: int, total: int, lr0: float, lr1: float) -> float:
    """Cosine anneal from ``lr0`` at step 0 to ``lr1`` at step ``total - 1``."""
    if total <= 1 or step <= 0:
        return lr0
    if step >= total - 1:
        return lr1
    frac = step / (total - 1)
    return lr1 + 0.5 * (lr0 - lr1) * (1.0 + math.cos(math.pi * frac))


def _pair_iter(pair_source) -> Iterable[WarpPair]:
    if isinstance(pair_source, Sequence):
        while True:
            yield from pair_source
    else:
        yield from pair_source


def _downsample_flow(flow: torch.Tensor, factor: int) -> torch.Tensor:
    if factor == 1:
        return flow
    return F.avg_pool2d(flow, factor) / factor


def matchable(pair: WarpPair) -> np.ndarray:
    """Pixels with a true counterpart: inside the sharp crop and not occluded."""
    if pair.occluded is None:
        return pair.valid
    return pair.valid * (1.0 - pair.occluded)


def matcher_losses(net: MatcherNet, batch: list[WarpPair], cfg: MatcherTrainConfig):
    t = _to_tensor([normalize_input(p.warped) for p in batch])
    r = _to_tensor([normalize_input(p.gt) for p in batch])
    gt = torch.from_numpy(np.stack([p.gt_flow for p in batch]).astype(np.float32)).permute(0, 3, 1, 2)
    valid = torch.from_numpy(np.stack([matchable(p) for p in batch]).astype(np.float32))[:, None]
    flows, conf = net(t, r)
    epe_loss = t.new_zeros(())
    for lvl, flow in enumerate(flows):
        f = 2**lvl
        g = _downsample_flow(gt, f)
        v = (F.avg_pool2d(valid, f) > 0.999).float() if f > 1 else valid
        epe = torch.sqrt(((flow - g) ** 2).sum(1, keepdim=True) + 1e-8)
        weight = cfg.level_weights[lvl] if lvl < len(cfg.level_weights) else cfg.level_weights[-1]
        epe_loss = epe_loss + weight * (epe * v).sum() / v.sum().clamp(min=1.0)
    with torch.no_grad():
        epe0 = torch.sqrt(((flows[0] - gt) ** 2).sum(1))
        conf_target = ((epe0 < cfg.conf_tau) & (valid[:, 0] > 0.5)).float()
    bce = F.binary_cross_entropy(conf.clamp(1e-6, 1 - 1e-6), conf_target)
    return epe_loss + cfg.conf_weight * bce, epe_loss, bce


def train_matcher(pair_source, cfg: MatcherTrainConfig | None = None, seed: int = 0,
                  net: MatcherNet | None = None) -> tuple[MatcherNet, list[float]]:
    """Self-supervised matcher training on warp pairs; returns ``(net, loss_log)``."""
    cfg = cfg or MatcherTrainConfig()
    if isinstance(pair_source, Sequence) and len(pair_source) < max(cfg.min_pairs, 1):
        raise ValueError(f"train_matcher: pair source has {len(pair_source)} pairs, need {cfg.min_pairs}")
    torch.manual_seed(seed)
    net = net or MatcherNet()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    it = iter(_pair_iter(pair_source))
    losses: list[float] = []
    seen = 0
    net.train()
    for step in range(cfg.steps):
        batch = []
        for _ in range(cfg.batch_size):
            try:
                batch.append(next(it))
            except StopIteration:
                break
        seen += len(batch)
        if len(batch) < cfg.batch_size:
            if seen < max(cfg.min_pairs, 1):
                raise ValueError(f"train_matcher: pair source yielded {seen} pairs, need {cfg.min_pairs}")
            raise ValueError(f"train_matcher: pair source exhausted at step {step}")
        for g in opt.param_groups:
            g["lr"] = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_final)
        loss, epe, bce = matcher_losses(net, batch, cfg)
        if not torch.isfinite(loss):
            raise NumericalError(f"train_matcher: non-finite loss at step {step} (epe={epe.item()}, bce={bce.item()})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("matcher step %d loss %.4f epe %.3f bce %.3f", step, loss.item(), epe.item(), bce.item())
    net.eval()
    return net, losses


def mean_epe(net: MatcherNet, pairs: Sequence[WarpPair]) -> float:
    """Mean endpoint error inside the valid mask, pooled over all pairs."""
    total, count = 0.0, 0.0
    for p in pairs:
        res = predict(net, p.warped, p.gt)
        err = np.sqrt(((res.flow - p.gt_flow) ** 2).sum(-1))
        m = matchable(p)
        total += float((err * m).sum())
        count += float(m.sum())
    return total / max(count, 1.0)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def save_matcher(path, net: MatcherNet, train_cfg: dict | None = None) -> None:
    """Safetensors weights plus a JSON sidecar ``<path>.json`` with the config."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().contiguous() for k, v in net.state_dict().items()}
    write_checkpoint(path, tensors, {"arch_hash": net.arch_hash(), "arch": net.arch, "kind": "matcher"})
    sidecar = {"arch_hash": net.arch_hash(), "arch": net.arch, "train": train_cfg or {}}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def write_checkpoint(path, tensors: dict, meta: dict) -> None:
    # one metadata entry: safetensors writes a multi-key map in unstable order
    save_file(tensors, str(path), metadata={"bluref": json.dumps(meta, sort_keys=True)})


def read_checkpoint_meta(path) -> dict:
    from safetensors import safe_open

    try:
        with safe_open(str(path), framework="pt") as f:
            raw = (f.metadata() or {}).get("bluref")
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if raw is None:
        raise CheckpointError(f"{path}: missing checkpoint metadata")
    return json.loads(raw)


def load_matcher(path, expect_hash: str | None = None) -> MatcherNet:
    meta = read_checkpoint_meta(path)
    if meta.get("kind") != "matcher":
        raise CheckpointError(f"{path}: not a matcher checkpoint")
    net = MatcherNet(**meta["arch"])
    if net.arch_hash() != meta["arch_hash"] or (expect_hash and expect_hash != meta["arch_hash"]):
        raise CheckpointError(f"{path}: architecture hash mismatch")
    net.load_state_dict(load_file(str(path)))
    net.eval()
    return net


def matcher_config_dict(cfg: MatcherTrainConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


# --------------------------------------------------------------------------
# exhaustive oracle
# --------------------------------------------------------------------------


def brute_force_match(target, ref, patch: int = 7, radius: int = 4) -> MatchResult:
    """Integer displacement maximising zero-normalised cross-correlation per pixel.

    Confidence is ``(ncc + 1) / 2``; flat target patches get flow 0 and confidence 0.
    Ties keep the first displacement in row-major scan order.
    """
    if patch < 3 or patch % 2 == 0:
        raise ValueError(f"brute_force_match: patch must be odd and >= 3, got {patch}")
    if radius < 1:
        raise ValueError(f"brute_force_match: radius must be >= 1, got {radius}")
    t, r = to_gray(target), to_gray(ref)
    if t.shape != r.shape:
        raise ImageError(f"brute_force_match: shapes differ {t.shape} vs {r.shape}")
    h, w = t.shape
    if patch > min(h, w):
        raise ImageError(f"brute_force_match: patch {patch} larger than image {t.shape}")

    def box(x):
        return uniform_filter(x, patch, mode="nearest")

    mt = box(t)
    vt = np.maximum(box(t * t) - mt**2, 0.0)
    rp = np.pad(r, radius, mode="edge")
    best = np.full((h, w), -np.inf)
    flow = np.zeros((h, w, 2))
    eps = 1e-10
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            rs = rp[radius + dy:radius + dy + h, radius + dx:radius + dx + w]
            mr = box(rs)
            vr = np.maximum(box(rs * rs) - mr**2, 0.0)
            cov = box(t * rs) - mt * mr
            den = np.sqrt(vt * vr)
            ncc = np.where(den > eps, cov / np.maximum(den, eps), 0.0)
            better = ncc > best
            best = np.where(better, ncc, best)
            flow[better] = (dx, dy)
    flat = vt <= eps
    best = np.clip(best, -1.0, 1.0)
    conf = np.where(flat, 0.0, (best + 1.0) / 2.0)
    flow[flat] = 0.0
    return MatchResult(flow=flow, confidence=conf)
