"""Iterative reference-based deblurring.

Each epoch ``k``:

1. ``current = D(blur; theta_k)`` (the raw blurry image at ``k = 0``);
2. pseudo-sharp targets and confidences are regenerated from ``current`` and
   the sharp references, and the confidences are binarised at ``tau``;
3. ``theta`` is updated for ``steps_per_epoch`` Adam steps on the masked
   reconstruction loss over random, identically-placed crops of the blurry
   image, its target and its mask.

Inference is a single forward pass of ``D``.  Ground truth, when supplied, is
only read by the metric logger.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load_file

from .densematch import CheckpointError, NumericalError, cosine_lr, read_checkpoint_meta, write_checkpoint
from .imgcore import as_image, masked_psnr, psnr, read_mask_png, read_png, write_mask_png, write_png
from .pseudosharp import STRATEGIES, ReferenceSet, binarize_mask, generate_pseudo

log = logging.getLogger(__name__)

LOSSES = ("l1", "l2")


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.LeakyReLU(0.1))


class DeblurNet(nn.Module):
    """Residual encoder-decoder: ``out = clip(x + f(x), 0, 1)``, eight conv stages."""

    factor = 2

    def __init__(self, channels: int = 3, width: int = 32, lightweight: bool = False):
        super().__init__()
        w = width // 2 if lightweight else width
        self.arch = {"channels": channels, "width": width, "lightweight": lightweight}
        self.head = _conv(channels, w)
        self.enc = _conv(w, w)
        self.down = _conv(w, 2 * w, stride=2)
        self.mid = nn.Sequential(_conv(2 * w, 2 * w), _conv(2 * w, 2 * w))
        self.up = nn.Sequential(nn.Conv2d(2 * w, 4 * w, 3, 1, 1), nn.PixelShuffle(2), nn.LeakyReLU(0.1))
        self.dec = _conv(2 * w, w)
        self.tail = nn.Conv2d(w, channels, 3, 1, 1)
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def arch_hash(self) -> str:
        shapes = sorted((k, list(v.shape)) for k, v in self.state_dict().items())
        blob = json.dumps({"arch": self.arch, "params": shapes}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        ph, pw = (-h) % self.factor, (-w) % self.factor
        xp = F.pad(x, (0, pw, 0, ph), mode="replicate") if (ph or pw) else x
        e = self.enc(self.head(xp))
        m = self.mid(self.down(e))
        d = self.dec(torch.cat([self.up(m), e], dim=1))
        return self.tail(d)[..., :h, :w]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.clamp(x + self.residual(x), 0.0, 1.0)


def _img_tensor(imgs) -> torch.Tensor:
    arr = np.stack([as_image(i) for i in imgs]).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


@torch.no_grad()
def deblur(net: DeblurNet, blur) -> np.ndarray:
    """Single forward pass; output has the input's dims and lies in [0, 1]."""
    net.eval()
    out = net(_img_tensor([blur]))[0].permute(1, 2, 0).numpy().astype(np.float64)
    return np.clip(np.nan_to_num(out, nan=0.0), 0.0, 1.0)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


def masked_loss(pred, target, mask, metric: str = "l1"):
    """``sum(|pred - target|^p * mask) / (C * max(sum(mask), 1))``.

    Tensors are ``(B, C, H, W)`` with a ``(B, H, W)`` or ``(B, 1, H, W)``
    mask; numpy images ``(H, W, C)`` with an ``(H, W)`` mask return a float.
    """
    if metric not in LOSSES:
        raise ValueError(f"masked_loss: metric must be one of {LOSSES}, got {metric!r}")
    if not isinstance(pred, torch.Tensor):
        p = torch.from_numpy(as_image(pred)).permute(2, 0, 1)[None]
        t = torch.from_numpy(as_image(target)).permute(2, 0, 1)[None]
        m = torch.from_numpy(np.asarray(mask, dtype=np.float64))[None]
        return float(masked_loss(p, t, m, metric))
    if mask.dim() == pred.dim() - 1:
        mask = mask.unsqueeze(1)
    diff = pred - target
    err = diff.abs() if metric == "l1" else diff * diff
    channels = pred.shape[1]
    return (err * mask).sum() / (channels * mask.sum().clamp(min=1.0))


def masked_loss_grad(pred, target, mask, metric: str = "l1") -> np.ndarray:
    """Closed-form gradient of ``masked_loss`` w.r.t. ``pred`` (numpy images)."""
    p, t = as_image(pred), as_image(target)
    m = np.asarray(mask, dtype=np.float64)[..., None]
    denom = p.shape[2] * max(float(m.sum()), 1.0)
    diff = p - t
    g = np.sign(diff) if metric == "l1" else 2.0 * diff
    return g * m / denom


# --------------------------------------------------------------------------
# configs and state
# --------------------------------------------------------------------------


@dataclass
class BlurRefConfig:
    epochs: int = 8
    steps_per_epoch: int = 250
    batch_size: int = 4
    crop: int = 64
    flip_p: float = 0.5
    lr: float = 2e-4
    lr_final: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    loss: str = "l1"
    strategy: str = "prog"
    tau: float = 0.7
    n_refs: int = 6
    seed: int = 0
    width: int = 32
    lightweight: bool = False
    blended_input: bool = False
    normalized: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("BlurRefConfig.epochs must be >= 1")
        if self.steps_per_epoch < 0 or self.batch_size < 1 or self.crop < 8:
            raise ValueError("BlurRefConfig: invalid steps/batch/crop")
        if not (self.lr > 0 and self.lr_final > 0 and self.lr_final <= self.lr):
            raise ValueError("BlurRefConfig: need 0 < lr_final <= lr")
        if self.loss not in LOSSES:
            raise ValueError(f"BlurRefConfig.loss must be one of {LOSSES}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"BlurRefConfig.strategy must be one of {STRATEGIES}")
        if not 0 < self.tau < 1:
            raise ValueError("BlurRefConfig.tau must lie in (0, 1)")
        if not 0 <= self.flip_p <= 1:
            raise ValueError("BlurRefConfig.flip_p must lie in [0, 1]")

    def pseudo_options(self) -> dict:
        if self.strategy == "prog":
            return {"blended_input": self.blended_input, "normalized": self.normalized}
        if self.strategy == "avg":
            return {"normalized": self.normalized}
        return {}


@dataclass
class TrainState:
    net: DeblurNet | None = None
    epochs_completed: int = 0
    pseudo: list[np.ndarray] = field(default_factory=list)
    conf: list[np.ndarray] = field(default_factory=list)
    mask: list[np.ndarray] = field(default_factory=list)
    pseudo_epoch: int = -1
    history: list[dict] = field(default_factory=list)
    step_log: list[dict] = field(default_factory=list)
    audit: dict = field(default_factory=lambda: {"gt_in_training": False, "gt_metric_reads": 0})
    config: dict = field(default_factory=dict)


def _random_batch(rng: np.random.Generator, inputs, targets, masks, cfg_crop: int,
                  batch_size: int, flip_p: float):
    xs, ys, ms = [], [], []
    for _ in range(batch_size):
        i = int(rng.integers(len(inputs)))
        h, w = inputs[i].shape[:2]
        ch, cw = min(cfg_crop, h), min(cfg_crop, w)
        top = int(rng.integers(h - ch + 1))
        left = int(rng.integers(w - cw + 1))
        box = (slice(top, top + ch), slice(left, left + cw))
        x, y, m = inputs[i][box], targets[i][box], masks[i][box]
        if rng.random() < flip_p:
            x, y, m = x[:, ::-1], y[:, ::-1], m[:, ::-1]
        if rng.random() < flip_p:
            x, y, m = x[::-1], y[::-1], m[::-1]
        xs.append(x)
        ys.append(y)
        ms.append(m)
    mask_t = torch.from_numpy(np.stack(ms).astype(np.float32))
    return _img_tensor(xs), _img_tensor(ys), mask_t


def _optimizer(net: DeblurNet, lr: float, beta1: float, beta2: float):
    return torch.optim.Adam(net.parameters(), lr=lr, betas=(beta1, beta2))


def _train_steps(net, opt, rng, inputs, targets, masks, *, steps, total_steps, step0, lr, lr_final,
                 batch_size, crop, flip_p, loss, epoch, step_log):
    net.train()
    losses = []
    for s in range(steps):
        gstep = step0 + s
        for g in opt.param_groups:
            g["lr"] = cosine_lr(gstep, total_steps, lr, lr_final)
        x, y, m = _random_batch(rng, inputs, targets, masks, crop, batch_size, flip_p)
        value = masked_loss(net(x), y, m, loss)
        if not torch.isfinite(value):
            raise NumericalError(f"non-finite loss at epoch {epoch}, step {s}")
        opt.zero_grad()
        value.backward()
        opt.step()
        losses.append(float(value.item()))
        step_log.append({"epoch": epoch, "step": gstep, "loss": losses[-1]})
    net.eval()
    return losses


def _metrics(state: TrainState, net: DeblurNet, blur_set, gt_set, epoch: int, losses: list[float]) -> dict:
    row = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else None,
           "coverage": float(np.mean([m.mean() for m in state.mask])),
           "masked_psnr_pseudo": None, "psnr_deblur_val": None, "psnr_blur_val": None}
    if gt_set is not None:
        state.audit["gt_metric_reads"] += 1
        vals = [masked_psnr(p, g, m) for p, g, m in zip(state.pseudo, gt_set, state.mask) if m.any()]
        row["masked_psnr_pseudo"] = float(np.mean(vals)) if vals else None
        row["psnr_deblur_val"] = float(np.mean([psnr(deblur(net, b), g) for b, g in zip(blur_set, gt_set)]))
        row["psnr_blur_val"] = float(np.mean([psnr(b, g) for b, g in zip(blur_set, gt_set)]))
    return row


def regenerate_targets(matcher, currents, ref_sets, cfg: BlurRefConfig):
    """Pseudo targets for every image; optional thread pool, results kept in index order."""
    opts = cfg.pseudo_options()

    def one(i):
        return generate_pseudo(matcher, currents[i], ref_sets[i], cfg.strategy, **opts)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            return list(pool.map(one, range(len(currents))))
    return [one(i) for i in range(len(currents))]


def run_bluref(blur_set, ref_sets, gt_set, matcher, cfg: BlurRefConfig | None = None,
               net: DeblurNet | None = None) -> tuple[DeblurNet, TrainState]:
    """Alternate pseudo-target regeneration and masked-loss optimisation for ``cfg.epochs``."""
    cfg = cfg or BlurRefConfig()
    if not blur_set:
        raise ValueError("run_bluref: empty blur set")
    if len(blur_set) != len(ref_sets):
        raise ValueError(f"run_bluref: {len(blur_set)} blurry images but {len(ref_sets)} reference sets")
    if gt_set is not None and len(gt_set) != len(blur_set):
        raise ValueError("run_bluref: gt_set length differs from blur_set")
    blur_set = [as_image(b, "blur") for b in blur_set]
    ref_sets = [r if isinstance(r, ReferenceSet) else ReferenceSet(list(r)) for r in ref_sets]
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    net = net or DeblurNet(blur_set[0].shape[2], cfg.width, cfg.lightweight)
    opt = _optimizer(net, cfg.lr, cfg.beta1, cfg.beta2)
    total = cfg.epochs * cfg.steps_per_epoch
    state = TrainState(net=net, config=asdict(cfg))
    for k in range(cfg.epochs):
        currents = blur_set if k == 0 else [deblur(net, b) for b in blur_set]
        targets = regenerate_targets(matcher, currents, ref_sets, cfg)
        state.pseudo = [t.image for t in targets]
        state.conf = [t.conf for t in targets]
        state.mask = [binarize_mask(t.conf, cfg.tau) for t in targets]
        state.pseudo_epoch = k
        losses = _train_steps(net, opt, rng, blur_set, state.pseudo, state.mask,
                              steps=cfg.steps_per_epoch, total_steps=total, step0=k * cfg.steps_per_epoch,
                              lr=cfg.lr, lr_final=cfg.lr_final, batch_size=cfg.batch_size, crop=cfg.crop,
                              flip_p=cfg.flip_p, loss=cfg.loss, epoch=k, step_log=state.step_log)
        row = _metrics(state, net, blur_set, gt_set, k, losses)
        state.history.append(row)
        state.epochs_completed = k + 1
        log.info("epoch %d: %s", k, {a: b for a, b in row.items() if b is not None})
    return net, state


# --------------------------------------------------------------------------
# pair datasets
# --------------------------------------------------------------------------


def write_pairs(out_dir, blur_set, targets, masks=None, ids=None, meta: dict | None = None,
                target_name: str = "target") -> dict:
    """Write ``pairs/<id>/{blur,<target_name>,mask}.png`` and ``manifest.json``."""
    out = Path(out_dir)
    ids = ids or [f"{i:05d}" for i in range(len(blur_set))]
    entries = []
    for i, sid in enumerate(ids):
        d = out / "pairs" / sid
        write_png(d / "blur.png", blur_set[i])
        write_png(d / f"{target_name}.png", targets[i])
        entry = {"id": sid, "blur": f"pairs/{sid}/blur.png", "target": f"pairs/{sid}/{target_name}.png"}
        if masks is not None:
            write_mask_png(d / "mask.png", masks[i])
            entry["mask"] = f"pairs/{sid}/mask.png"
        entries.append(entry)
    manifest = {**(meta or {}), "count": len(entries), "pairs": entries}
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def export_pseudo_pairs(state: TrainState, blur_set, out_dir, ids=None) -> dict:
    """Write the latest ``(blur, pseudo, binary mask)`` triples plus provenance."""
    if state.epochs_completed < 1 or not state.pseudo:
        raise ValueError("export_pseudo_pairs: state has no completed epoch")
    if len(blur_set) != len(state.pseudo):
        raise ValueError("export_pseudo_pairs: blur_set does not match state")
    meta = {"source": "bluref", "strategy": state.config.get("strategy"), "tau": state.config.get("tau"),
            "epoch": state.pseudo_epoch}
    return write_pairs(out_dir, blur_set, state.pseudo, state.mask, ids=ids, meta=meta, target_name="pseudo")


def load_pairs(pairs_dir):
    root = Path(pairs_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"{mpath}: missing pair manifest")
    manifest = json.loads(mpath.read_text())
    entries = manifest.get("pairs", [])
    if not entries:
        raise ValueError(f"{mpath}: manifest lists no pairs")
    missing = [str(root / e[k]) for e in entries for k in ("blur", "target", "mask")
               if k in e and not (root / e[k]).exists()]
    if missing:
        raise FileNotFoundError("missing pair files: " + ", ".join(missing))
    blur = [read_png(root / e["blur"]) for e in entries]
    target = [read_png(root / e["target"]) for e in entries]
    masks = [read_mask_png(root / e["mask"]) if "mask" in e else np.ones(b.shape[:2])
             for e, b in zip(entries, blur)]
    return blur, target, masks, manifest


@dataclass
class ModelConfig:
    width: int = 32
    lightweight: bool = False


@dataclass
class PairTrainConfig:
    steps: int = 2000
    batch_size: int = 4
    crop: int = 64
    flip_p: float = 0.5
    lr: float = 2e-4
    lr_final: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    loss: str = "l1"
    seed: int = 0


def train_from_pairs(pairs_dir, model_cfg: ModelConfig | None = None,
                     train_cfg: PairTrainConfig | None = None) -> DeblurNet:
    """Supervised masked-loss training on a pair directory (all-ones mask when none is stored)."""
    model_cfg = model_cfg or ModelConfig()
    train_cfg = train_cfg or PairTrainConfig()
    blur, target, masks, _ = load_pairs(pairs_dir)
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    net = DeblurNet(blur[0].shape[2], model_cfg.width, model_cfg.lightweight)
    opt = _optimizer(net, train_cfg.lr, train_cfg.beta1, train_cfg.beta2)
    _train_steps(net, opt, rng, blur, target, masks, steps=train_cfg.steps, total_steps=train_cfg.steps,
                 step0=0, lr=train_cfg.lr, lr_final=train_cfg.lr_final, batch_size=train_cfg.batch_size,
                 crop=train_cfg.crop, flip_p=train_cfg.flip_p, loss=train_cfg.loss, epoch=0, step_log=[])
    return net


# --------------------------------------------------------------------------
# checkpoints and logs
# --------------------------------------------------------------------------


def save_deblur(path, net: DeblurNet, sidecar: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().contiguous() for k, v in net.state_dict().items()}
    write_checkpoint(path, tensors, {"arch_hash": net.arch_hash(), "arch": net.arch, "kind": "deblur"})
    side = {"arch_hash": net.arch_hash(), "arch": net.arch, **(sidecar or {})}
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))


def load_deblur(path) -> DeblurNet:
    meta = read_checkpoint_meta(path)
    if meta.get("kind") != "deblur":
        raise CheckpointError(f"{path}: not a deblur checkpoint")
    net = DeblurNet(**meta["arch"])
    if net.arch_hash() != meta["arch_hash"]:
        raise CheckpointError(f"{path}: architecture hash mismatch")
    net.load_state_dict(load_file(str(path)))
    net.eval()
    return net


def write_metrics_csv(path, state: TrainState) -> None:
    """One row per optimiser step; epoch metrics sit on each epoch's last row."""
    by_epoch = {row["epoch"]: row for row in state.history}
    last_step = {}
    for rec in state.step_log:
        last_step[rec["epoch"]] = rec["step"]
    rows = []
    for rec in state.step_log:
        h = by_epoch.get(rec["epoch"], {}) if last_step[rec["epoch"]] == rec["step"] else {}
        rows.append([rec["epoch"], rec["step"], f"{rec['loss']:.8f}",
                     _fmt(h.get("masked_psnr_pseudo")), _fmt(h.get("psnr_deblur_val"))])
    for epoch, h in by_epoch.items():
        if epoch not in last_step:
            rows.append([epoch, "", "", _fmt(h.get("masked_psnr_pseudo")), _fmt(h.get("psnr_deblur_val"))])
    rows.sort(key=lambda r: (r[0], r[1] if r[1] != "" else -1))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "loss", "masked_psnr_pseudo", "psnr_deblur_val"])
        w.writerows(rows)


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"
