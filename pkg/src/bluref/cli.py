"""Command-line driver: ``bluref <subcommand> --config run.json``.

Every subcommand reads a JSON run config, validates it against a schema that
rejects unknown keys, applies the ``BLUREF_SEED`` override and writes the
resolved config next to its outputs.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import types
import typing
from dataclasses import asdict, fields, is_dataclass, replace
from pathlib import Path

import jsonschema
import numpy as np
import torch

from . import blureftrain as bt
from . import densematch as dmod
from .datasetproto import ProtocolError, assemble_toy_dataset, load_toy_dataset
from .imgcore import ImageError, psnr, read_png, ssim, warp_backward, write_mask_png, write_png
from .pseudosharp import STRATEGIES, binarize_mask, generate_pseudo
from .synthgen import (DegradationConfig, VideoConfig, WarpConfig, WarpPairStream, child_seeds,
                       config_from_dict, texture_pool, write_flow, write_warp_pairs)

log = logging.getLogger("bluref")

SCHEMA_VERSION = "1"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# --------------------------------------------------------------------------
# schemas
# --------------------------------------------------------------------------

_SCALARS = {int: {"type": "integer"}, float: {"type": "number"}, bool: {"type": "boolean"},
            str: {"type": "string"}}


def _type_schema(tp) -> dict:
    origin = typing.get_origin(tp)
    if tp in _SCALARS:
        return dict(_SCALARS[tp])
    if origin is tuple:
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return {"type": "array", "items": _type_schema(args[0])}
        return {"type": "array", "prefixItems": [_type_schema(a) for a in args],
                "minItems": len(args), "maxItems": len(args)}
    if origin in (typing.Union, types.UnionType):
        return {"anyOf": [_type_schema(a) for a in typing.get_args(tp)]}
    if tp is type(None):
        return {"type": "null"}
    return {}


def dataclass_schema(cls) -> dict:
    """Object schema with one optional property per dataclass field."""
    hints = typing.get_type_hints(cls)
    props = {f.name: _type_schema(hints[f.name]) for f in fields(cls)}
    return {"type": "object", "properties": props, "additionalProperties": False}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_STR = {"type": "string"}
_INT = {"type": "integer"}
_NUM = {"type": "number"}
_COMMON = {"schema_version": {"const": SCHEMA_VERSION}, "seed": _INT, "out_dir": _STR}
_MATCHER_ARCH = _obj({"widths": {"type": "array", "items": _INT}, "radii": {"type": "array", "items": _INT},
                      "decoder_width": _INT, "conf_radius": _INT, "presmooth": _NUM})
_PSEUDO_OPTS = {"strategy": {"enum": list(STRATEGIES)}, "tau": _NUM, "normalized": {"type": "boolean"},
                "blended_input": {"type": "boolean"}}

SCHEMAS = {
    "gen-data": _obj({
        **_COMMON,
        "video": dataclass_schema(VideoConfig),
        "protocol": _obj({"delta": _INT, "n_refs": _INT, "window": _INT, "scenes": _INT,
                          "frames_per_scene": _INT}),
        "warp_pairs": _obj({"count": _INT, "texture_count": _INT,
                            "texture_size": {"type": "array", "items": _INT, "minItems": 2, "maxItems": 2},
                            "warp": dataclass_schema(WarpConfig),
                            "degradation": dataclass_schema(DegradationConfig)}),
    }, ["schema_version", "out_dir"]),
    "train-dm": _obj({
        **_COMMON,
        "model": _MATCHER_ARCH,
        "train": dataclass_schema(dmod.MatcherTrainConfig),
        "data": _obj({"texture_count": _INT,
                      "texture_size": {"type": "array", "items": _INT, "minItems": 2, "maxItems": 2},
                      "warps": {"type": "array", "items": dataclass_schema(WarpConfig), "minItems": 1},
                      "degradation": dataclass_schema(DegradationConfig)}),
        "heldout": _obj({"count": _INT, "seed": _INT}),
        "epe_budget": _NUM,
        "resume": _STR,
    }, ["schema_version", "out_dir"]),
    "match": _obj({
        **_COMMON, "method": {"enum": ["net", "brute"]}, "matcher": _STR, "target": _STR, "ref": _STR,
        "patch": _INT, "radius": _INT,
    }, ["schema_version", "out_dir", "target", "ref"]),
    "gen-pseudo": _obj({
        **_COMMON, **_PSEUDO_OPTS, "matcher": _STR, "dataset": _STR, "workers": _INT,
    }, ["schema_version", "out_dir", "matcher", "dataset"]),
    "run-bluref": _obj({
        **_COMMON, "matcher": _STR, "dataset": _STR, "use_gt_metrics": {"type": "boolean"},
        "bluref": dataclass_schema(bt.BlurRefConfig), "export_pairs": _STR,
    }, ["schema_version", "out_dir", "matcher", "dataset"]),
    "train-pairs": _obj({
        **_COMMON, "pairs": _STR, "model": dataclass_schema(bt.ModelConfig),
        "train": dataclass_schema(bt.PairTrainConfig),
    }, ["schema_version", "out_dir", "pairs"]),
    "eval": _obj({
        **_COMMON, "gt_dir": _STR, "pred_dir": _STR, "model": _STR, "dataset": _STR, "history": _STR,
    }, ["schema_version", "out_dir"]),
}


def load_config(path, command: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from exc
    try:
        jsonschema.validate(cfg, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(x) for x in exc.absolute_path) or "<root>"
        raise ConfigError(f"{p}: {where}: {exc.message}") from exc
    env_seed = os.environ.get("BLUREF_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"BLUREF_SEED must be an integer, got {env_seed!r}") from exc
    cfg.setdefault("seed", 0)
    return cfg


def _build(cls, data: dict | None, **override):
    try:
        return config_from_dict(cls, {**(data or {}), **override})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _jsonable(obj):
    if is_dataclass(obj):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_resolved(out_dir, command: str, cfg: dict, **resolved) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config": cfg, "resolved": _jsonable(resolved)}
    (out / "resolved_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True))


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _load_matcher(path):
    return dmod.load_matcher(_require(path, "matcher checkpoint"))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


# pure translations plus mild homographies, with foreign patches to train the confidence head
DEFAULT_MATCHER_WARPS = [{"kind": "homography", "corner_perturbation": 0.0, "occluders": 3},
                         {"kind": "homography", "occluders": 3}]


def _matcher_data(cfg: dict):
    data = cfg.get("data", {})
    size = tuple(data.get("texture_size", (128, 128)))
    warps = [_build(WarpConfig, w) for w in data.get("warps", DEFAULT_MATCHER_WARPS)]
    dcfg = _build(DegradationConfig, data.get("degradation"))
    return data.get("texture_count", 48), size, warps, dcfg


def cmd_gen_data(cfg: dict, args) -> int:
    out = Path(cfg["out_dir"])
    seed = cfg["seed"]
    data_seed, warp_seed = child_seeds(seed, 2)
    vcfg = _build(VideoConfig, cfg.get("video"))
    proto = {"delta": 2, "n_refs": 6, "window": 7, "scenes": 24, "frames_per_scene": 40, **cfg.get("protocol", {})}
    try:
        ds = assemble_toy_dataset(out / "dataset", vcfg, seed=data_seed, **proto)
    except ProtocolError as exc:
        raise DataError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    resolved = {"video": vcfg, "protocol": proto, "dataset_seed": data_seed}
    wp = cfg.get("warp_pairs")
    if wp and wp.get("count", 0) > 0:
        wcfg = _build(WarpConfig, wp.get("warp"))
        dcfg = _build(DegradationConfig, wp.get("degradation"))
        size = tuple(wp.get("texture_size", (128, 128)))
        pool = texture_pool(wp.get("texture_count", 16), size, warp_seed)
        stream = WarpPairStream(pool, [wcfg], dcfg, warp_seed)
        pairs = stream.take(wp["count"])
        write_warp_pairs(out / "warp_pairs", pairs, list(range(wp["count"])), wcfg, dcfg)
        resolved.update(warp=wcfg, degradation=dcfg, warp_seed=warp_seed)
    write_resolved(out, "gen-data", cfg, **resolved)
    print(f"wrote {len(ds.samples)} samples to {out / 'dataset'}")
    return EXIT_OK


def cmd_train_dm(cfg: dict, args) -> int:
    out = Path(cfg["out_dir"])
    seed = cfg["seed"]
    arch = {"widths": (16, 32, 48), "radii": (2, 3, 4), "decoder_width": 32, "conf_radius": 2, "presmooth": 1.0,
            **cfg.get("model", {})}
    train_seed, data_seed, held_seed = child_seeds(seed, 3)
    torch.manual_seed(train_seed)
    try:
        net = dmod.MatcherNet(**arch)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    if "resume" in cfg:
        meta = dmod.read_checkpoint_meta(_require(cfg["resume"], "resume checkpoint"))
        if meta.get("arch_hash") != net.arch_hash():
            raise ConfigError(f"refusing to resume from {cfg['resume']}: architecture hash "
                              f"{meta.get('arch_hash')} != configured {net.arch_hash()}")
        net = dmod.load_matcher(cfg["resume"], expect_hash=net.arch_hash())
    tcfg = _build(dmod.MatcherTrainConfig, cfg.get("train"))
    count, size, warps, dcfg = _matcher_data(cfg)
    held_cfg = {"count": 32, "seed": held_seed, **cfg.get("heldout", {})}
    stream = WarpPairStream(texture_pool(count, size, data_seed), warps, dcfg, data_seed)
    net, losses = dmod.train_matcher(stream, tcfg, seed=train_seed, net=net)
    held_warps = [replace(w, occluders=0) for w in warps if w.kind == "homography"] or warps
    held = WarpPairStream(texture_pool(16, size, held_cfg["seed"]), held_warps, dcfg,
                          held_cfg["seed"]).take(held_cfg["count"])
    epe = dmod.mean_epe(net, held)
    budget = float(cfg.get("epe_budget", 1.5))
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "matcher.safetensors"
    dmod.save_matcher(ckpt, net, {"train": dmod.matcher_config_dict(tcfg), "seed": seed, "heldout_epe": epe})
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows([i, f"{v:.8f}"] for i, v in enumerate(losses))
    _write_json(out / "metrics.json", {"heldout_epe": epe, "epe_budget": budget, "steps": tcfg.steps})
    write_resolved(out, "train-dm", cfg, model=arch, train=tcfg, warps=warps, degradation=dcfg,
                   heldout=held_cfg, epe_budget=budget, seeds={"train": train_seed, "data": data_seed})
    print(f"held-out EPE {epe:.4f} px (budget {budget})")
    if not np.isfinite(epe) or epe > budget:
        print(f"error: held-out EPE {epe:.4f} exceeds budget {budget}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_match(cfg: dict, args) -> int:
    out = Path(cfg["out_dir"])
    target = read_png(_require(cfg["target"], "target image"))
    ref = read_png(_require(cfg["ref"], "reference image"))
    if target.shape != ref.shape:
        raise DataError(f"target {target.shape} and reference {ref.shape} differ in shape")
    method = cfg.get("method", "net")
    if method == "brute":
        res = dmod.brute_force_match(target, ref, cfg.get("patch", 7), cfg.get("radius", 4))
    else:
        if "matcher" not in cfg:
            raise ConfigError("method 'net' requires 'matcher'")
        res = dmod.predict(_load_matcher(cfg["matcher"]), target, ref)
    write_png(out / "warped.png", warp_backward(ref, res.flow))
    write_png(out / "confidence.png", res.confidence)
    write_flow(out / "flow.bflw", res.flow)
    _write_json(out / "stats.json", {"mean_confidence": float(res.confidence.mean()),
                                     "mean_flow": [float(v) for v in res.flow.reshape(-1, 2).mean(0)]})
    write_resolved(out, "match", cfg, method=method)
    return EXIT_OK


def _pseudo_opts(cfg: dict) -> tuple[str, float, dict]:
    strategy = cfg.get("strategy", "prog")
    tau = float(cfg.get("tau", 0.7))
    if not 0 < tau < 1:
        raise ConfigError(f"tau must lie in (0, 1), got {tau}")
    opts = {}
    if strategy in ("avg", "prog"):
        opts["normalized"] = bool(cfg.get("normalized", False))
    if strategy == "prog":
        opts["blended_input"] = bool(cfg.get("blended_input", False))
    return strategy, tau, opts


def cmd_gen_pseudo(cfg: dict, args) -> int:
    out = Path(cfg["out_dir"])
    strategy, tau, opts = _pseudo_opts(cfg)
    matcher = _load_matcher(cfg["matcher"])
    ds = load_toy_dataset(_require(cfg["dataset"], "dataset"))
    per_sample = []
    for smp in ds.samples:
        pt = generate_pseudo(matcher, smp.blur, smp.refs, strategy, **opts)
        mask = binarize_mask(pt.conf, tau)
        write_png(out / "pseudo" / f"{smp.sample_id}.png", pt.image)
        write_png(out / "confidence" / f"{smp.sample_id}.png", pt.conf)
        write_mask_png(out / "mask" / f"{smp.sample_id}.png", mask)
        per_sample.append({"id": smp.sample_id, "mean_confidence": float(pt.conf.mean()),
                           "coverage": float(mask.mean())})
    stats = {"strategy": strategy, "tau": tau, "options": opts,
             "mean_confidence": float(np.mean([s["mean_confidence"] for s in per_sample])),
             "coverage": float(np.mean([s["coverage"] for s in per_sample])), "samples": per_sample}
    _write_json(out / "stats.json", stats)
    write_resolved(out, "gen-pseudo", cfg, strategy=strategy, tau=tau, options=opts)
    print(f"mean confidence {stats['mean_confidence']:.4f}, coverage {stats['coverage']:.4f}")
    return EXIT_OK


def cmd_run_bluref(cfg: dict, args) -> int:
    out = Path(cfg["out_dir"])
    override = {"seed": cfg["seed"]}
    if args.strategy is not None:
        override["strategy"] = args.strategy
    if args.tau is not None:
        override["tau"] = args.tau
    if args.workers is not None:
        override["workers"] = args.workers
    bcfg = _build(bt.BlurRefConfig, cfg.get("bluref"), **override)
    matcher = _load_matcher(cfg["matcher"])
    ds = load_toy_dataset(_require(cfg["dataset"], "dataset"))
    use_gt = cfg.get("use_gt_metrics", True) and all(g is not None for g in ds.gt)
    net, state = bt.run_bluref(ds.blur, ds.refs, ds.gt if use_gt else None, matcher, bcfg)
    ckpt = out / "deblur.safetensors"
    bt.save_deblur(ckpt, net, {"config": asdict(bcfg), "epochs": state.epochs_completed,
                               "history": state.history})
    bt.write_metrics_csv(out / "history.csv", state)
    _write_json(out / "history.json", {"history": state.history, "audit": state.audit})
    export = args.export_pairs or cfg.get("export_pairs")
    if export:
        ids = [s.sample_id for s in ds.samples]
        bt.export_pseudo_pairs(state, ds.blur, export, ids=ids)
        write_resolved(export, "run-bluref", cfg, bluref=bcfg, export_pairs=str(export))
    write_resolved(out, "run-bluref", cfg, bluref=bcfg, export_pairs=str(export) if export else None)
    last = state.history[-1]
    print("final epoch: " + ", ".join(f"{k}={v:.4f}" for k, v in last.items()
                                      if isinstance(v, float)))
    return EXIT_OK


def cmd_train_pairs(cfg: dict, args) -> int:
    out = Path(cfg["out_dir"])
    mcfg = _build(bt.ModelConfig, cfg.get("model"))
    tcfg = _build(bt.PairTrainConfig, cfg.get("train"), seed=cfg["seed"])
    try:
        net = bt.train_from_pairs(_require(cfg["pairs"], "pair directory"), mcfg, tcfg)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    bt.save_deblur(out / "deblur.safetensors", net, {"model": asdict(mcfg), "train": asdict(tcfg)})
    write_resolved(out, "train-pairs", cfg, model=mcfg, train=tcfg)
    return EXIT_OK


def _history_plot(history_csv, png) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs, vals = [], []
    with open(history_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            if row.get("masked_psnr_pseudo"):
                epochs.append(int(row["epoch"]))
                vals.append(float(row["masked_psnr_pseudo"]))
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=100)
    ax.plot(epochs, vals, marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("masked PSNR of pseudo targets (dB)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(png, metadata={"Software": None})
    plt.close(fig)


def cmd_eval(cfg: dict, args) -> int:
    out = Path(cfg["out_dir"])
    if "dataset" in cfg:
        root = _require(cfg["dataset"], "dataset")
        ds = load_toy_dataset(root)
        ids = [s.sample_id for s in ds.samples]
        gts = ds.gt
        if any(g is None for g in gts):
            raise DataError(f"{root}: dataset has no held-out gt")
        if "model" in cfg:
            net = bt.load_deblur(_require(cfg["model"], "deblur checkpoint"))
            preds = [bt.deblur(net, b) for b in ds.blur]
        elif "pred_dir" in cfg:
            preds = [read_png(_require(Path(cfg["pred_dir"]) / f"{i}.png", "prediction")) for i in ids]
        else:
            preds = ds.blur
    elif "gt_dir" in cfg and "pred_dir" in cfg:
        gt_dir = _require(cfg["gt_dir"], "gt directory")
        ids = sorted(p.stem for p in gt_dir.glob("*.png"))
        if not ids:
            raise DataError(f"{gt_dir}: no PNG images")
        gts = [read_png(gt_dir / f"{i}.png") for i in ids]
        preds = [read_png(_require(Path(cfg["pred_dir"]) / f"{i}.png", "prediction")) for i in ids]
    else:
        raise ConfigError("eval needs 'dataset' or both 'gt_dir' and 'pred_dir'")
    rows = []
    for i, p, g in zip(ids, preds, gts):
        if p.shape != g.shape:
            raise DataError(f"{i}: prediction {p.shape} vs gt {g.shape}")
        rows.append({"id": i, "psnr": psnr(p, g), "ssim": ssim(p, g)})
    summary = {"count": len(rows), "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
               "mean_ssim": float(np.mean([r["ssim"] for r in rows])), "images": rows}
    _write_json(out / "metrics.json", summary)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "psnr", "ssim"])
        w.writerows([r["id"], f"{r['psnr']:.6f}", f"{r['ssim']:.6f}"] for r in rows)
        w.writerow(["mean", f"{summary['mean_psnr']:.6f}", f"{summary['mean_ssim']:.6f}"])
    if "history" in cfg:
        _history_plot(_require(cfg["history"], "history CSV"), out / "masked_psnr.png")
    write_resolved(out, "eval", cfg)
    print(f"mean PSNR {summary['mean_psnr']:.4f} dB, mean SSIM {summary['mean_ssim']:.4f}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-dm": cmd_train_dm,
    "match": cmd_match,
    "gen-pseudo": cmd_gen_pseudo,
    "run-bluref": cmd_run_bluref,
    "train-pairs": cmd_train_pairs,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bluref", description="Reference-based unsupervised deblurring toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", help="override out_dir")
        if name == "run-bluref":
            p.add_argument("--strategy", choices=STRATEGIES, default=None)
            p.add_argument("--tau", type=float, default=None, help="mask threshold (default 0.7)")
            p.add_argument("--export-pairs", metavar="DIR", default=None)
            p.add_argument("--workers", type=int, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.command)
        if args.out:
            cfg["out_dir"] = args.out
        torch.set_num_threads(1)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except dmod.CheckpointError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except dmod.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ImageError, ProtocolError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
