"""Train the dense matcher on synthetic warp pairs and report held-out EPE."""
import argparse
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import torch

from bluref.densematch import MatcherNet, MatcherTrainConfig, mean_epe, save_matcher, train_matcher
from bluref.synthgen import DegradationConfig, WarpConfig, WarpPairStream, texture_pool


@dataclass
class Experiment:
    out: str = "runs/matcher.safetensors"
    steps: int = 2000
    batch_size: int = 4
    max_translation: float = 4.0
    occluders: int = 3
    textures: int = 48
    texture_size: tuple[int, int] = (128, 128)
    heldout: int = 64
    seed: int = 0
    train: MatcherTrainConfig = field(default_factory=MatcherTrainConfig)


def warp_kinds(max_translation: float, occluders: int) -> list[WarpConfig]:
    # zero corner perturbation gives pure translations
    return [WarpConfig(kind="homography", corner_perturbation=0.0, max_translation=max_translation,
                       occluders=occluders),
            WarpConfig(kind="homography", max_translation=max_translation, occluders=occluders)]


def run(exp: Experiment) -> dict:
    torch.set_num_threads(1)
    warps = warp_kinds(exp.max_translation, exp.occluders)
    stream = WarpPairStream(texture_pool(exp.textures, exp.texture_size, exp.seed + 1), warps,
                            DegradationConfig(), exp.seed)
    held = WarpPairStream(texture_pool(16, exp.texture_size, exp.seed + 99), warp_kinds(exp.max_translation, 0),
                          DegradationConfig(), exp.seed + 7).take(exp.heldout)
    cfg = MatcherTrainConfig(**{**asdict(exp.train), "steps": exp.steps, "batch_size": exp.batch_size})
    epe0 = mean_epe(MatcherNet(), held)
    t0 = time.time()
    net, _ = train_matcher(stream, cfg, seed=exp.seed)
    result = {"epe_init": epe0, "epe": mean_epe(net, held), "seconds": time.time() - t0}
    save_matcher(exp.out, net)
    return result


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=Experiment.out)
    ap.add_argument("--steps", type=int, default=Experiment.steps)
    ap.add_argument("--seed", type=int, default=Experiment.seed)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    print(json.dumps(run(Experiment(out=args.out, steps=args.steps, seed=args.seed)), indent=2))
