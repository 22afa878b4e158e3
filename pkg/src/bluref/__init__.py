"""Unsupervised deblurring from unpaired sharp references via dense matching."""
from .blureftrain import BlurRefConfig, DeblurNet, deblur, masked_loss, run_bluref
from .datasetproto import ProtocolConfig, assemble_toy_dataset, build_reference_sets
from .densematch import MatcherNet, brute_force_match, dm_apply, train_matcher
from .imgcore import psnr, ssim, warp_backward
from .pseudosharp import ReferenceSet, generate_pseudo

__version__ = "0.1.0"
