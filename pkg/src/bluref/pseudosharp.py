"""Pseudo-sharp target generation from unpaired sharp references.

A dense matcher ``dm(target, ref) -> (trans, conf)`` warps each reference onto
the geometry of the current (blurry or partially deblurred) image.  The
per-reference results are merged by one of three strategies:

``avg``
    match every reference independently against the input, then
    ``I = mean_n(I_n * M_n)`` and ``M = mean_n(M_n)``.
``seq``
    chain the matches; step ``n`` sees ``I_{n-1} * M_{n-1} + blur * (1 - M_{n-1})``
    and the last step's output is kept.
``prog``
    step ``n`` sees ``blur * (1 - M_{n-1})`` and the outputs are averaged as in
    ``avg``.  ``blended_input=True`` feeds the ``seq``-style blend instead.

Both chained strategies start from ``M_0 = 0``, so the first match always sees
the unmodified input.  Confidence stays continuous inside the aggregation;
only the loss mask is binarised.
"""
from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .imgcore import ImageError, as_image

STRATEGIES = ("avg", "seq", "prog")

DenseMatch = Callable[[np.ndarray, np.ndarray], "tuple[np.ndarray, np.ndarray]"]


@dataclass
class ReferenceSet:
    refs: list[np.ndarray]
    indices: list[int] | None = None

    def __post_init__(self):
        if not self.refs:
            raise ValueError("ReferenceSet: needs at least one reference")
        self.refs = [as_image(r, "ref") for r in self.refs]
        shape = self.refs[0].shape
        if any(r.shape != shape for r in self.refs):
            raise ImageError("ReferenceSet: references differ in shape")

    def __len__(self) -> int:
        return len(self.refs)

    def __iter__(self):
        return iter(self.refs)


@dataclass
class PseudoTarget:
    image: np.ndarray
    conf: np.ndarray
    strategy: str
    extras: dict = field(default_factory=dict)


def _as_refs(refs) -> ReferenceSet:
    return refs if isinstance(refs, ReferenceSet) else ReferenceSet(list(refs))


def as_dense_match(matcher) -> DenseMatch:
    """Accept a trained ``MatcherNet`` or any ``(target, ref) -> (trans, conf)`` callable."""
    from .densematch import MatcherNet, dm_apply

    if isinstance(matcher, MatcherNet):
        return partial(dm_apply, matcher)
    if callable(matcher):
        return matcher
    raise TypeError(f"not a dense matcher: {type(matcher).__name__}")


def _call(dm: DenseMatch, target: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    trans, conf = as_dense_match(dm)(target, ref)
    trans = as_image(trans, "trans")
    conf = np.asarray(conf, dtype=np.float64)
    if trans.shape != target.shape or conf.shape != target.shape[:2]:
        raise ImageError(f"dense match returned {trans.shape}/{conf.shape} for input {target.shape}")
    return trans, conf


def aggregate_weighted_average(results: Sequence[tuple[np.ndarray, np.ndarray]],
                               normalized: bool = False, eps: float = 1e-6):
    """``(mean(I_n * M_n), mean(M_n))``; ``normalized`` divides by ``max(sum M_n, eps)`` instead."""
    if not results:
        raise ValueError("aggregate_weighted_average: no results")
    images = [as_image(i, "image") for i, _ in results]
    masks = [np.asarray(m, dtype=np.float64) for _, m in results]
    shape = images[0].shape
    for img, m in zip(images, masks):
        if img.shape != shape or m.shape != shape[:2]:
            raise ImageError("aggregate_weighted_average: inconsistent dims")
    n = len(images)
    weighted = sum(img * m[..., None] for img, m in zip(images, masks))
    msum = sum(masks)
    if normalized:
        image = weighted / np.maximum(msum, eps)[..., None]
    else:
        image = weighted / n
    return np.clip(image, 0.0, 1.0), np.clip(msum / n, 0.0, 1.0)


def weighted_average(dm: DenseMatch, current, refs, normalized: bool = False):
    current = as_image(current, "current")
    results = [_call(dm, current, ref) for ref in _as_refs(refs)]
    return aggregate_weighted_average(results, normalized=normalized)


def aggregate_sequential(dm: DenseMatch, blur, refs):
    blur = as_image(blur, "blur")
    image = np.zeros_like(blur)
    mask = np.zeros(blur.shape[:2])
    for ref in _as_refs(refs):
        m = mask[..., None]
        inp = image * m + blur * (1.0 - m)
        image, mask = _call(dm, inp, ref)
    return np.clip(image, 0.0, 1.0), np.clip(mask, 0.0, 1.0)


def aggregate_progressive(dm: DenseMatch, blur, refs, blended_input: bool = False,
                          normalized: bool = False, eps: float = 1e-6):
    blur = as_image(blur, "blur")
    refs = _as_refs(refs)
    image = np.zeros_like(blur)
    mask = np.zeros(blur.shape[:2])
    acc_img = np.zeros_like(blur)
    acc_mask = np.zeros(blur.shape[:2])
    for ref in refs:
        m = mask[..., None]
        inp = image * m + blur * (1.0 - m) if blended_input else blur * (1.0 - m)
        image, mask = _call(dm, inp, ref)
        acc_img += mask[..., None] * image
        acc_mask += mask
    n = len(refs)
    if normalized:
        out = acc_img / np.maximum(acc_mask, eps)[..., None]
    else:
        out = acc_img / n
    return np.clip(out, 0.0, 1.0), np.clip(acc_mask / n, 0.0, 1.0)


def binarize_mask(conf, tau: float = 0.7) -> np.ndarray:
    """1 where ``conf >= tau``, else 0."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"binarize_mask: tau must lie in (0, 1), got {tau}")
    return (np.asarray(conf, dtype=np.float64) >= tau).astype(np.float64)


def generate_pseudo(matcher, current, refs, strategy: str = "prog", **options) -> PseudoTarget:
    """Dispatch to one aggregation strategy.

    ``options`` are forwarded: ``normalized`` for ``avg``/``prog`` and
    ``blended_input`` for ``prog``.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    refs = _as_refs(refs)
    current = as_image(current, "current")
    if refs.refs[0].shape != current.shape:
        raise ImageError(f"generate_pseudo: refs {refs.refs[0].shape} vs input {current.shape}")
    dm = as_dense_match(matcher)
    if strategy == "avg":
        image, conf = weighted_average(dm, current, refs, **options)
    elif strategy == "seq":
        if options:
            raise TypeError(f"seq takes no options, got {sorted(options)}")
        image, conf = aggregate_sequential(dm, current, refs)
    else:
        image, conf = aggregate_progressive(dm, current, refs, **options)
    return PseudoTarget(image=image, conf=conf, strategy=strategy, extras=dict(options))
