"""Progressive guided reconstruction loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import DimensionError, Tensor, avg_pool2d_array, reduce_sum
from .network import N_BLOCKS, PyramidOutput


@dataclass(frozen=True)
class GuidanceSchedule:
    """Per-level weights alpha_0..alpha_{n-1} for the pyramid loss.

    ``literal`` gives 2**(n-1-i); ``toward_output`` gives 2**(i-(n-1)).
    Levels below ``zero_below`` always get weight 0. Explicit ``alphas``
    override the formula.
    """

    n: int = N_BLOCKS
    direction: str = "toward_output"
    zero_below: int = 3
    alphas: tuple[float, ...] | None = None
    normalize: bool = True

    def __post_init__(self):
        if self.direction not in ("literal", "toward_output"):
            raise ValueError(f"direction must be 'literal' or 'toward_output', got {self.direction!r}")
        if self.alphas is None:
            if self.direction == "literal":
                alphas = [2.0 ** (self.n - 1 - i) for i in range(self.n)]
            else:
                alphas = [2.0 ** (i - (self.n - 1)) for i in range(self.n)]
            alphas = [0.0 if i < self.zero_below else a for i, a in enumerate(alphas)]
        else:
            alphas = [float(a) for a in self.alphas]
            if len(alphas) != self.n:
                raise ValueError(f"expected {self.n} alphas, got {len(alphas)}")
            if any(a != 0 for a in alphas[: self.zero_below]):
                raise ValueError(f"alphas below level {self.zero_below} must be zero")
        if any(a < 0 for a in alphas):
            raise ValueError("alphas must be non-negative")
        if not any(a > 0 for a in alphas):
            raise ValueError("at least one alpha must be positive")
        object.__setattr__(self, "alphas", tuple(alphas))

    @classmethod
    def final_only(cls, n: int = N_BLOCKS) -> "GuidanceSchedule":
        return cls(n=n, alphas=tuple([0.0] * (n - 1) + [1.0]))

    def is_formula(self) -> bool:
        """True when the weights are exactly what direction/zero_below produce."""
        return GuidanceSchedule(self.n, self.direction, self.zero_below).alphas == self.alphas

    def scaled(self, factor: float) -> "GuidanceSchedule":
        return GuidanceSchedule(self.n, self.direction, self.zero_below, tuple(a * factor for a in self.alphas), self.normalize)


@dataclass
class ScaledLabelSet:
    levels: dict[int, np.ndarray] = field(default_factory=dict)


def sse_loss(pred: Tensor, target, normalize: bool = True) -> Tensor:
    """Sum of squared errors, divided by the element count when ``normalize``."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"sse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - Tensor(target.astype(pred.dtype, copy=False))
    total = reduce_sum(diff * diff)
    if normalize:
        total = total * (1.0 / pred.size)
    return total


def scale_labels(gt, sizes: Mapping[int, tuple[int, int]] | Sequence[tuple[int, int]]) -> ScaledLabelSet:
    """Average-pool ``gt[..., H, W]`` in H and W to each requested size.

    ``sizes`` maps level index to (Hi, Wi); a plain sequence is keyed by
    position. Leading axes (batch, depth) are never pooled.
    """
    gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if not isinstance(sizes, Mapping):
        sizes = dict(enumerate(sizes))
    h, w = gt.shape[-2:]
    out = {}
    for level, (hi, wi) in sizes.items():
        if h % hi or w % wi or h // hi != w // wi:
            raise DimensionError(f"level {level}: ({hi},{wi}) does not divide ({h},{w}) by a common factor")
        ratio = h // hi
        if ratio & (ratio - 1):
            raise DimensionError(f"level {level}: scale ratio {ratio} is not a power of two")
        arr = gt
        while arr.shape[-1] != wi:
            arr = avg_pool2d_array(arr, 2)
        out[level] = arr
    return ScaledLabelSet(out)


def level_losses(
    pyramid: PyramidOutput, labels: ScaledLabelSet, schedule: GuidanceSchedule
) -> dict[int, Tensor]:
    """Unweighted per-level losses L_i for every level with alpha_i > 0."""
    depth = pyramid.final.shape[1]
    terms = {}
    for i, alpha in enumerate(schedule.alphas):
        if alpha == 0 or i not in pyramid.levels:
            continue
        pred = pyramid.levels[i]
        if pred.shape[1] != depth:
            raise DimensionError(
                f"guidance on level {i} is undefined: it has {pred.shape[1]} channels, depth is {depth}"
            )
        if i not in labels.levels:
            raise DimensionError(f"no scaled label for level {i}")
        terms[i] = sse_loss(pred, labels.levels[i], schedule.normalize)
    return terms


def combine(terms: Mapping[int, Tensor], schedule: GuidanceSchedule) -> Tensor:
    total = None
    for i in sorted(terms):
        weighted = terms[i] * schedule.alphas[i]
        total = weighted if total is None else total + weighted
    if total is None:
        raise ValueError("no guided level is present in the pyramid output")
    return total


def progressive_loss(pyramid: PyramidOutput, labels: ScaledLabelSet, schedule: GuidanceSchedule) -> Tensor:
    """sum_i alpha_i * L_i over the levels the pyramid emits."""
    return combine(level_losses(pyramid, labels, schedule), schedule)
