"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, index: tuple, eps: float = 1e-6) -> float:
    """d fn() / d param[index] by central differences; ``param`` is restored."""
    original = param.data[index].copy()
    with no_grad():
        param.data[index] = original + eps
        plus = float(fn().data)
        param.data[index] = original - eps
        minus = float(fn().data)
    param.data[index] = original
    return (plus - minus) / (2 * eps)


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest ``|analytic - numeric| / max(1, |numeric|)`` over the checked entries.

    ``fn`` must rebuild the scalar from ``params`` on every call. With
    ``max_entries`` set, that many entries are sampled uniformly over all
    parameters instead of checking every element.
    """
    for p in params:
        p.grad = None
    fn().backward()
    entries = [(p, idx) for p in params for idx in np.ndindex(p.shape)]
    if max_entries is not None and max_entries < len(entries):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[i] for i in pick]
    worst = 0.0
    for p, idx in entries:
        analytic = 0.0 if p.grad is None else float(p.grad[idx])
        numeric = numeric_grad(fn, p, idx, eps)
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
    return worst
