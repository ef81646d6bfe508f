"""Central-difference gradient checking for tape-computed gradients."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import NumericError, Tensor, precision


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` rebuilds a scalar from ``params`` on each call.  The tape pass runs
    at the current storage precision; the finite differences are evaluated
    with float64 storage so the oracle itself is not limited by float32
    rounding.  Relative error is ``|a - b| / max(|a|, |b|, 1e-6)``.

    ``max_entries`` caps how many elements of each parameter are probed
    (chosen at random with ``seed``); every parameter tensor is still checked.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-5, 1e-2], got {eps}")
    for p in params:
        p.grad = None
    out = f()
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = [
        np.zeros(p.shape) if p.grad is None else np.array(p.grad, dtype=np.float64) for p in params
    ]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        original = p.data
        base = original.astype(np.float64)
        entries = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            entries = np.sort(rng.choice(base.size, size=max_entries, replace=False))
        try:
            with precision(np.float64):
                for j in entries:
                    probe = base.copy().ravel()
                    probe[j] += eps
                    p.data = probe.reshape(base.shape)
                    fp = float(f().data)
                    probe[j] -= 2 * eps
                    p.data = probe.reshape(base.shape)
                    fm = float(f().data)
                    numeric = (fp - fm) / (2 * eps)
                    a = float(ga.ravel()[j])
                    if not (np.isfinite(numeric) and np.isfinite(a)):
                        raise NumericError("non-finite value during gradient check")
                    err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                    worst = max(worst, err)
        finally:
            p.data = original
    return worst
