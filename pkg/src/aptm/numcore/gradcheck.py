"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, no_grad


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, idx, h: float = 1e-4) -> float:
    orig = t.data[idx]
    with no_grad():
        t.data[idx] = orig + h
        up = fn().item()
        t.data[idx] = orig - h
        down = fn().item()
    t.data[idx] = orig
    return (up - down) / (2 * h)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-4,
                    max_entries: int | None = None, rng: np.random.Generator | None = None
                    ) -> list[float]:
    """Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||) per tensor.

    ``fn`` must rebuild the graph from the current ``.data`` of ``tensors``.
    With ``max_entries`` set, a random subset of each tensor's entries is probed.
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    errors = []
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = list(np.ndindex(t.shape)) if t.ndim else [()]
        if max_entries is not None and len(flat) > max_entries:
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(flat), size=max_entries, replace=False)
            flat = [flat[i] for i in sorted(pick)]
        a = np.array([analytic[i] for i in flat], dtype=np.float64)
        n = np.array([numeric_grad(fn, t, i, h) for i in flat], dtype=np.float64)
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        errors.append(0.0 if scale < 1e-12 else float(np.linalg.norm(a - n) / scale))
    return errors
