from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .rng import stream
from .tensor import Tape, Tensor, get_dtype


def tape_gradients(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of ``loss_fn()`` for every parameter; unreached ones come back as exact zeros."""
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for name, p in params.items()
    }


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    probes: int = 32,
    fd_step: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative gap between tape gradients and central differences.

    ``probes`` scalar entries are drawn uniformly over all parameter elements.
    The relative gap is ``|g - fd| / max(|g|, |fd|, floor)``.
    """
    if get_dtype() is not np.float64 or any(p.dtype != np.float64 for p in params.values()):
        raise RuntimeError("grad_check requires 64-bit mode and 64-bit parameters")
    grads = tape_gradients(loss_fn, params)
    names = list(params)
    sizes = np.array([params[n].size for n in names])
    rng = stream(seed, "grad_check")
    flat = rng.choice(int(sizes.sum()), size=min(probes, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for f in np.sort(flat):
        which = int(np.searchsorted(offsets, f, side="right") - 1)
        name = names[which]
        idx = np.unravel_index(int(f - offsets[which]), params[name].shape)
        arr = params[name].data
        orig = arr[idx]
        arr[idx] = orig + fd_step
        up = loss_fn().item()
        arr[idx] = orig - fd_step
        down = loss_fn().item()
        arr[idx] = orig
        fd = (up - down) / (2.0 * fd_step)
        g = float(grads[name][idx])
        worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), floor))
    return worst
