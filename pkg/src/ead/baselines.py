"""Fast-gradient-method baselines.

FGM takes one step along the (normalized) cross-entropy gradient; I-FGM
iterates smaller steps with an epsilon-ball projection after each one.
Per-image grid search over epsilon reports the smallest grid value that
flips the prediction, mirroring the reference evaluation protocol.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn


class DegenerateGradientError(ValueError):
    """Gradient norm is zero, so an L1/L2 step direction is undefined."""


@dataclass
class GridSpec:
    norm: str
    eps_min: float
    eps_max: float
    eps_step: float

    def __post_init__(self):
        if self.norm not in ("l1", "l2", "linf"):
            raise ValueError(f"norm must be l1, l2 or linf, got {self.norm!r}")
        if not 0 < self.eps_min <= self.eps_max:
            raise ValueError("need 0 < eps_min <= eps_max")
        if self.eps_step <= 0:
            raise ValueError("eps_step must be positive")

    def values(self) -> np.ndarray:
        n = int(math.floor((self.eps_max - self.eps_min) / self.eps_step + 1e-9)) + 1
        return self.eps_min + np.arange(n) * self.eps_step


DEFAULT_GRIDS = {
    "linf": GridSpec("linf", 1e-3, 1.0, 1e-3),
    "l1": GridSpec("l1", 1.0, 1e3, 1.0),
    "l2": GridSpec("l2", 1e-2, 10.0, 1e-2),
}


def _gradients(net, xs, labels):
    """Rowwise d(cross-entropy)/dx at temperature 1."""
    _, g = nn.input_gradient_batch(net, nn.cross_entropy_objective(labels), xs)
    return g


def _row_norms(a, norm):
    """Per-example L1 or L2 norm over all non-batch axes, keepdims."""
    axes = tuple(range(1, a.ndim))
    if norm == "l1":
        return np.abs(a).sum(axis=axes, keepdims=True)
    return np.sqrt((a * a).sum(axis=axes, keepdims=True))


def _eps_col(epsilons, ndim):
    """Reshape a per-example epsilon vector to broadcast against examples."""
    return np.asarray(epsilons, dtype=np.float64).reshape(-1, *([1] * (ndim - 1)))


def _directions(grads, norm):
    """Unit step directions per example; raises when an L1/L2 norm vanishes."""
    if norm == "linf":
        return np.sign(grads)
    norms = _row_norms(grads, norm)
    if np.any(norms == 0.0):
        raise DegenerateGradientError(f"zero gradient, {norm} direction undefined")
    return grads / norms


def _project_ball(delta, norm, eps):
    if norm == "linf":
        return np.clip(delta, -eps, eps)
    norms = _row_norms(delta, norm)
    # radial scaling onto the ball; membership only, not Euclidean projection
    scale = np.where(norms > eps, eps / np.maximum(norms, 1e-300), 1.0)
    return delta * scale


def fgm(net, x0, t: int, epsilon: float, norm: str, targeted: bool = True):
    """One signed/normalized gradient step of size epsilon, boxed to [0,1].

    Targeted form descends the cross-entropy toward label t; untargeted
    ascends on the true label t.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    x0 = np.asarray(x0, dtype=np.float64)
    d = _directions(_gradients(net, x0[None, :], [t]), norm)[0]
    step = -epsilon * d if targeted else epsilon * d
    return np.clip(x0 + step, 0.0, 1.0)


def ifgm(net, x0, t: int, epsilon: float, norm: str, iters: int = 10,
         targeted: bool = True):
    """iters FGM steps of size epsilon/iters, each followed by an
    epsilon-ball projection around x0 and a box clip."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    x0 = np.asarray(x0, dtype=np.float64)
    return _ifgm_batch(net, x0[None, :], np.array([t]), np.array([epsilon]),
                       norm, iters, targeted)[0]


def _ifgm_batch(net, x0s, targets, epsilons, norm, iters, targeted):
    """Each example runs at its own epsilon; used to scan a grid in one pass."""
    x = x0s.copy()
    eps_col = _eps_col(epsilons, x0s.ndim)
    sign = -1.0 if targeted else 1.0
    for _ in range(iters):
        d = _directions(_gradients(net, x, targets), norm)
        x = x + sign * (eps_col / iters) * d
        x = x0s + _project_ball(x - x0s, norm, eps_col)
        x = np.clip(x, 0.0, 1.0)
    return x


def grid_search(attack_fn, net, x0, t: int, grid: GridSpec, targeted: bool = True):
    """Smallest grid epsilon whose attack flips the model to (or off) t.

    attack_fn(net, x0, t, epsilon) -> x_adv. Returns (epsilon, x_adv) or
    None when every probe fails or the gradient is degenerate.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    for eps in grid.values():
        try:
            x_adv = attack_fn(net, x0, t, float(eps))
        except DegenerateGradientError:
            return None
        pred = int(np.argmax(nn.forward(net, x_adv)))
        if (pred == t) if targeted else (pred != t):
            return float(eps), x_adv
    return None


# ---------------------------------------------------------------------------
# fast whole-grid drivers
#
# Same results as grid_search over fgm/ifgm, but batched: FGM needs one
# gradient for every epsilon, I-FGM scans the grid in ascending chunks so
# typical images finish after a few hundred forward passes instead of 10k.


def fgm_grid_attack(net, x0, t: int, grid: GridSpec, targeted: bool = True):
    x0 = np.asarray(x0, dtype=np.float64)
    try:
        d = _directions(_gradients(net, x0[None], [t]), grid.norm)[0]
    except DegenerateGradientError:
        return None
    eps = grid.values()
    sign = -1.0 if targeted else 1.0
    xs = np.clip(x0[None] + sign * _eps_col(eps, x0.ndim + 1) * d[None], 0.0, 1.0)
    preds = np.argmax(nn.forward(net, xs), axis=1)
    hits = np.flatnonzero(preds == t if targeted else preds != t)
    if hits.size == 0:
        return None
    first = int(hits[0])
    return float(eps[first]), xs[first]


def ifgm_grid_attack(net, x0, t: int, grid: GridSpec, iters: int = 10,
                     targeted: bool = True, chunk: int = 100):
    x0 = np.asarray(x0, dtype=np.float64)
    eps = grid.values()
    for start in range(0, eps.size, chunk):
        block = eps[start : start + chunk]
        x0s = np.broadcast_to(x0, (block.size, *x0.shape)).copy()
        targets = np.full(block.size, t)
        try:
            xs = _ifgm_batch(net, x0s, targets, block, grid.norm, iters, targeted)
        except DegenerateGradientError:
            return None
        preds = np.argmax(nn.forward(net, xs), axis=1)
        hits = np.flatnonzero(preds == t if targeted else preds != t)
        if hits.size:
            first = int(hits[0])
            return float(block[first]), xs[first]
    return None
