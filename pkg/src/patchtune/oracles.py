"""Reference implementations used to check the fast paths.

Finite-difference gradients, exhaustive assignment and direct loss formulas.
They are deliberately slow and simple.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

FD_STEP = 1e-5
GRAD_RTOL = 1e-4
# Elements smaller than GRAD_FLOOR * max(1, |f|) are compared absolutely. Central
# differences carry round-off of order eps * |f| / h (about 2e-11 |f| at h = 1e-5),
# so an exactly-zero gradient must not be judged relative to itself.
GRAD_FLOOR = 1e-6


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x``, perturbed in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / den).max())


def gradcheck(build: Callable[[list[Tensor]], Tensor], arrays: Sequence[np.ndarray],
              h: float = FD_STEP) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``build`` maps leaf tensors (one per array, all requiring grad) to a scalar.
    """
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = build(leaves)
    T.backward(out)
    floor = GRAD_FLOOR * max(1.0, abs(float(out.data)))
    worst = 0.0
    for leaf in leaves:
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad

        def value():
            with T.no_grad():
                return float(build(leaves).data)

        worst = max(worst, relative_error(analytic, numeric_grad(value, leaf.data, h), floor))
    return worst


def module_gradcheck(params: Sequence[Tensor], loss: Callable[[], Tensor],
                     h: float = FD_STEP) -> float:
    """Same as :func:`gradcheck` but over existing parameter tensors."""
    for p in params:
        p.grad = None
    out = loss()
    T.backward(out)
    floor = GRAD_FLOOR * max(1.0, abs(float(out.data)))
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    def value():
        with T.no_grad():
            return float(loss().data)

    return max(relative_error(g, numeric_grad(value, p.data, h), floor) for p, g in zip(params, grads))


def brute_force_assignment(cost: np.ndarray) -> tuple[tuple[int, ...], float]:
    """Cheapest permutation by enumeration; first in lexicographic order wins ties."""
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(n)):
        total = 0.0
        for r, s in enumerate(perm):
            total += cost[r, s]
        if total < best_cost:
            best, best_cost = perm, total
    return best, float(best_cost)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def supcon_direct(q: np.ndarray, positives, negatives, tau: float) -> float:
    """Image-level contrastive loss with a negatives-only denominator, term by term."""
    den = sum(np.exp(q @ k / tau) for k in negatives)
    return float(-np.mean([np.log(np.exp(q @ k / tau) / den) for k in positives]))


def rare_direct(query: np.ndarray, positives, negatives, tau: float) -> float:
    """Rare-patch loss with brute-force matching and the formula written out."""
    q = _unit(np.asarray(query, dtype=np.float64))

    def crit(block):
        k = _unit(np.asarray(block, dtype=np.float64))
        cost = np.sqrt(((q[:, None, :] - k[None, :, :]) ** 2).sum(-1))
        mapping, _ = brute_force_assignment(cost)
        return np.exp((q * k[list(mapping)]).sum(-1) / tau)

    den = sum(crit(b) for b in negatives)
    return float(-np.mean([np.mean(np.log(crit(b) / den)) for b in positives]))


def kl_direct(mu: np.ndarray, sigma: np.ndarray) -> float:
    mu, sigma = np.asarray(mu, dtype=np.float64), np.asarray(sigma, dtype=np.float64)
    return float(0.5 * np.sum(mu ** 2 + sigma ** 2 - np.log(sigma ** 2) - 1.0))
