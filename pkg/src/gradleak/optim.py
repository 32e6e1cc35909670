"""Inner-loop optimizers for gradient matching: Adam and L-BFGS.

Both operate on flat float64 vectors; the attack code owns the mapping
between the vector and its dummy tensors.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    skipped: int = 0  # non-finite gradients seen


def adam_step(state, x, g):
    """One bias-corrected Adam update. Returns the updated vector.

    A non-finite gradient skips the step (flagged via ``state.skipped``).
    """
    if state.lr <= 0:
        raise ValueError("adam lr must be positive")
    if state.m is None:
        state.m = np.zeros_like(x)
        state.v = np.zeros_like(x)
    if x.shape != g.shape or x.shape != state.m.shape:
        raise ValueError(f"adam: shapes {x.shape}, {g.shape}, {state.m.shape}")
    if not np.all(np.isfinite(g)):
        state.skipped += 1
        return x
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    mhat = state.m / (1 - state.beta1**state.t)
    vhat = state.v / (1 - state.beta2**state.t)
    return x - state.lr * mhat / (np.sqrt(vhat) + state.eps)


@dataclass
class LBFGSState:
    lr: float = 1.0
    history_size: int = 100
    c1: float = 1e-4
    c2: float = 0.9
    max_evals: int = 20
    history: deque = field(default_factory=deque)  # (s, y) pairs
    prev_x: np.ndarray | None = None
    prev_g: np.ndarray | None = None
    prev_f: float | None = None
    no_progress: bool = False


def halve_lr(state):
    if state.lr <= 0:
        raise ValueError("lr must be positive")
    state.lr *= 0.5
    return state


def _direction(state, g):
    """Two-loop recursion over stored curvature pairs."""
    q = -g
    if not state.history:
        return q
    alphas = []
    for s, y in reversed(state.history):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((a, rho, s, y))
        q = q - a * y
    s, y = state.history[-1]
    q = q * ((s @ y) / (y @ y))
    for a, rho, s, y in reversed(alphas):
        b = rho * (y @ q)
        q = q + s * (a - b)
    return q


def _strong_wolfe(closure, x, f0, g0, d, c1, c2, max_evals, alpha0):
    """Line search enforcing the strong Wolfe conditions.

    Returns (alpha, f, g, evals) or (None, ...) when no acceptable step was
    found within the evaluation budget.
    """
    dg0 = g0 @ d
    evals = 0

    def phi(a):
        nonlocal evals
        evals += 1
        f, g = closure(x + a * d)
        return f, g, g @ d

    a_prev, f_prev, dg_prev = 0.0, f0, dg0
    a = alpha0
    af = ag = None
    bracket = None
    while evals < max_evals:
        f, g, dg = phi(a)
        if not np.isfinite(f):
            a = 0.5 * (a_prev + a)
            continue
        if f > f0 + c1 * a * dg0 or (evals > 1 and f >= f_prev):
            bracket = (a_prev, f_prev, dg_prev, a, f, dg)
            break
        if abs(dg) <= -c2 * dg0:
            return a, f, g, evals
        if dg >= 0:
            bracket = (a, f, dg, a_prev, f_prev, dg_prev)
            break
        a_prev, f_prev, dg_prev = a, f, dg
        a = min(2.0 * a, 1e6)
    if bracket is None:
        return None, None, None, evals

    lo, flo, dglo, hi, fhi, dghi = bracket
    best = None
    while evals < max_evals:
        # cubic interpolation with a bisection safeguard
        span = hi - lo
        if abs(span) < 1e-16:
            break
        d1 = dglo + dghi - 3 * (flo - fhi) / (lo - hi)
        sq = d1 * d1 - dglo * dghi
        if sq >= 0:
            d2 = np.sign(span) * np.sqrt(sq)
            a = hi - (hi - lo) * (dghi + d2 - d1) / (dghi - dglo + 2 * d2)
            if not np.isfinite(a) or a <= min(lo, hi) or a >= max(lo, hi):
                a = lo + 0.5 * span
        else:
            a = lo + 0.5 * span
        f, g, dg = phi(a)
        if f > f0 + c1 * a * dg0 or f >= flo:
            hi, fhi, dghi = a, f, dg
        else:
            if abs(dg) <= -c2 * dg0:
                return a, f, g, evals
            if dg * span < 0:
                hi, fhi, dghi = lo, flo, dglo
            lo, flo, dglo = a, f, dg
            best = (a, f, g)
    if best is not None:
        return best[0], best[1], best[2], evals
    return None, None, None, evals


def lbfgs_step(state, x, closure):
    """One L-BFGS step: quasi-Newton iterations until the per-step budget of
    ``max_evals`` closure evaluations is spent. Returns (new x, loss).

    ``closure(x) -> (loss, grad)`` must be deterministic within the step.
    Sets ``state.no_progress`` when no decreasing step exists within the
    evaluation budget (including the steepest-descent fallback).
    """
    budget = [state.max_evals]

    def counted(v):
        budget[0] -= 1
        return closure(v)

    x, f = _lbfgs_iterate(state, x, counted, budget)
    progressed = not state.no_progress
    while budget[0] > 0 and not state.no_progress:
        x, f = _lbfgs_iterate(state, x, counted, budget)
        progressed = progressed or not state.no_progress
    # the step stalled only if no inner iteration decreased the loss
    state.no_progress = not progressed
    return x, f


def _lbfgs_iterate(state, x, closure, budget):
    state.no_progress = False
    if (
        state.prev_x is not None
        and state.prev_x.shape == x.shape
        and np.array_equal(state.prev_x, x)
        and state.prev_g is not None
    ):
        f0, g0 = state.prev_f, state.prev_g
    else:
        f0, g0 = closure(x)
        state.history.clear()
    gnorm = np.linalg.norm(g0)
    if gnorm == 0 or not np.isfinite(gnorm):
        state.no_progress = True
        state.prev_x, state.prev_f, state.prev_g = x, f0, g0
        return x, f0

    d = _direction(state, g0)
    if d @ g0 >= 0:  # not a descent direction; drop stale curvature
        state.history.clear()
        d = -g0
    alpha0 = state.lr if state.history else min(state.lr, state.lr / gnorm)
    a, f, g, evals = _strong_wolfe(
        closure, x, f0, g0, d, state.c1, state.c2, max(budget[0], 1), alpha0
    )
    if a is None:
        # steepest descent with plain backtracking
        d = -g0
        a = state.lr / max(gnorm, 1.0)
        for _ in range(max(budget[0], 4)):
            f, g = closure(x + a * d)
            if np.isfinite(f) and f < f0 + state.c1 * a * (g0 @ d):
                break
            a *= 0.5
        else:
            state.no_progress = True
            state.prev_x, state.prev_f, state.prev_g = x, f0, g0
            return x, f0

    x_new = x + a * d
    s = x_new - x
    y = g - g0
    if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
        state.history.append((s, y))
        while len(state.history) > state.history_size:
            state.history.popleft()
    state.prev_x, state.prev_f, state.prev_g = x_new, f, g
    return x_new, f
