"""Limited-memory quasi-Newton minimization with Armijo backtracking.

Full-batch mode guarantees a non-increasing sequence of accepted costs. With
minibatch_count > 1, per-batch cost terms are kept as anchored first-order
surrogates (exact for the batch refreshed this iteration, linearized at their
last anchor for the rest) and the aggregate drives the quasi-Newton step; at a
fixed point all anchors coincide and the aggregate gradient is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MAX_HALVINGS = 60


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-6
    history_size: int = 20
    minibatch_count: int = 1
    seed: int = 0
    armijo_c1: float = 1e-4
    backtrack_factor: float = 0.5

    def __post_init__(self):
        if self.gradient_tolerance <= 0:
            raise ValueError("gradient_tolerance must be positive")
        if self.history_size < 1:
            raise ValueError("history_size must be >= 1")
        if self.minibatch_count < 1:
            raise ValueError("minibatch_count must be >= 1")


@dataclass
class TraceRow:
    iteration: int
    total: float
    nll: float
    reg: float
    grad_norm: float
    step: float


@dataclass
class OptTrace:
    rows: list[TraceRow] = field(default_factory=list)
    converged: bool = False
    line_search_failed: bool = False

    def append(self, **kwargs) -> None:
        self.rows.append(TraceRow(**kwargs))

    @property
    def totals(self) -> list[float]:
        return [r.total for r in self.rows]

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "total", "nll", "reg", "grad_norm", "step"])
            for r in self.rows:
                writer.writerow(
                    [r.iteration, repr(r.total), repr(r.nll), repr(r.reg),
                     repr(r.grad_norm), repr(r.step)]
                )


def _evaluate(cost_fn: Callable, x: np.ndarray):
    """Normalize cost_fn output to (total, gradient, nll, reg)."""
    out = cost_fn(x)
    if isinstance(out, tuple):
        total, gradient = out
        return float(total), np.asarray(gradient, dtype=np.float64), float(total), 0.0
    return (
        float(out.total),
        np.asarray(out.gradient, dtype=np.float64),
        float(out.nll),
        float(out.reg),
    )


class _LbfgsMemory:
    """Two-loop recursion over the most recent curvature pairs."""

    def __init__(self, size: int):
        self.size = size
        self.s: list[np.ndarray] = []
        self.y: list[np.ndarray] = []
        self.rho: list[float] = []

    def update(self, s: np.ndarray, y: np.ndarray) -> None:
        sy = float(s @ y)
        if sy <= 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            # Armijo-only steps can produce negative-curvature pairs; keeping
            # the stale memory then freezes the direction scale, so drop it
            self.s.clear()
            self.y.clear()
            self.rho.clear()
            return
        self.s.append(s)
        self.y.append(y)
        self.rho.append(1.0 / sy)
        if len(self.s) > self.size:
            self.s.pop(0)
            self.y.pop(0)
            self.rho.pop(0)

    def direction(self, grad: np.ndarray) -> np.ndarray:
        q = grad.copy()
        alphas = []
        for s, y, rho in zip(reversed(self.s), reversed(self.y), reversed(self.rho)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if self.s:
            gamma = (self.s[-1] @ self.y[-1]) / (self.y[-1] @ self.y[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(self.s, self.y, self.rho), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        return -q


def minimize(
    cost_fn,
    initial_params: np.ndarray,
    config: OptimizerConfig = OptimizerConfig(),
) -> tuple[np.ndarray, OptTrace]:
    """Minimize a smooth cost and return the lowest-cost accepted iterate.

    `cost_fn` maps params to either a (total, gradient) tuple or a
    CostBreakdown. With minibatch_count > 1, pass a sequence of per-batch
    cost functions instead; their totals and gradients are summed.
    Terminates on gradient sup-norm < tolerance or max_iterations.
    """
    if config.minibatch_count > 1:
        return _minimize_minibatch(cost_fn, initial_params, config)
    if not callable(cost_fn):
        raise TypeError("full-batch mode expects a single cost function")

    x = np.asarray(initial_params, dtype=np.float64).copy()
    f, g, nll, reg = _evaluate(cost_fn, x)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise ValueError("cost or gradient non-finite at the initial point")

    trace = OptTrace()
    if float(np.abs(g).max()) < config.gradient_tolerance:
        trace.converged = True
        return x, trace

    memory = _LbfgsMemory(config.history_size)
    best_f, best_x = f, x.copy()
    for iteration in range(1, config.max_iterations + 1):
        d = memory.direction(g)
        slope = float(d @ g)
        if slope >= 0:
            d = -g
            slope = float(d @ g)
        step = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            x_new = x + step * d
            if np.array_equal(x_new, x):
                break  # no representable progress left
            f_new, g_new, nll_new, reg_new = _evaluate(cost_fn, x_new)
            if np.isfinite(f_new) and f_new <= f + config.armijo_c1 * step * slope:
                accepted = True
                break
            step *= config.backtrack_factor
        if not accepted:
            trace.line_search_failed = True
            break
        memory.update(x_new - x, g_new - g)
        x, f, g, nll, reg = x_new, f_new, g_new, nll_new, reg_new
        grad_norm = float(np.abs(g).max())
        trace.append(
            iteration=iteration, total=f, nll=nll, reg=reg,
            grad_norm=grad_norm, step=step,
        )
        if f < best_f:
            best_f, best_x = f, x.copy()
        if grad_norm < config.gradient_tolerance:
            trace.converged = True
            break
    return best_x, trace


def _minimize_minibatch(
    batch_fns: Sequence[Callable],
    initial_params: np.ndarray,
    config: OptimizerConfig,
) -> tuple[np.ndarray, OptTrace]:
    if callable(batch_fns):
        raise TypeError("minibatch mode expects a sequence of per-batch cost functions")
    batch_fns = list(batch_fns)
    n_batches = len(batch_fns)
    if n_batches != config.minibatch_count:
        raise ValueError(
            f"{n_batches} batch functions for minibatch_count={config.minibatch_count}"
        )

    x = np.asarray(initial_params, dtype=np.float64).copy()
    anchors = [x.copy() for _ in range(n_batches)]
    evals = [_evaluate(fn, x) for fn in batch_fns]
    if not all(np.isfinite(e[0]) and np.all(np.isfinite(e[1])) for e in evals):
        raise ValueError("cost or gradient non-finite at the initial point")

    def aggregate():
        total = sum(e[0] for e in evals)
        grad = np.sum([e[1] for e in evals], axis=0)
        nll = sum(e[2] for e in evals)
        reg = sum(e[3] for e in evals)
        return total, grad, nll, reg

    trace = OptTrace()
    memory = _LbfgsMemory(config.history_size)
    f, g, nll, reg = aggregate()
    best_f, best_x = f, x.copy()
    quiet_streak = 0  # iterations in a row with a small aggregate gradient
    for iteration in range(1, config.max_iterations + 1):
        b = (iteration - 1) % n_batches
        # refresh the active batch at the current point so the aggregate
        # surrogate is exact for it and linear for the stale ones
        evals[b] = _evaluate(batch_fns[b], x)
        anchors[b] = x.copy()
        grad_b_at_x = evals[b][1]
        f, g, nll, reg = aggregate()
        if float(np.abs(g).max()) < config.gradient_tolerance:
            # stale anchors can hide a nonzero gradient; hold still until a
            # full refresh cycle confirms the fixpoint
            quiet_streak += 1
            if quiet_streak >= n_batches:
                trace.converged = True
                break
            continue
        quiet_streak = 0
        d = memory.direction(g)
        slope = float(d @ g)
        if slope >= 0:
            d = -g
            slope = float(d @ g)
        step = 1.0
        accepted = False
        fb_x = evals[b][0]
        linear_rest = sum(
            e[0] + float(e[1] @ (x - a)) for i, (e, a) in enumerate(zip(evals, anchors))
            if i != b
        )
        for _ in range(MAX_HALVINGS + 1):
            x_new = x + step * d
            if np.array_equal(x_new, x):
                break
            eb_new = _evaluate(batch_fns[b], x_new)
            surrogate_new = eb_new[0] + sum(
                e[0] + float(e[1] @ (x_new - a))
                for i, (e, a) in enumerate(zip(evals, anchors))
                if i != b
            )
            surrogate_old = fb_x + linear_rest
            if (
                np.isfinite(surrogate_new)
                and surrogate_new <= surrogate_old + config.armijo_c1 * step * slope
            ):
                accepted = True
                break
            step *= config.backtrack_factor
        if not accepted:
            trace.line_search_failed = True
            break
        evals[b] = eb_new
        anchors[b] = x_new.copy()
        x = x_new
        f, g, nll, reg = aggregate()
        # one batch's gradient change underestimates the aggregate curvature
        # by the batch count; scale it so the memory sees the full Hessian
        memory.update(step * d, n_batches * (eb_new[1] - grad_b_at_x))
        grad_norm = float(np.abs(g).max())
        trace.append(
            iteration=iteration, total=f, nll=nll, reg=reg,
            grad_norm=grad_norm, step=step,
        )
        if f < best_f:
            best_f, best_x = f, x.copy()
    if trace.converged:
        best_x = x
    return best_x, trace


def initialize_params(
    n_features: int, grid_width: int, seed: int
) -> np.ndarray:
    """Starting point: small random weights, sigma ~ grid_width/32, alpha 1."""
    if n_features < 1:
        raise ValueError("n_features must be >= 1")
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.01, size=n_features)
    log_sigma = float(np.log(grid_width / 32.0))
    return np.concatenate([w, [log_sigma, 1.0]])
