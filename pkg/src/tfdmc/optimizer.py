"""Natural-gradient updates: weighted minSR with SPRING-style momentum.

For real parameters the metric is Re S with S the quantum geometric tensor.
Stacking real and imaginary parts of the weighted, centered log-derivatives
into A (2M x P rows sqrt(w) [Re dO; Im dO]) and the per-sample residuals
into b gives

    force    g = 2 A^T b,
    update   (A^T A + lam I) dtheta = g,

solved either densely in parameter space or, when parameters outnumber
samples, in the 2M-dimensional sample space via

    dtheta = A^T (A A^T + lam I)^{-1} (2 b),

which is the same regularized least-squares solution.  SPRING blends the
previous update into the residual before the solve:

    dtheta = mu d_prev + A^T (A A^T + lam)^{-1} (2b - A mu d_prev).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SolverFailure(RuntimeError):
    """Linear solve failed; retry with a larger regularization lambda."""


@dataclass(frozen=True)
class OptimizerConfig:
    lambda_start: float = 1e-2
    lambda_end: float = 1e-6
    momentum: float = 0.95
    learning_rate: float = 1.0
    n_steps: int = 125
    # trust regions applied to the full update (momentum included): the
    # state-space norm sqrt(dtheta^T Re(S) dtheta) bounds the first-order
    # change of the state, the parameter norm bounds motion along nearly
    # flat directions that small late-schedule lambdas would amplify
    max_state_norm: float = 0.2
    max_param_norm: float = 0.3

    def __post_init__(self):
        if self.lambda_start <= 0 or self.lambda_end <= 0:
            raise ValueError("regularization must stay strictly positive")


def lambda_schedule(cfg: OptimizerConfig, step: int, n_steps: int | None = None) -> float:
    """Geometric interpolation lambda_start -> lambda_end over one
    compression's step budget; resets every compression."""
    n = cfg.n_steps if n_steps is None else n_steps
    if n <= 1:
        return cfg.lambda_end
    frac = min(max(step / (n - 1), 0.0), 1.0)
    return cfg.lambda_start * (cfg.lambda_end / cfg.lambda_start) ** frac


def _psd_solve(gram: np.ndarray, lam: float, rhs: np.ndarray) -> np.ndarray:
    """(gram + lam I)^{-1} rhs for symmetric PSD gram, via eigh; roundoff
    negatives in the spectrum are clamped to zero."""
    s, v = np.linalg.eigh(gram)
    s = np.maximum(s, 0.0)
    return v @ ((v.T @ rhs) / (s + lam))


def _stack_real(o_centered: np.ndarray, residual: np.ndarray, weights: np.ndarray):
    w = weights / weights.sum()
    sq = np.sqrt(w)
    A = np.concatenate([sq[:, None] * o_centered.real, sq[:, None] * o_centered.imag])
    b = np.concatenate([sq * residual.real, sq * residual.imag])
    return A, b


def natural_step(
    o_mat: np.ndarray,
    weights: np.ndarray,
    residual: np.ndarray,
    lam: float,
    *,
    prev_update: np.ndarray | None = None,
    momentum: float = 0.0,
    mode: str = "auto",
    max_state_norm: float = 0.0,
    max_param_norm: float = 0.0,
) -> np.ndarray:
    """One natural-gradient step from a weighted batch.

    ``residual`` holds the per-sample complex values r(x) whose weighted
    contraction with the centered log-derivatives is the force,
    g = 2 Re E[dO^* r]; for fidelity compression r = (f1 - E[f1]) F2.
    ``mode``: "sample" (minSR), "dense", or "auto" (sample space whenever
    parameters outnumber the 2M stacked samples).  A positive
    ``max_state_norm`` rescales the update when its state-space norm
    ||A dtheta|| exceeds it.
    """
    w = np.asarray(weights, dtype=float)
    o_mean = (w / w.sum()) @ o_mat
    A, b = _stack_real(o_mat - o_mean, residual, w)
    two_b = 2.0 * b
    n_rows, n_params = A.shape

    base = np.zeros(n_params) if prev_update is None else momentum * prev_update
    rhs = two_b - A @ base

    if mode == "auto":
        mode = "sample" if n_params > n_rows else "dense"
    try:
        # symmetric eigendecomposition instead of LU: samples near nodes of
        # Psi carry huge log-derivatives, and the resulting Gram matrices
        # can defeat pivoted LU at small lambda
        if mode == "sample":
            delta = A.T @ _psd_solve(A @ A.T, lam, rhs)
        elif mode == "dense":
            delta = _psd_solve(A.T @ A, lam, A.T @ rhs)
        else:
            raise ValueError(f"unknown solver mode {mode!r}")
    except np.linalg.LinAlgError as exc:
        raise SolverFailure(
            f"natural-gradient solve failed at lambda={lam:g}; retry with a larger lambda"
        ) from exc
    if not np.all(np.isfinite(delta)):
        raise SolverFailure(
            f"natural-gradient solve produced non-finite entries at lambda={lam:g}; "
            "retry with a larger lambda"
        )
    update = base + delta
    if max_state_norm > 0:
        snorm = float(np.linalg.norm(A @ update))
        if snorm > max_state_norm:
            update = update * (max_state_norm / snorm)
    if max_param_norm > 0:
        pnorm = float(np.linalg.norm(update))
        if pnorm > max_param_norm:
            update = update * (max_param_norm / pnorm)
    return update
