"""Classical and model-based reconstructors.

* das / ubp: delay-and-sum and universal back-projection directly from the
  sinogram and geometry.
* lbp: linear back-projection, the adjoint of the discretized forward
  operator applied to the sinogram.
* tikhonov_direct / tikhonov_lsqr: minimum of ||A x - p_d||^2 + lam ||x||^2,
  by dense normal equations or by damped LSQR.
* fbmb_solve: frequency-band model-based reconstruction — joint non-negative
  recovery of one image per frequency band, with a band-reject penalty tying
  each component's forward signal to its own band. Solved by projected
  gradient descent with an optional restarted-momentum acceleration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy.sparse.linalg import LinearOperator, lsqr

from .core import Image, ImagingGrid, SensorArray, Sinogram
from .errors import DivergenceError, SingularSystemError
from .filters import BandFilterBank, band_reject_array
from .forward import (
    SparseOperator,
    adjoint_apply,
    adjoint_apply_flat,
    forward_apply_flat,
    system_matrix,
)

_DENSE_LIMIT = 4096


@dataclass
class SolverOptions:
    """Iteration controls shared by the iterative solvers.

    step_mode "inverse-lipschitz" uses 1/L with L from the power-iteration
    bound; "fixed" uses ``fixed_step`` as given.
    """

    max_iters: int = 2000
    rel_tol: float = 1e-6
    step_mode: str = "inverse-lipschitz"
    fixed_step: float | None = None
    lipschitz_power_iters: int = 20
    accelerate: bool = False
    record_trace: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol >= 0:
            raise ValueError("rel_tol must be >= 0")
        if self.step_mode not in ("fixed", "inverse-lipschitz"):
            raise ValueError(f"unknown step_mode {self.step_mode!r}")
        if self.step_mode == "fixed" and not (self.fixed_step and self.fixed_step > 0):
            raise ValueError("step_mode='fixed' requires a positive fixed_step")


@dataclass
class FbmbResult:
    """Result of the multi-band solve: per-band components, their sum, and
    the objective value at every iteration (index 0 = starting point)."""

    components: list[Image]
    total: Image
    objective_trace: np.ndarray
    iterations_used: int


@dataclass
class TikhonovResult:
    """LSQR solve outcome; ``converged`` is False when the iteration limit hit."""

    image: Image
    converged: bool
    iterations: int
    residual_norm: float


# ---------------------------------------------------------------------------
# back-projection reconstructors
# ---------------------------------------------------------------------------

def das(sino: Sinogram, grid: ImagingGrid, sensors: SensorArray, v_s: float) -> Image:
    """Delay-and-sum: pixel value = sum over detectors of the sample at the
    acoustic travel time, linearly interpolated, zero outside the record."""
    coords = grid.pixel_coords()
    t = sino.times()
    out = np.zeros(grid.n_pixels)
    for l in range(sensors.n_d):
        pos = sensors.positions[l]
        tau = np.hypot(coords[:, 0] - pos[0], coords[:, 1] - pos[1]) / v_s
        out += np.interp(tau, t, sino.data[l], left=0.0, right=0.0)
    return Image(out.reshape(grid.shape), grid)


def ubp(sino: Sinogram, grid: ImagingGrid, sensors: SensorArray, v_s: float) -> Image:
    """Universal back-projection with uniform detector weights.

    Back-projects b(t) = 2 p - 2 t dp/dt; the solid-angle weights of the
    closed-surface formula degenerate for a uniform circular array, so every
    detector gets weight 1/n_d.
    """
    t = sino.times()
    p = sino.data
    dp = np.empty_like(p)
    dp[:, 1:-1] = (p[:, 2:] - p[:, :-2]) / (2.0 * sino.dt)
    dp[:, 0] = (p[:, 1] - p[:, 0]) / sino.dt
    dp[:, -1] = (p[:, -1] - p[:, -2]) / sino.dt
    b = 2.0 * p - 2.0 * t[None, :] * dp

    coords = grid.pixel_coords()
    out = np.zeros(grid.n_pixels)
    for l in range(sensors.n_d):
        pos = sensors.positions[l]
        tau = np.hypot(coords[:, 0] - pos[0], coords[:, 1] - pos[1]) / v_s
        out += np.interp(tau, t, b[l], left=0.0, right=0.0)
    out /= sensors.n_d
    return Image(out.reshape(grid.shape), grid)


def lbp(op: SparseOperator, sino: Sinogram) -> Image:
    """Linear back-projection: the adjoint of the forward operator."""
    return adjoint_apply(op, sino)


# ---------------------------------------------------------------------------
# Tikhonov-regularized least squares
# ---------------------------------------------------------------------------

def tikhonov_direct(op: SparseOperator, sino: Sinogram, lam: float) -> Image:
    """Solve (A^T A + lam I) x = A^T p_d by dense Cholesky factorization.

    Only feasible for small grids (N <= 4096); the iterative solver covers
    the rest.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    n = op.n_cols
    if n > _DENSE_LIMIT:
        raise ValueError(f"dense solve limited to N <= {_DENSE_LIMIT}, got {n}")
    a = system_matrix(op)
    gram = (a.T @ a).toarray()
    gram[np.diag_indices_from(gram)] += lam
    rhs = a.T @ sino.data.ravel()
    try:
        factor = sla.cho_factor(gram, lower=True)
    except sla.LinAlgError as exc:
        raise SingularSystemError(
            "normal equations are singular; retry with lambda > 0"
        ) from exc
    x = sla.cho_solve(factor, rhs)
    return Image(x.reshape(op.grid.shape), op.grid)


def tikhonov_lsqr(
    op: SparseOperator, sino: Sinogram, lam: float, opts: SolverOptions | None = None
) -> TikhonovResult:
    """Damped LSQR on min ||A x - p_d||^2 + lam ||x||^2 (damping folded in
    analytically as damp = sqrt(lam)). Never raises on slow convergence; the
    best iterate is returned with ``converged=False``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    opts = opts or SolverOptions()
    linop = LinearOperator(
        shape=(op.n_rows, op.n_cols),
        matvec=lambda x: forward_apply_flat(op, x),
        rmatvec=lambda y: adjoint_apply_flat(op, y),
        dtype=np.float64,
    )
    result = lsqr(
        linop,
        sino.data.ravel(),
        damp=math.sqrt(lam),
        atol=opts.rel_tol,
        btol=opts.rel_tol,
        iter_lim=opts.max_iters,
        conlim=0.0,
    )
    x, istop, itn = result[0], result[1], result[2]
    r2norm = result[4]
    return TikhonovResult(
        image=Image(x.reshape(op.grid.shape), op.grid),
        converged=istop in (1, 2),
        iterations=int(itn),
        residual_norm=float(r2norm),
    )


# ---------------------------------------------------------------------------
# multi-band model-based solver
# ---------------------------------------------------------------------------

def _reject_twice(bank: BandFilterBank, k: int, arr: np.ndarray) -> np.ndarray:
    return band_reject_array(bank, k, band_reject_array(bank, k, arr, strict=True), strict=True)


def _stacked_quadratic_apply(op, bank, lam, eta, mu, v: np.ndarray) -> np.ndarray:
    """Apply the quadratic-form matrix of the multi-band objective to a
    stacked (n, N) variable: H_kl = A^T A + lam I (all pairs) plus the
    per-band A^T F_k^2 A penalty block on the diagonal."""
    n = v.shape[0]
    s = v.sum(axis=0)
    common = adjoint_apply_flat(op, forward_apply_flat(op, s)) + lam * s
    out = np.tile(common, (n, 1))
    if eta > 0:
        shape = (op.n_d, op.n_t)
        for k in range(1, n + 1):
            w = forward_apply_flat(op, v[k - 1]).reshape(shape)
            w = _reject_twice(bank, k, w)
            out[k - 1] += eta * mu[k - 1] * adjoint_apply_flat(op, w.ravel())
    return out


def estimate_lipschitz(
    op: SparseOperator,
    bank: BandFilterBank | None,
    lam: float,
    eta: float,
    mu,
    power_iters: int = 20,
) -> float:
    """Power-iteration bound on the largest eigenvalue of the multi-band
    quadratic form, times a 1.05 safety factor.

    The gradient of the objective is 2 (H x - c) for this H, and a projected
    gradient step of 1/(1.05 L) with L >= lambda_max(H) is strictly below the
    2/lipschitz stability limit, so descent is monotone.
    """
    if power_iters < 5:
        raise ValueError("power_iters must be >= 5")
    mu = tuple(float(m) for m in mu)
    if eta > 0 and bank is None:
        raise ValueError("a filter bank is required when eta > 0")
    if bank is not None and len(mu) != bank.n:
        raise ValueError(f"mu has {len(mu)} entries, expected {bank.n}")
    n = len(mu)
    rng = np.random.default_rng(0)
    v = rng.standard_normal((n, op.n_cols))
    v /= np.linalg.norm(v)
    rayleigh = 0.0
    for _ in range(power_iters):
        w = _stacked_quadratic_apply(op, bank, lam, eta, mu, v)
        rayleigh = float(np.vdot(v, w))
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 1.05 * max(lam, np.finfo(float).tiny)
        v = w / norm
    return 1.05 * rayleigh


def fbmb_objective(op, bank, lam, eta, mu, pd_flat: np.ndarray, x: np.ndarray) -> float:
    """||p_d - A s||^2 + lam ||s||^2 + eta sum_k mu_k ||F_k A x_k||^2 with s = sum_k x_k."""
    s = x.sum(axis=0)
    r = pd_flat - forward_apply_flat(op, s)
    value = float(r @ r) + lam * float(s @ s)
    if eta > 0:
        shape = (op.n_d, op.n_t)
        for k in range(1, x.shape[0] + 1):
            w = band_reject_array(bank, k, forward_apply_flat(op, x[k - 1]).reshape(shape), strict=True)
            value += eta * mu[k - 1] * float(np.vdot(w, w))
    return value


def _fbmb_gradient(op, bank, lam, eta, mu, pd_flat: np.ndarray, x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    s = x.sum(axis=0)
    r = pd_flat - forward_apply_flat(op, s)
    common = -2.0 * adjoint_apply_flat(op, r) + 2.0 * lam * s
    g = np.tile(common, (n, 1))
    if eta > 0:
        shape = (op.n_d, op.n_t)
        for k in range(1, n + 1):
            w = _reject_twice(bank, k, forward_apply_flat(op, x[k - 1]).reshape(shape))
            g[k - 1] += 2.0 * eta * mu[k - 1] * adjoint_apply_flat(op, w.ravel())
    return g


def fbmb_solve(
    op: SparseOperator,
    sino: Sinogram,
    bank: BandFilterBank,
    lam: float,
    eta: float,
    mu,
    opts: SolverOptions | None = None,
    *,
    project: bool = True,
) -> FbmbResult:
    """Jointly recover one non-negative image per frequency band.

    Projected gradient descent on the stacked variable with step 1/L from
    :func:`estimate_lipschitz`; with ``opts.accelerate`` a momentum step is
    tried first and the momentum restarts whenever it would increase the
    objective, so the recorded trace stays non-increasing either way.
    ``project=False`` disables the non-negativity projection (test hook; the
    unconstrained problem then matches damped least squares when eta = 0).
    """
    opts = opts or SolverOptions()
    mu = tuple(float(m) for m in mu)
    if len(mu) != bank.n:
        raise ValueError(f"mu has {len(mu)} entries, expected {bank.n} bands")
    if lam < 0 or eta < 0 or any(m < 0 for m in mu):
        raise ValueError("lambda, eta and all mu must be non-negative")
    if sino.data.shape != (op.n_d, op.n_t):
        raise ValueError("sinogram shape does not match operator")

    n = bank.n
    pd_flat = sino.data.ravel()
    if opts.step_mode == "fixed":
        step = opts.fixed_step
    else:
        bound = estimate_lipschitz(op, bank, lam, eta, mu, opts.lipschitz_power_iters)
        step = 1.0 / max(bound, np.finfo(float).tiny)

    def prox(z):
        return np.maximum(z, 0.0) if project else z

    x = np.zeros((n, op.n_cols))
    j_cur = fbmb_objective(op, bank, lam, eta, mu, pd_flat, x)
    trace = [j_cur]
    y = x
    t_mom = 1.0
    iterations = 0
    for _ in range(opts.max_iters):
        x_new = prox(y - step * _fbmb_gradient(op, bank, lam, eta, mu, pd_flat, y))
        j_new = fbmb_objective(op, bank, lam, eta, mu, pd_flat, x_new)
        if opts.accelerate and j_new > j_cur:
            # momentum overshoot: restart from the last accepted iterate
            t_mom = 1.0
            x_new = prox(x - step * _fbmb_gradient(op, bank, lam, eta, mu, pd_flat, x))
            j_new = fbmb_objective(op, bank, lam, eta, mu, pd_flat, x_new)
        if not np.isfinite(j_new):
            raise DivergenceError("multi-band objective became non-finite (step too large)")
        if opts.accelerate:
            t_next = (1.0 + math.sqrt(1.0 + 4.0 * t_mom**2)) / 2.0
            y = x_new + ((t_mom - 1.0) / t_next) * (x_new - x)
            t_mom = t_next
        else:
            y = x_new
        iterations += 1
        trace.append(j_new)
        prev, x = j_cur, x_new
        j_cur = j_new
        if abs(prev - j_new) <= opts.rel_tol * max(abs(prev), np.finfo(float).tiny):
            break

    grid = op.grid
    components = [Image(x[k].reshape(grid.shape), grid) for k in range(n)]
    total = np.zeros(op.n_cols)
    for k in range(n):
        total = total + x[k]
    return FbmbResult(
        components=components,
        total=Image(total.reshape(grid.shape), grid),
        objective_trace=np.asarray(trace if opts.record_trace else trace[-1:]),
        iterations_used=iterations,
    )
