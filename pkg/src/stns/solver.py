"""Slab solvers: flexible GMRES, inexact Newton, and the time march.

Nonlinear convergence is always measured in the temporally weighted mass
norm of the slab (``SlabProblem.mass_norm``), and the linear solves are
driven to the Eisenstat-Walker forcing tolerance in that same norm; the
Krylov recursion itself runs in the Euclidean inner product, and the true
linear residual is reconstructed from the Arnoldi basis each iteration
(no extra operator applications).

On a pure-Dirichlet boundary the pressure is defined only up to one
constant per temporal block. The gauge is fixed by projecting those means
to zero -- from the preconditioner output, the Newton correction and the
iterate itself; the continuity residual is compatible automatically.

Preconditioner protocol (duck-typed, ``None`` means identity):
    set_state(problem, U)   refresh the linearization before a solve
    apply(v) -> z           approximate J^{-1} v
    notify_step(record)     optional, receives a NewtonStepRecord so
                            adaptive rebuild triggers can fire
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .slab import SlabProblem


class NonConvergenceError(RuntimeError):
    """Newton failed on a slab; carries the slab index and last residual."""

    def __init__(self, message, slab_index=None, residual=None):
        super().__init__(message)
        self.slab_index = slab_index
        self.residual = residual


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class ForcingConfig:
    """Adaptive forcing-term sequence for the inexact Newton solver.

    ``variant`` selects between the safeguarded update
    eta <- clamp(c * eta_prev * ratio^theta)   ("damped")
    and the plain power law without the eta_prev factor ("power").
    """

    eta0: float = 0.4
    c: float = 0.5
    theta: float = 1.5
    eta_min: float = 1e-3
    eta_max: float = 0.8
    variant: str = "damped"

    def first(self):
        return self.eta0

    def update(self, eta_prev, ratio):
        if self.variant == "damped":
            eta = self.c * eta_prev * ratio**self.theta
        elif self.variant == "power":
            eta = self.c * ratio**self.theta
        else:
            raise ValueError(f"unknown forcing variant {self.variant!r}")
        return float(np.clip(eta, self.eta_min, self.eta_max))


@dataclass
class NewtonConfig:
    abs_tol: float = 1e-12
    rel_tol: float = 1e-8
    max_iter: int = 25
    gmres_max_iter: int = 50
    armijo_c1: float = 1e-4
    max_backtracks: int = 5
    alpha_min: float = 1e-3
    merit_window: int = 5
    forcing: ForcingConfig = field(default_factory=ForcingConfig)


# --------------------------------------------------------------------------
# pressure gauge
# --------------------------------------------------------------------------


def project_pressure_gauge(problem, U):
    """Remove the per-temporal-block pressure mean in place (pure-Dirichlet
    gauge); no-op when any boundary face is not Dirichlet."""
    if not problem.ops.level.is_pure_dirichlet:
        return U
    _, Pb = problem.layout.split(U)
    for a in range(problem.tm.n_nodes):
        problem.ops.remove_pressure_mean(Pb[a])
    return U


# --------------------------------------------------------------------------
# flexible GMRES
# --------------------------------------------------------------------------


@dataclass
class KrylovInfo:
    converged: bool
    iterations: int
    mnorm_history: list
    euclid_history: list
    hessenberg: np.ndarray
    final_residual: np.ndarray

    @property
    def ratios(self):
        h = self.mnorm_history
        return [h[i + 1] / h[i] if h[i] > 0 else 0.0 for i in range(len(h) - 1)]

    def condition_estimate(self):
        """Condition of the preconditioned operator restricted to the Krylov
        space, from the singular values of the small Hessenberg matrix."""
        if self.iterations == 0:
            return 1.0
        sv = scipy.linalg.svdvals(self.hessenberg)
        sv = sv[sv > 0]
        if len(sv) == 0:
            return 1.0
        return float(sv[0] / sv[-1])


def fgmres(action, b, tol, norm=None, precond=None, max_iter=50):
    """Right-preconditioned flexible GMRES for ``action(x) = b``.

    The iteration stops when the true residual -- reconstructed as
    r_j = V_{j+1} (beta e_1 - Hbar_j y_j) -- drops to ``tol`` in ``norm``
    (Euclidean if None). Returns (x, KrylovInfo).
    """
    if norm is None:
        norm = np.linalg.norm
    if precond is None:
        precond = lambda v: v
    n = len(b)
    beta = np.linalg.norm(b)
    b_norm = norm(b)
    if b_norm <= tol or beta == 0.0:
        return np.zeros(n), KrylovInfo(True, 0, [b_norm], [beta],
                                       np.zeros((1, 0)), b.copy())

    V = [b / beta]
    Z = []
    Hbar = np.zeros((max_iter + 1, max_iter))
    R = np.zeros((max_iter + 1, max_iter))  # Givens-rotated copy
    cs = np.zeros(max_iter)
    sn = np.zeros(max_iter)
    gvec = np.zeros(max_iter + 1)
    gvec[0] = beta
    mnorms = [b_norm]
    euclids = [beta]
    x = np.zeros(n)
    residual = b.copy()
    converged = False
    j = 0
    for j in range(max_iter):
        z = precond(V[j])
        Z.append(z)
        w = action(z)
        # two-pass modified Gram-Schmidt
        for _ in range(2):
            for i in range(j + 1):
                hij = V[i] @ w
                Hbar[i, j] += hij
                w -= hij * V[i]
        Hbar[j + 1, j] = np.linalg.norm(w)
        happy = Hbar[j + 1, j] <= 1e-14 * beta
        if not happy:
            V.append(w / Hbar[j + 1, j])

        R[: j + 2, j] = Hbar[: j + 2, j]
        for i in range(j):
            tmp = cs[i] * R[i, j] + sn[i] * R[i + 1, j]
            R[i + 1, j] = -sn[i] * R[i, j] + cs[i] * R[i + 1, j]
            R[i, j] = tmp
        rho = np.hypot(R[j, j], R[j + 1, j])
        cs[j] = R[j, j] / rho if rho > 0 else 1.0
        sn[j] = R[j + 1, j] / rho if rho > 0 else 0.0
        R[j, j] = rho
        R[j + 1, j] = 0.0
        gvec[j + 1] = -sn[j] * gvec[j]
        gvec[j] = cs[j] * gvec[j]
        euclids.append(abs(gvec[j + 1]))

        y = scipy.linalg.solve_triangular(
            R[: j + 1, : j + 1], gvec[: j + 1], lower=False
        )
        coeffs = -Hbar[: j + 2, : j + 1] @ y
        coeffs[0] += beta
        nvec = len(V)  # j+2, or j+1 after a happy breakdown
        residual = sum(coeffs[i] * V[i] for i in range(nvec))
        rn = norm(residual)
        mnorms.append(rn)
        x = sum(yi * zi for yi, zi in zip(y, Z))
        if rn <= tol or happy:
            # a tiny subdiagonal only exhausts the reachable subspace; it is
            # not evidence the target tolerance was met
            converged = rn <= tol
            j += 1
            break
    else:
        j = max_iter

    info = KrylovInfo(
        converged, j, mnorms, euclids, Hbar[: j + 1, : j].copy(), residual
    )
    return x, info


# --------------------------------------------------------------------------
# Newton
# --------------------------------------------------------------------------


@dataclass
class NewtonStepRecord:
    step: int
    eta: float
    linear_iterations: int
    linear_converged: bool
    alpha: float
    r_before: float
    r_after: float
    condition_estimate: float
    krylov_ratios: list


@dataclass
class SlabStats:
    slab_index: int
    newton_iterations: int = 0
    converged: bool = False
    residuals: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    @property
    def linear_iterations(self):
        return [s.linear_iterations for s in self.steps]


def newton_solve_slab(problem, U0, preconditioner=None, config=None,
                      slab_index=0, merit_window=None):
    """Inexact Newton with adaptive forcing and a nonmonotone line search.

    ``merit_window`` may carry the acceptance history across slabs; a fresh
    deque is created when None. Returns (U, SlabStats).
    """
    cfg = config or NewtonConfig()
    stats = SlabStats(slab_index=slab_index)
    U = U0.copy()
    project_pressure_gauge(problem, U)

    R = problem.residual(U)
    r = problem.mass_norm(R)
    stats.residuals.append(r)
    if not np.isfinite(r):
        raise NonConvergenceError(
            f"initial residual not finite on slab {slab_index}",
            slab_index, r,
        )
    stop = max(cfg.abs_tol, cfg.rel_tol * r)
    if merit_window is None:
        merit_window = deque(maxlen=cfg.merit_window)
    merit_window.append(0.5 * r * r)

    eta = cfg.forcing.first()
    gauge = lambda v: project_pressure_gauge(problem, v)

    for m in range(cfg.max_iter):
        if r <= stop:
            stats.converged = True
            break
        problem.set_linearization(U)
        if preconditioner is not None:
            preconditioner.set_state(problem, U)
            apply_p = lambda v: gauge(preconditioner.apply(v))
        else:
            apply_p = lambda v: gauge(v.copy())

        if m > 0:
            eta = cfg.forcing.update(eta, stats.residuals[-1] / stats.residuals[-2])
        # the right-hand side is a dual vector; its compatibility with the
        # constant-pressure modes holds exactly (divergence theorem) and the
        # primal gauge projection would destroy it, so it is never projected
        b = -R
        dU, info = fgmres(
            problem.jacobian_action, b, eta * r,
            norm=problem.mass_norm, precond=apply_p,
            max_iter=cfg.gmres_max_iter,
        )
        gauge(dU)

        # directional derivative of the merit 0.5 ||R||_M^2 along dU; the
        # linear true residual gives J dU = -R + res without a fresh apply
        g0 = -r * r + problem.mass_inner(R, info.final_residual)
        alpha, R_new, r_new = _line_search(
            problem, U, dU, R, r, g0, merit_window, cfg
        )
        U += alpha * dU
        project_pressure_gauge(problem, U)
        R, r = R_new, r_new
        merit_window.append(0.5 * r * r)
        stats.residuals.append(r)
        record = NewtonStepRecord(
            step=m, eta=eta, linear_iterations=info.iterations,
            linear_converged=info.converged, alpha=alpha,
            r_before=stats.residuals[-2], r_after=r,
            condition_estimate=info.condition_estimate(),
            krylov_ratios=info.ratios,
        )
        stats.steps.append(record)
        if preconditioner is not None and hasattr(preconditioner, "notify_step"):
            preconditioner.notify_step(record)
        if not np.isfinite(r):
            raise NonConvergenceError(
                f"residual diverged on slab {slab_index}", slab_index, r
            )
    else:
        stats.converged = r <= stop

    stats.newton_iterations = len(stats.steps)
    if not stats.converged:
        raise NonConvergenceError(
            f"Newton did not reach {stop:.3e} within {cfg.max_iter} steps "
            f"on slab {slab_index} (last residual {r:.3e})",
            slab_index, r,
        )
    return U, stats


def _line_search(problem, U, dU, R, r, g0, merit_window, cfg):
    """Nonmonotone backtracking Armijo search on the squared mass norm.

    Accepts alpha when 0.5 r(alpha)^2 <= max(window) + c1 alpha g0; trial
    steps shrink by safeguarded quadratic interpolation. Falls back to
    alpha_min unconditionally when the backtrack budget is exhausted.
    """
    phi0 = 0.5 * r * r
    ref = max(merit_window) if merit_window else phi0
    alpha = 1.0
    for _ in range(cfg.max_backtracks + 1):
        R_try = problem.residual(U + alpha * dU)
        r_try = problem.mass_norm(R_try)
        phi = 0.5 * r_try * r_try
        if np.isfinite(phi) and phi <= ref + cfg.armijo_c1 * alpha * g0:
            return alpha, R_try, r_try
        denom = phi - phi0 - g0 * alpha
        if np.isfinite(denom) and denom > 0:
            quad = -0.5 * g0 * alpha * alpha / denom
            alpha = float(np.clip(quad, 0.1 * alpha, 0.5 * alpha))
        else:
            alpha *= 0.5
    alpha = cfg.alpha_min
    R_try = problem.residual(U + alpha * dU)
    return alpha, R_try, problem.mass_norm(R_try)


# --------------------------------------------------------------------------
# slab march
# --------------------------------------------------------------------------


@dataclass
class MarchResult:
    trajectory: list  # slab solution vectors, or None
    problems: list  # the SlabProblem of every slab (layout/time info)
    stats: list  # SlabStats per slab
    v_end: np.ndarray

    @property
    def max_newton_iterations(self):
        return max(s.newton_iterations for s in self.stats)

    @property
    def mean_linear_iterations(self):
        counts = [it for s in self.stats for it in s.linear_iterations]
        return float(np.mean(counts)) if counts else 0.0


def march(ops, k, partition, v_start, f=None, g=None, preconditioner=None,
          config=None, include_convection=True, store_trajectory=True):
    """Solve slab by slab over the whole time partition.

    ``v_start`` is the interleaved velocity coefficient vector at t = 0;
    each slab is warm-started with its previous trace extended constantly.
    """
    cfg = config or NewtonConfig()
    v_prev = np.asarray(v_start, dtype=float)
    trajectory = [] if store_trajectory else None
    problems = []
    stats = []
    for n in range(1, len(partition) + 1):
        t0, t1 = partition.slab(n)
        problem = SlabProblem(ops, k, t0, t1, v_prev, f=f, g=g,
                              include_convection=include_convection)
        U0 = problem.constant_guess()
        U, st = newton_solve_slab(
            problem, U0, preconditioner=preconditioner, config=cfg,
            slab_index=n,
        )
        v_prev = problem.end_velocity(U)
        if store_trajectory:
            trajectory.append(U)
        problems.append(problem)
        stats.append(st)
    return MarchResult(trajectory, problems, stats, v_prev)
