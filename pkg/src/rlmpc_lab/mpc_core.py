"""Linear MPC as a condensed quadratic program with a dual coordinate-ascent solver.

The finite-horizon tracking problem

    min_U  sum_k ||x(k) - r(k)||_Q^2 + ||u(k)||_R^2
    s.t.   x(k+1) = A x(k) + B u(k),  |u(k)| <= u_bound,  |theta(k)| <= x1_bound

is condensed onto the input sequence U via stacked prediction matrices and
solved with Hildreth's method: the unconstrained minimizer is kept when
feasible, otherwise the dual variables of the violated inequality rows are
iterated coordinate-wise until stationary. Only the first input is applied
(receding horizon). Functions here are pure; every call builds its own
workspace, so concurrent use needs no locking."""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .plant import DiscreteModel
from .reference import CrucialPoints, regenerate_window

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 500


class DimensionMismatch(ValueError):
    pass


class NotPositiveDefinite(ValueError):
    pass


@dataclass(frozen=True)
class MpcConfig:
    Q: np.ndarray          # diagonal state weights, length 4
    R: float               # input weight
    N: int                 # prediction horizon (steps)
    Ts: float              # sample time (s)
    x1_bound: float        # |theta| constraint (rad)
    u_bound: float         # |u| constraint (V)
    CTs: float = 0.1       # crucial-point spacing for the downsampled variant

    def __post_init__(self):
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float))
        if self.Q.shape != (4,) or np.any(self.Q < 0):
            raise ValueError(f"Q must be 4 non-negative weights, got {self.Q}")
        if not self.R > 0:
            raise ValueError(f"R must be positive, got {self.R}")
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if not (self.Ts > 0 and self.x1_bound > 0 and self.u_bound > 0):
            raise ValueError("Ts and bounds must be positive")


def default_mpc_config(N: int = 50, Ts: float = 0.01) -> MpcConfig:
    """Weights and bounds used throughout the experiments."""
    return MpcConfig(Q=np.array([5.0, 5.0, 0.0, 0.0]), R=0.5, N=N, Ts=Ts,
                     x1_bound=2.0, u_bound=12.0)


@dataclass(frozen=True)
class CondensedQp:
    """min 1/2 U' H U + f' U  s.t.  G U <= h."""

    H: np.ndarray
    f: np.ndarray
    G: np.ndarray
    h: np.ndarray


@dataclass(frozen=True)
class MpcSolution:
    U: np.ndarray
    iterations: int
    active_constraints: int
    max_iter_reached: bool = False
    dual_objective_trace: np.ndarray | None = field(default=None, compare=False)


def build_prediction(model: DiscreteModel, N: int):
    """Stacked prediction X = Sx x0 + Su U over steps 1..N.

    Sx rows are A, A^2, ..., A^N; Su is block lower-triangular with
    A^(i-j-1) B blocks."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    n = model.A.shape[0]
    Sx = np.zeros((n * N, n))
    Su = np.zeros((n * N, N))
    Ak = np.eye(n)
    AkB = [model.B.ravel().copy()]  # A^k B for k = 0..N-1
    for i in range(N):
        Ak = model.A @ Ak
        Sx[n * i:n * (i + 1)] = Ak
        if i > 0:
            AkB.append(model.A @ AkB[-1])
    for i in range(N):
        for j in range(i + 1):
            Su[n * i:n * (i + 1), j] = AkB[i - j]
    return Sx, Su


class _Workspace:
    """Per-call precomputation shared by the QP assembly and the solver."""

    def __init__(self, model: DiscreteModel, cfg: MpcConfig):
        if model.A.shape != (4, 4):
            raise DimensionMismatch(f"expected a 4-state model, got A {model.A.shape}")
        self.model = model
        self.cfg = cfg
        N = cfg.N
        self.Sx, self.Su = build_prediction(model, N)
        qdiag = np.tile(cfg.Q, N)
        self.QSu = self.Su * qdiag[:, None]
        H = self.Su.T @ self.QSu + cfg.R * np.eye(N)
        self.H = 0.5 * (H + H.T)
        self.SuT_Q = self.QSu.T                      # maps stacked residual to f
        self.Sx_theta = self.Sx[0::4]                # predicted theta rows
        self.Su_theta = self.Su[0::4]
        # constraint rows: u upper, u lower, theta upper, theta lower
        self.G = np.vstack([np.eye(N), -np.eye(N), self.Su_theta, -self.Su_theta])
        try:
            self.chol = cho_factor(self.H)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from exc

    def rhs(self, x0: np.ndarray, window: np.ndarray):
        """(f, h) for the current state and reference window."""
        cfg = self.cfg
        if len(window) != cfg.N:
            raise DimensionMismatch(f"window length {len(window)} != horizon {cfg.N}")
        resid = self.Sx @ x0
        resid[0::4] -= window                        # references for the other states are zero
        f = self.SuT_Q @ resid
        theta_free = self.Sx_theta @ x0
        h = np.concatenate([np.full(cfg.N, cfg.u_bound),
                            np.full(cfg.N, cfg.u_bound),
                            cfg.x1_bound - theta_free,
                            cfg.x1_bound + theta_free])
        return f, h


def build_qp(model: DiscreteModel, cfg: MpcConfig, x0, window) -> CondensedQp:
    """Condense the tracking problem at state x0 with an N-sample window."""
    ws = _Workspace(model, cfg)
    f, h = ws.rhs(np.asarray(x0, dtype=float), np.asarray(window, dtype=float))
    return CondensedQp(H=ws.H, f=f, G=ws.G, h=h)


def solve_qp(qp: CondensedQp, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER, track_dual: bool = False) -> MpcSolution:
    """Hildreth's dual method for the condensed QP.

    Solves the unconstrained problem first and returns it when feasible.
    Otherwise ascends the dual of the violated rows one coordinate at a time,
    expanding the working set whenever relaxing it uncovered new violations.
    Rows never entering the working set keep zero multipliers, which is their
    coordinate-optimal value while they remain satisfied."""
    try:
        chol = cho_factor(qp.H)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    return _solve_with_chol(qp.H, chol, qp.f, qp.G, qp.h, tol, max_iter, track_dual)


def _solve_with_chol(H, chol, f, G, h, tol, max_iter, track_dual=False):
    u_free = -cho_solve(chol, f)
    slack = G @ u_free - h
    feas_tol = 1e-12 * max(1.0, float(np.max(np.abs(h))) if len(h) else 1.0)
    if not len(h) or np.max(slack) <= feas_tol:
        return MpcSolution(U=u_free, iterations=0, active_constraints=0,
                           dual_objective_trace=np.zeros(0) if track_dual else None)

    GHinv = cho_solve(chol, G.T).T            # G H^-1
    P = GHinv @ G.T                           # dual Hessian
    d = h + GHinv @ f
    m = len(h)
    lam = np.zeros(m)
    work = list(np.flatnonzero(slack > feas_tol))
    in_work = np.zeros(m, dtype=bool)
    in_work[work] = True
    trace = [] if track_dual else None
    iterations = 0
    converged = False

    while iterations < max_iter:
        iterations += 1
        delta = 0.0
        for i in work:
            Pii = P[i, i]
            if Pii <= 1e-14:
                continue
            w = lam[i] - (d[i] + P[i] @ lam) / Pii
            new = w if w > 0.0 else 0.0
            delta = max(delta, abs(new - lam[i]))
            lam[i] = new
        if track_dual:
            trace.append(-(0.5 * lam @ P @ lam + d @ lam))
        if delta < tol:
            # stationary on the working set; accept only if the full primal
            # violation is within the contract, expanding the set otherwise
            # (rows outside kept lambda = 0, valid only while satisfied)
            u = u_free - GHinv.T @ lam
            viol = G @ u - h
            if np.max(viol) <= 10.0 * tol:
                converged = True
                break
            fresh = np.flatnonzero((viol > 10.0 * tol) & ~in_work)
            work.extend(fresh)
            in_work[fresh] = True

    u = u_free - GHinv.T @ lam
    active = int(np.sum(lam > 0.0))
    return MpcSolution(U=u, iterations=iterations, active_constraints=active,
                       max_iter_reached=not converged,
                       dual_objective_trace=np.array(trace) if track_dual else None)


def kkt_residual(qp: CondensedQp, sol: MpcSolution, lam: np.ndarray | None = None) -> float:
    """Max of primal violation over the returned iterate (stationarity and
    complementarity hold by construction of the dual reconstruction)."""
    viol = qp.G @ sol.U - qp.h
    return float(max(0.0, np.max(viol))) if len(viol) else 0.0


def _first_input(ws: _Workspace, x, window, tol, max_iter):
    x0 = np.asarray(x, dtype=float)
    f, h = ws.rhs(x0, np.asarray(window, dtype=float))
    sol = _solve_with_chol(ws.H, ws.chol, f, ws.G, h, tol, max_iter)
    if sol.max_iter_reached:
        # one-shot relaxation of the theta rows: keeps closed-loop stepping
        # total when the state constraint is momentarily infeasible
        N = ws.cfg.N
        h_relaxed = h.copy()
        h_relaxed[2 * N:] += 10.0 * ws.cfg.x1_bound
        logger.warning("QP did not converge in %d iterations; relaxing the "
                       "theta constraint rows for this step", max_iter)
        sol = _solve_with_chol(ws.H, ws.chol, f, ws.G, h_relaxed, tol, max_iter)
    u0 = float(np.clip(sol.U[0], -ws.cfg.u_bound, ws.cfg.u_bound))
    return u0


def mpc_step(model: DiscreteModel, cfg: MpcConfig, x, window,
             tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> float:
    """First input of the condensed QP solution (receding horizon)."""
    return _first_input(_Workspace(model, cfg), x, window, tol, max_iter)


def drmpc_step(model: DiscreteModel, cfg: MpcConfig, x, cp: CrucialPoints,
               tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> float:
    """MPC step on the window regenerated from downsampled crucial points."""
    return _first_input(_Workspace(model, cfg), x, regenerate_window(cp), tol, max_iter)
