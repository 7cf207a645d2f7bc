"""Rotary inverted pendulum: nonlinear simulation, linearization, discretization.

State convention throughout the package: x = [theta, alpha, theta_dot, alpha_dot]
with theta the rotary arm angle (rad), alpha the pendulum angle measured from
upright (rad). alpha = 0 is the unstable upright equilibrium.

Model equations (voltage input u, motor torque tau = km/Rm * (u - km*theta_dot)):

    M*theta_dd = mp*l*r*alpha_dd*cos(a) - Jp*theta_d*alpha_d*sin(2a)
                 - mp*l*r*alpha_d^2 - br*theta_d + tau
    Jp*alpha_dd = mp*l*r*theta_dd*cos(a) + 0.5*Jp*theta_d^2*sin(2a)
                  + mp*g*l*sin(a) - bp*alpha_d

with M = Jr + Jp*sin(a)^2. The alpha_d^2 term carries no sin(a) factor; this
is deliberate (see ``conservative_derivative`` for the variant that does).
"""

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import expm

GRAVITY = 9.81

# raw parameters that may be set from a file or perturbed; inertias are derived
RAW_PARAM_FIELDS = ("Rm", "kt", "km", "mr", "r", "br", "mp", "l", "bp", "g")

PARAM_FILE_KEYS = ("Rm", "kt", "km", "mr", "r", "br", "mp", "pendulum_length", "bp")


class NonPositiveJt(ValueError):
    """Combined inertia Jt = Jp*Jr - mp^2*l^2*r^2 came out non-positive."""


class SingularMassMatrix(ArithmeticError):
    """The 2x2 acceleration system is singular (cannot happen for valid params)."""


class InvalidPerturbation(ValueError):
    """A perturbation produced a parameter set violating the invariants."""


@dataclass(frozen=True)
class PendulumParams:
    """Physical constants of the rotary pendulum plus derived inertias.

    ``l`` is the pendulum half-length (half of the catalog "pendulum length").
    ``kt`` is stored for completeness but unused by the dynamics, which are
    written in terms of km/Rm. Use :func:`derive_inertias` to construct."""

    Rm: float   # terminal resistance (ohm)
    kt: float   # current-torque constant (N*m/A), unused by the model
    km: float   # back-emf constant (V*s/rad)
    mr: float   # rotary arm mass (kg)
    r: float    # rotary arm length (m)
    br: float   # rotary arm damping (N*m*s/rad)
    mp: float   # pendulum mass (kg)
    l: float    # pendulum half-length (m)
    bp: float   # pendulum damping (N*m*s/rad)
    g: float    # gravity (m/s^2)
    Jr: float   # rotary arm inertia (kg*m^2)
    Jp: float   # pendulum inertia (kg*m^2)
    Jt: float   # combined inertia Jp*Jr - mp^2*l^2*r^2 (kg*m^2)^2

    def __post_init__(self):
        for name in ("Rm", "mr", "r", "mp", "l", "Jr", "Jp"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)}")
        for name in ("br", "bp", "kt", "km"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not self.Jt > 0:
            raise NonPositiveJt(f"Jt = {self.Jt} must be positive")


@dataclass(frozen=True)
class ContinuousModel:
    """Continuous linearization dx/dt = As x + Bs u about the upright equilibrium."""

    As: np.ndarray  # 4x4
    Bs: np.ndarray  # 4x1


@dataclass(frozen=True)
class DiscreteModel:
    """Zero-order-hold discrete model x(k+1) = A x(k) + B u(k) at sample time Ts."""

    A: np.ndarray   # 4x4
    B: np.ndarray   # 4x1
    Ts: float

    def __post_init__(self):
        if not self.Ts > 0:
            raise ValueError(f"Ts must be positive, got {self.Ts}")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise ValueError("A, B must be finite")


@dataclass(frozen=True)
class PerturbationSpec:
    """Multiplicative factors and/or additive offsets for raw parameters.

    Keys must name raw fields (Rm, kt, km, mr, r, br, mp, l, bp, g); derived
    inertias are recomputed after the perturbation is applied."""

    scale: dict | None = None
    offset: dict | None = None

    def __post_init__(self):
        for mapping in (self.scale, self.offset):
            for key in (mapping or {}):
                if key not in RAW_PARAM_FIELDS:
                    raise InvalidPerturbation(f"unknown or non-perturbable parameter {key!r}")


def derive_inertias(Rm, kt, km, mr, r, br, mp, l, bp, g=GRAVITY) -> PendulumParams:
    """Build a full parameter set, deriving thin-rod inertias about the pivots.

    Jr = mr*r^2/3, Jp = mp*(2l)^2/3, Jt = Jp*Jr - mp^2*l^2*r^2. Raises
    NonPositiveJt when the combination is degenerate."""
    Jr = mr * r**2 / 3.0
    Jp = mp * (2.0 * l) ** 2 / 3.0
    Jt = Jp * Jr - mp**2 * l**2 * r**2
    if not Jt > 0:
        raise NonPositiveJt(f"Jt = {Jt} must be positive")
    return PendulumParams(Rm=Rm, kt=kt, km=km, mr=mr, r=r, br=br, mp=mp, l=l,
                          bp=bp, g=g, Jr=Jr, Jp=Jp, Jt=Jt)


def qube_servo2_params() -> PendulumParams:
    """Catalog parameter set for the QUBE-Servo 2 rotary pendulum."""
    return derive_inertias(Rm=8.4, kt=0.042, km=0.042, mr=0.095, r=0.085,
                           br=0.001, mp=0.024, l=0.129 / 2.0, bp=0.00005)


def load_params(path) -> PendulumParams:
    """Load a parameter set from a flat ``key = value`` file.

    Exactly the raw keys are accepted (pendulum_length is the full length 2l);
    derived inertias are never read."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in PARAM_FILE_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown parameter key {key!r}")
            if key in values:
                raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
            values[key] = float(raw)
    missing = [k for k in PARAM_FILE_KEYS if k not in values]
    if missing:
        raise ValueError(f"{path}: missing parameter keys {missing}")
    return derive_inertias(Rm=values["Rm"], kt=values["kt"], km=values["km"],
                           mr=values["mr"], r=values["r"], br=values["br"],
                           mp=values["mp"], l=values["pendulum_length"] / 2.0,
                           bp=values["bp"])


def perturb(p: PendulumParams, spec: PerturbationSpec) -> PendulumParams:
    """Apply a perturbation to the raw parameters and re-derive the inertias.

    The returned set is what the "real" plant simulates while controllers keep
    the nominal model."""
    raw = {name: getattr(p, name) for name in RAW_PARAM_FIELDS}
    for key, factor in (spec.scale or {}).items():
        raw[key] = raw[key] * factor
    for key, delta in (spec.offset or {}).items():
        raw[key] = raw[key] + delta
    try:
        return derive_inertias(**raw)
    except ValueError as exc:
        raise InvalidPerturbation(str(exc)) from exc


def default_perturbation() -> PerturbationSpec:
    """Default plant/model mismatch used in the experiments: 5x damping, +10% mass."""
    return PerturbationSpec(scale={"br": 5.0, "bp": 5.0, "mp": 1.1})


def validate_state(x) -> np.ndarray:
    """Coerce to a float 4-vector, rejecting NaN/Inf and wrong shapes."""
    arr = np.asarray(x, dtype=float)
    if arr.shape != (4,):
        raise ValueError(f"state must be a 4-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"state must be finite, got {arr}")
    return arr


def _accelerations(p: PendulumParams, al, thd, ald, u):
    """Solve the coupled 2x2 system for (theta_dd, alpha_dd) at one state."""
    sa = math.sin(al)
    ca = math.cos(al)
    s2a = math.sin(2.0 * al)
    mlr = p.mp * p.l * p.r
    M = p.Jr + p.Jp * sa * sa
    tau = p.km / p.Rm * (u - p.km * thd)
    # [ M        -mlr*ca ] [theta_dd]   [rhs1]
    # [ -mlr*ca   Jp     ] [alpha_dd] = [rhs2]
    rhs1 = -p.Jp * thd * ald * s2a - mlr * ald * ald - p.br * thd + tau
    rhs2 = 0.5 * p.Jp * thd * thd * s2a + p.mp * p.g * p.l * sa - p.bp * ald
    det = M * p.Jp - (mlr * ca) ** 2
    if abs(det) < 1e-18:
        raise SingularMassMatrix(f"acceleration system determinant {det}")
    tdd = (p.Jp * rhs1 + mlr * ca * rhs2) / det
    add = (mlr * ca * rhs1 + M * rhs2) / det
    return tdd, add


def nonlinear_derivative(p: PendulumParams, x, u: float) -> np.ndarray:
    """State derivative [theta_d, alpha_d, theta_dd, alpha_dd] at (x, u)."""
    th, al, thd, ald = x
    tdd, add = _accelerations(p, al, thd, ald, u)
    return np.array([thd, ald, tdd, add])


def conservative_derivative(p: PendulumParams, x, u: float) -> np.ndarray:
    """Energy-consistent variant: the centrifugal alpha_d^2 term carries sin(a).

    With zero damping, zero back-emf and u = 0 this field conserves
    :func:`mechanical_energy` exactly; the main model does not, because its
    alpha_d^2 term enters without the sin(a) factor. Used for integrator
    validation, not by the controllers."""
    th, al, thd, ald = x
    sa = math.sin(al)
    ca = math.cos(al)
    s2a = math.sin(2.0 * al)
    mlr = p.mp * p.l * p.r
    M = p.Jr + p.Jp * sa * sa
    tau = p.km / p.Rm * (u - p.km * thd)
    rhs1 = -p.Jp * thd * ald * s2a - mlr * sa * ald * ald - p.br * thd + tau
    rhs2 = 0.5 * p.Jp * thd * thd * s2a + p.mp * p.g * p.l * sa - p.bp * ald
    det = M * p.Jp - (mlr * ca) ** 2
    if abs(det) < 1e-18:
        raise SingularMassMatrix(f"acceleration system determinant {det}")
    tdd = (p.Jp * rhs1 + mlr * ca * rhs2) / det
    add = (mlr * ca * rhs1 + M * rhs2) / det
    return np.array([thd, ald, tdd, add])


def mechanical_energy(p: PendulumParams, x) -> float:
    """Kinetic plus potential energy of the Lagrangian model family."""
    th, al, thd, ald = x
    sa = math.sin(al)
    ca = math.cos(al)
    kinetic = (0.5 * (p.Jr + p.Jp * sa * sa) * thd * thd
               + 0.5 * p.Jp * ald * ald
               - p.mp * p.l * p.r * ca * thd * ald)
    potential = p.mp * p.g * p.l * ca
    return kinetic + potential


def rk4(f, x, dt):
    """One classical 4th-order Runge-Kutta step of dx/dt = f(x)."""
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(p: PendulumParams, x, u: float, dt: float) -> np.ndarray:
    """Advance the nonlinear plant by dt holding the input constant."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return np.array(_rk4_core(p, float(x[0]), float(x[1]), float(x[2]), float(x[3]),
                              float(u), dt))


def _rk4_core(p, th, al, thd, ald, u, dt):
    # scalar RK4 kept free of array allocations; this is the simulation hot loop
    a1, b1 = _accelerations(p, al, thd, ald, u)
    k1 = (thd, ald, a1, b1)
    h = 0.5 * dt
    a2, b2 = _accelerations(p, al + h * k1[1], thd + h * k1[2], ald + h * k1[3], u)
    k2 = (thd + h * k1[2], ald + h * k1[3], a2, b2)
    a3, b3 = _accelerations(p, al + h * k2[1], thd + h * k2[2], ald + h * k2[3], u)
    k3 = (thd + h * k2[2], ald + h * k2[3], a3, b3)
    a4, b4 = _accelerations(p, al + dt * k3[1], thd + dt * k3[2], ald + dt * k3[3], u)
    k4 = (thd + dt * k3[2], ald + dt * k3[3], a4, b4)
    s = dt / 6.0
    return (th + s * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            al + s * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
            thd + s * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
            ald + s * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3]))


def plant_step(p: PendulumParams, x, u: float, Ts: float, substeps: int = 10) -> np.ndarray:
    """Advance one controller period, subdividing Ts so plant accuracy is
    independent of the control rate."""
    if not Ts > 0:
        raise ValueError(f"Ts must be positive, got {Ts}")
    th, al, thd, ald = float(x[0]), float(x[1]), float(x[2]), float(x[3])
    u = float(u)
    dt = Ts / substeps
    for _ in range(substeps):
        th, al, thd, ald = _rk4_core(p, th, al, thd, ald, u, dt)
    return np.array([th, al, thd, ald])


def linearize(p: PendulumParams) -> ContinuousModel:
    """Closed-form small-angle linearization about the upright equilibrium."""
    mlr = p.mp * p.l * p.r
    km2_rm = p.km**2 / p.Rm
    As = np.array([
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, p.mp**2 * p.l**2 * p.r * p.g / p.Jt,
         -(p.Jp * p.br + km2_rm * p.Jp) / p.Jt, -mlr * p.bp / p.Jt],
        [0.0, p.Jr * p.mp * p.g * p.l / p.Jt,
         -(mlr * p.br + km2_rm * mlr) / p.Jt, -p.Jr * p.bp / p.Jt],
    ])
    Bs = np.array([[0.0], [0.0], [p.km * p.Jp / (p.Rm * p.Jt)],
                   [p.km * mlr / (p.Rm * p.Jt)]])
    return ContinuousModel(As=As, Bs=Bs)


def discretize(c: ContinuousModel, Ts: float) -> DiscreteModel:
    """Zero-order-hold discretization via the augmented matrix exponential.

    exp([[As, Bs], [0, 0]] * Ts) carries A in the top-left block and the input
    integral B in the top-right column."""
    if not Ts > 0:
        raise ValueError(f"Ts must be positive, got {Ts}")
    n = c.As.shape[0]
    m = c.Bs.shape[1]
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = c.As
    aug[:n, n:] = c.Bs
    E = expm(aug * Ts)
    return DiscreteModel(A=E[:n, :n].copy(), B=E[:n, n:].copy(), Ts=Ts)


def nominal_model(p: PendulumParams, Ts: float) -> DiscreteModel:
    """Convenience: discretized linearization used by all controllers."""
    return discretize(linearize(p), Ts)
