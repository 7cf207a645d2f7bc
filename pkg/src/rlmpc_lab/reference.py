"""Reference trajectories, crucial-point downsampling, window regeneration.

The tracked output is the arm angle only; pendulum-angle and velocity
references are identically zero and never appear here. A prediction window W
holds the next N reference samples at the controller rate Ts; the crucial
points C are the same trajectory sampled every CTs >= Ts, spanning one extra
sample past the window so interpolation covers the full horizon."""

import math
from dataclasses import dataclass

import numpy as np

KINDS = ("sine", "square", "sawtooth")


class IndivisibleSampling(ValueError):
    """CTs/Ts is not a positive integer or N is not divisible by it."""


@dataclass(frozen=True)
class RefTrajectory:
    kind: str
    amplitude: float        # rad
    angular_frequency: float  # rad/s
    offset: float = 0.0     # rad
    phase: float = 0.0      # rad

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.amplitude < 0:
            raise ValueError(f"amplitude must be non-negative, got {self.amplitude}")
        if not self.angular_frequency > 0:
            raise ValueError(f"angular_frequency must be positive, got {self.angular_frequency}")


@dataclass(frozen=True)
class CrucialPoints:
    """Downsampled reference samples spanning [k*Ts, k*Ts + N*Ts]."""

    c: np.ndarray
    Ts: float
    CTs: float
    N: int

    def __post_init__(self):
        ratio = _ratio(self.Ts, self.CTs, self.N)
        if len(self.c) != self.N // ratio + 1:
            raise ValueError(f"expected {self.N // ratio + 1} crucial points, got {len(self.c)}")


def _ratio(Ts, CTs, N):
    """Validated integer CTs/Ts with N divisible by it."""
    if not (Ts > 0 and CTs > 0 and N >= 1):
        raise IndivisibleSampling(f"need Ts, CTs > 0 and N >= 1, got {Ts}, {CTs}, {N}")
    ratio = CTs / Ts
    nearest = round(ratio)
    if nearest < 1 or abs(ratio - nearest) > 1e-9 * max(1.0, abs(ratio)):
        raise IndivisibleSampling(f"CTs/Ts = {ratio} is not a positive integer")
    if N % nearest != 0:
        raise IndivisibleSampling(f"N = {N} is not divisible by CTs/Ts = {nearest}")
    return nearest


def sample(traj: RefTrajectory, t: float) -> float:
    """Closed-form waveform value at time t."""
    arg = traj.angular_frequency * t + traj.phase
    if traj.kind == "sine":
        wave = math.sin(arg)
    elif traj.kind == "square":
        wave = 1.0 if math.sin(arg) >= 0.0 else -1.0
    else:  # sawtooth: ramp from -1 to 1 over each period
        wave = 2.0 * ((arg / (2.0 * math.pi)) % 1.0) - 1.0
    return traj.offset + traj.amplitude * wave


def sample_many(traj: RefTrajectory, t: np.ndarray) -> np.ndarray:
    """Vectorized :func:`sample`."""
    arg = traj.angular_frequency * np.asarray(t, dtype=float) + traj.phase
    if traj.kind == "sine":
        wave = np.sin(arg)
    elif traj.kind == "square":
        wave = np.where(np.sin(arg) >= 0.0, 1.0, -1.0)
    else:
        wave = 2.0 * np.mod(arg / (2.0 * np.pi), 1.0) - 1.0
    return traj.offset + traj.amplitude * wave


def full_window(traj: RefTrajectory, k: int, Ts: float, N: int) -> np.ndarray:
    """N reference samples ahead of step k at the controller rate."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    return sample_many(traj, (k + np.arange(N)) * Ts)


def downsample(traj: RefTrajectory, k: int, Ts: float, CTs: float, N: int) -> CrucialPoints:
    """Crucial points c[j] = f(k*Ts + j*CTs), j = 0 .. N/(CTs/Ts)."""
    ratio = _ratio(Ts, CTs, N)
    t = k * Ts + np.arange(N // ratio + 1) * CTs
    return CrucialPoints(c=sample_many(traj, t), Ts=Ts, CTs=CTs, N=N)


def regenerate_window(cp: CrucialPoints) -> np.ndarray:
    """Rebuild the N-sample prediction window from the crucial points.

    Piecewise-linear interpolation between consecutive points, exact at every
    crucial-point index; the trailing point anchors the final segment."""
    ratio = _ratio(cp.Ts, cp.CTs, cp.N)
    if ratio == 1:
        return np.asarray(cp.c[:cp.N], dtype=float).copy()
    nodes = np.arange(len(cp.c)) * ratio
    return np.interp(np.arange(cp.N), nodes, cp.c)


def random_reference(rng: np.random.Generator,
                     amplitude_range=(0.5, 1.2),
                     frequency_range=(0.5, 2.0)) -> RefTrajectory:
    """Random sine used for training episodes; seedable and uniform in
    amplitude, angular frequency, and phase."""
    return RefTrajectory(kind="sine",
                         amplitude=rng.uniform(*amplitude_range),
                         angular_frequency=rng.uniform(*frequency_range),
                         offset=0.0,
                         phase=rng.uniform(0.0, 2.0 * math.pi))
