"""Discrete cascade PI speed control loop and its tuning objectives.

The plant is a surrogate for a field-oriented motor drive.  An outer PI
loop on speed produces the q-axis current reference.  Two inner PI loops
drive the d- and q-axis currents through first-order electrical dynamics,
and the q current produces torque on an inertia with viscous damping.
Inner-loop voltages reach the plant one sample late, and the d axis picks
up a small speed-dependent cross-coupling from the q current.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .safe_sets import BoxDomain


class ControlSimError(ValueError):
    pass


class GainRangeError(ControlSimError):
    pass


class UnsafeSeedError(ControlSimError):
    pass


GAIN_NAMES = ("speed_kp", "speed_ki", "d_axis_kp", "d_axis_ki", "q_axis_kp", "q_axis_ki")
GAIN_LOWER = np.array([0.01, 0.01, 0.1, 1.0, 0.1, 1.0])
GAIN_UPPER = np.array([0.5, 0.5, 1.0, 200.0, 1.0, 200.0])
GAIN_DOMAIN = BoxDomain(GAIN_LOWER, GAIN_UPPER)

BLOWUP_LIMIT = 1e9
# sustained speed ripple above this fraction of |reference| in the final
# window marks a limit cycle
RIPPLE_FRACTION = 0.01


@dataclass(frozen=True)
class ControllerGains:
    speed_kp: float = 0.1
    speed_ki: float = 0.2
    d_axis_kp: float = 0.5
    d_axis_ki: float = 50.0
    q_axis_kp: float = 0.5
    q_axis_ki: float = 50.0
    check_range: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        vec = self.as_array()
        if not np.all(np.isfinite(vec)) or np.any(vec <= 0):
            raise GainRangeError(f"gains must be finite and positive, got {vec}")
        if self.check_range and not GAIN_DOMAIN.contains(vec, tol=1e-12):
            bad = [n for n, v, lo, hi in zip(GAIN_NAMES, vec, GAIN_LOWER, GAIN_UPPER) if not lo <= v <= hi]
            raise GainRangeError(f"gains out of range: {bad}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in GAIN_NAMES], dtype=float)

    @classmethod
    def from_array(cls, x, check_range: bool = True) -> "ControllerGains":
        x = np.asarray(x, dtype=float)
        if x.shape != (6,):
            raise GainRangeError(f"expected 6 gains, got shape {x.shape}")
        return cls(*map(float, x), check_range=check_range)


@dataclass(frozen=True)
class CascadePlant:
    d_time_constant: float = 5e-3
    q_time_constant: float = 5e-3
    resistance: float = 0.2
    inertia: float = 0.01
    damping: float = 0.05
    torque_gain: float = 1.0
    coupling: float = 0.005
    sample_period: float = 1e-3
    horizon: float = 3.0
    reference: float = 100.0
    saturation: float = 10.0
    current_limit: float = 10.0
    disturbance_std: float = 0.0

    def __post_init__(self):
        positive = ("d_time_constant", "q_time_constant", "resistance", "inertia",
                    "torque_gain", "sample_period", "horizon", "saturation", "current_limit")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ControlSimError(f"{name} must be positive")
        if self.damping < 0 or self.disturbance_std < 0:
            raise ControlSimError("damping and disturbance_std must be nonnegative")
        if self.horizon < 10 * self.dominant_time_constant:
            raise ControlSimError("horizon must cover at least ten dominant time constants")
        if self.sample_period >= self.horizon:
            raise ControlSimError("sample_period must be shorter than the horizon")

    @property
    def dominant_time_constant(self) -> float:
        mech = self.inertia / self.damping if self.damping > 0 else 0.0
        return max(self.d_time_constant, self.q_time_constant, mech)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.sample_period))


@dataclass
class Trajectory:
    time: np.ndarray
    reference: float
    speed: np.ndarray
    i_d: np.ndarray
    i_q: np.ndarray
    iq_ref: np.ndarray
    v_d: np.ndarray
    v_q: np.ndarray
    sample_period: float
    unstable: bool = False

    @property
    def horizon(self) -> float:
        return self.time.size * self.sample_period

    def control_energy(self, until: float = 1.0) -> float:
        """Per-sample sum of squared inner-loop voltages with t <= until."""
        m = self.time <= until + 1e-12
        return float(np.sum(self.v_d[m] ** 2 + self.v_q[m] ** 2))


def _clamp(v: float, lim: float) -> float:
    return lim if v > lim else (-lim if v < -lim else v)


def simulate_step_response(
    gains: ControllerGains,
    plant: CascadePlant = CascadePlant(),
    reference: float | None = None,
    horizon: float | None = None,
    rng: np.random.Generator | None = None,
    bypass_outer: bool = False,
) -> Trajectory:
    """Step response of the cascade loop from rest.

    PI integrators accumulate ``error * T`` and are clamped so that the
    integral term alone cannot exceed the loop's output limit.  With
    ``bypass_outer`` the speed loop is removed and the q-axis current
    reference equals ``reference``.
    """
    ref = plant.reference if reference is None else float(reference)
    if horizon is not None:
        plant = replace(plant, horizon=float(horizon))
    if plant.disturbance_std > 0 and rng is None:
        raise ControlSimError("a disturbance needs an rng")
    T = plant.sample_period
    n = plant.n_steps
    kps, kis, kpd, kid, kpq, kiq = gains.as_array()
    sat, isat = plant.saturation, plant.current_limit
    ad = math.exp(-T / plant.d_time_constant)
    aq = math.exp(-T / plant.q_time_constant)
    bd = (1.0 - ad) / plant.resistance
    bq = (1.0 - aq) / plant.resistance
    mech = T / plant.inertia
    noise = rng.normal(0.0, plant.disturbance_std, n) if plant.disturbance_std > 0 else np.zeros(n)

    out = np.zeros((6, n))
    w = i_d = i_q = 0.0
    int_s = int_d = int_q = 0.0
    vd_prev = vq_prev = 0.0
    lim_s, lim_d, lim_q = isat / kis, sat / kid, sat / kiq
    unstable = False
    last = n
    for k in range(n):
        if bypass_outer:
            iq_ref = ref
        else:
            es = ref - w
            int_s = _clamp(int_s + es * T, lim_s)
            iq_ref = _clamp(kps * es + kis * int_s, isat)
        eq = iq_ref - i_q
        int_q = _clamp(int_q + eq * T, lim_q)
        vq = _clamp(kpq * eq + kiq * int_q, sat)
        ed = -i_d
        int_d = _clamp(int_d + ed * T, lim_d)
        vd = _clamp(kpd * ed + kid * int_d, sat)

        i_d_new = ad * i_d + bd * (vd_prev + plant.coupling * w * i_q)
        i_q = aq * i_q + bq * vq_prev
        i_d = i_d_new
        vd_prev, vq_prev = vd, vq
        w = w + mech * (plant.torque_gain * i_q - plant.damping * w + noise[k])

        out[:, k] = (w, i_d, i_q, iq_ref, vd, vq)
        if not (abs(w) < BLOWUP_LIMIT and abs(i_d) < BLOWUP_LIMIT and abs(i_q) < BLOWUP_LIMIT):
            unstable = True
            last = k + 1
            break
    if last < n:
        out[:, last:] = out[:, last - 1 : last]

    speed = out[0]
    if not unstable and ref != 0.0:
        unstable = _has_sustained_ripple(speed, ref)
    return Trajectory(
        time=np.arange(1, n + 1) * T,
        reference=ref,
        speed=speed,
        i_d=out[1],
        i_q=out[2],
        iq_ref=out[3],
        v_d=out[4],
        v_q=out[5],
        sample_period=T,
        unstable=unstable,
    )


def _has_sustained_ripple(y: np.ndarray, ref: float) -> bool:
    tail = y[int(0.9 * y.size) :]
    if tail.size < 3:
        return False
    t = np.arange(tail.size)
    resid = tail - np.polyval(np.polyfit(t, tail, 1), t)
    return float(np.ptp(resid)) > RIPPLE_FRACTION * abs(ref)


@dataclass(frozen=True)
class StepResponseMetrics:
    settling_time: float
    overshoot: float
    steady_state_error: float
    control_energy: float
    unsettled: bool = False
    unstable: bool = False

    def __post_init__(self):
        vals = (self.settling_time, self.overshoot, self.steady_state_error, self.control_energy)
        if any(not v >= 0 for v in vals):
            raise ControlSimError(f"metrics must be nonnegative, got {vals}")


def compute_metrics(
    response: np.ndarray,
    reference: float,
    sample_period: float,
    control_energy: float = 0.0,
) -> StepResponseMetrics:
    """2% settling time, overshoot and steady-state error of a step response.

    Sample ``k`` is taken at ``(k + 1) * sample_period``, as produced by
    :func:`simulate_step_response`.  The band is anchored on the mean of the
    final 10% of the response, and the settling time is the time of the
    last sample outside it.
    """
    y = np.asarray(response, dtype=float)
    if y.size == 0:
        raise ControlSimError("empty response")
    n = y.size
    horizon = n * sample_period
    window = int(0.9 * n)
    ss = float(y[window:].mean())
    outside = np.flatnonzero(np.abs(y - ss) > 0.02 * abs(ss))
    unsettled = bool(outside.size and outside[-1] >= window)
    if unsettled:
        t_s = horizon
    else:
        t_s = 0.0 if outside.size == 0 else float((outside[-1] + 1) * sample_period)
    overshoot = max(0.0, float(y.max()) - reference) if reference >= 0 else max(0.0, reference - float(y.min()))
    return StepResponseMetrics(t_s, overshoot, abs(ss - reference), float(control_energy), unsettled)


def trajectory_metrics(traj: Trajectory, plant: CascadePlant = CascadePlant()) -> StepResponseMetrics:
    """Metrics of a simulated trajectory; unstable runs get worst-case values."""
    energy = traj.control_energy(1.0)
    if not traj.unstable:
        return compute_metrics(traj.speed, traj.reference, traj.sample_period, energy)
    n_first = int(np.sum(traj.time <= 1.0 + 1e-12))
    ref = abs(traj.reference)
    y = traj.speed
    worst_energy = 2.0 * plant.saturation**2 * n_first if math.isfinite(plant.saturation) else energy
    return StepResponseMetrics(
        settling_time=traj.horizon,
        overshoot=max(ref, float(np.max(np.abs(y))) - ref),
        steady_state_error=max(ref, abs(float(y[-1]) - traj.reference)),
        control_energy=max(energy, worst_energy) if math.isfinite(energy) else worst_energy,
        unsettled=True,
        unstable=True,
    )


@dataclass(frozen=True)
class ObjectiveWeights:
    w_s: float = 20.0
    w_o: float = 1.5
    w_e: float = 4.0
    t_0: float = 2.5
    c_e0: float = 100.0
    w_e_prime: float = 40.0
    c_u0: float = 100.0
    w_u: float = 0.001


def performance_J(metrics: StepResponseMetrics, weights: ObjectiveWeights = ObjectiveWeights()) -> float:
    vals = (metrics.settling_time, metrics.overshoot, metrics.steady_state_error)
    if not all(math.isfinite(v) for v in vals):
        raise ControlSimError("metrics must be finite")
    return (
        weights.w_s * (weights.t_0 - metrics.settling_time)
        - weights.w_o * metrics.overshoot
        - weights.w_e * metrics.steady_state_error
    )


def safety_Ge(metrics: StepResponseMetrics, c_e0: float = 100.0, w_e_prime: float = 40.0) -> float:
    return c_e0 - w_e_prime * metrics.steady_state_error


def safety_Gu(metrics: StepResponseMetrics, c_u0: float = 100.0, w_u: float = 0.001) -> float:
    return c_u0 - w_u * metrics.control_energy


@dataclass(frozen=True)
class TuningEvaluation:
    gains: ControllerGains
    metrics: StepResponseMetrics
    J: float
    G_e: float
    G_u: float

    def values(self) -> np.ndarray:
        return np.array([self.J, self.G_e, self.G_u])


@dataclass(frozen=True)
class TuningProblem:
    """Six-gain tuning task: maximize J subject to G_e >= h_e and G_u >= h_u."""

    plant: CascadePlant = CascadePlant()
    weights: ObjectiveWeights = ObjectiveWeights()
    thresholds: tuple[float, float] = (0.0, 0.0)
    seed_gains: ControllerGains = ControllerGains()
    domain: BoxDomain = GAIN_DOMAIN

    function_names = ("J", "G_e", "G_u")

    def evaluate_gains(self, gains: ControllerGains, rng: np.random.Generator | None = None) -> TuningEvaluation:
        traj = simulate_step_response(gains, self.plant, rng=rng)
        m = trajectory_metrics(traj, self.plant)
        w = self.weights
        return TuningEvaluation(gains, m, performance_J(m, w), safety_Ge(m, w.c_e0, w.w_e_prime), safety_Gu(m, w.c_u0, w.w_u))

    def __call__(self, x, rng: np.random.Generator | None = None) -> np.ndarray:
        """[J, G_e, G_u] at a gain vector."""
        return self.evaluate_gains(ControllerGains.from_array(self.domain.clip(np.asarray(x, float))), rng).values()

    def seed_evaluation(self) -> TuningEvaluation:
        return self.evaluate_gains(self.seed_gains)


def tuning_problem(
    plant: CascadePlant = CascadePlant(),
    weights: ObjectiveWeights = ObjectiveWeights(),
    thresholds: tuple[float, float] = (0.0, 0.0),
    seed_gains: ControllerGains = ControllerGains(),
) -> TuningProblem:
    """Build the tuning task after checking that the seed gains are stable and safe."""
    problem = TuningProblem(plant, weights, tuple(float(h) for h in thresholds), seed_gains)
    ev = problem.seed_evaluation()
    if ev.metrics.unstable:
        raise UnsafeSeedError(f"seed gains {seed_gains} destabilize the plant")
    if ev.G_e < problem.thresholds[0] or ev.G_u < problem.thresholds[1]:
        raise UnsafeSeedError(f"seed gains are unsafe: G_e={ev.G_e:.3f}, G_u={ev.G_u:.3f}")
    return problem


def write_trajectory_csv(path: str | Path, traj: Trajectory, header: str | None = None) -> Path:
    """Time series for plotting: time, reference, response and both voltages."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["time", "reference", "response", "iq_ref", "i_d", "i_q", "control_d", "control_q"])
        for row in zip(traj.time, np.full(traj.time.size, traj.reference), traj.speed,
                       traj.iq_ref, traj.i_d, traj.i_q, traj.v_d, traj.v_q):
            w.writerow([f"{v:.9g}" for v in row])
    return path


def plant_echo(plant: CascadePlant) -> dict:
    return asdict(plant)
