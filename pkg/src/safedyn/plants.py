"""Ground-truth simulators for the two benchmarks.

Benchmark 1 is a kinematic single-track vehicle whose steering authority is
limited by road friction; benchmark 2 is a forced, damped Duffing
oscillator. Both are integrated with fixed-step RK4 at the scenario rate,
with the environment (friction, wind, forcing) held constant over each
sample interval.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .numkit import rk4_step, rng_for

# ---------------------------------------------------------------------------
# Benchmark 1: kinematic bicycle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BicycleParams:
    wheelbase_L: float = 2.5
    steer_limit: float = 0.5
    accel_limit: float = 4.0
    gravity_g: float = 9.81
    # lateral drift velocity per m/s of crosswind
    wind_drift: float = 0.05

    def __post_init__(self):
        for name in ("wheelbase_L", "steer_limit", "accel_limit", "gravity_g", "wind_drift"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


def bicycle_deriv(state, control, env, params=BicycleParams()):
    """Kinematic single-track derivative with friction-limited yaw rate.

    ``state`` is ``[px, py, psi, v]`` and ``control`` is ``[delta, a]``; both
    may carry leading batch axes. ``env`` is ``(mu, wind)`` with ``wind`` the
    lateral crosswind speed in m/s. Controls are clamped to their limits, and
    the yaw rate is saturated so that the lateral acceleration ``v * psi_dot``
    never exceeds ``mu * g``.
    """
    x = np.asarray(state, dtype=float)
    u = np.asarray(control, dtype=float)
    mu, wind = env
    psi, v = x[..., 2], x[..., 3]
    delta = np.clip(u[..., 0], -params.steer_limit, params.steer_limit)
    acc = np.clip(u[..., 1], -params.accel_limit, params.accel_limit)
    vpos = np.maximum(v, 0.0)

    yaw = vpos * np.tan(delta) / params.wheelbase_L
    lat_max = np.asarray(mu, dtype=float) * params.gravity_g
    lat = vpos * yaw
    over = np.abs(lat) > lat_max
    yaw = np.where(over, np.sign(yaw) * lat_max / np.where(vpos > 0, vpos, 1.0), yaw)

    out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (4,)))
    out[..., 0] = vpos * np.cos(psi)
    out[..., 1] = vpos * np.sin(psi) + params.wind_drift * np.asarray(wind, dtype=float)
    out[..., 2] = yaw
    # speed never goes negative
    out[..., 3] = np.where((vpos <= 0.0) & (acc < 0.0), 0.0, acc)
    return out


def lateral_acceleration(state, control, mu, params=BicycleParams()):
    """Realized lateral acceleration ``v * psi_dot`` (wind-free)."""
    d = bicycle_deriv(state, control, (mu, 0.0), params)
    return np.maximum(np.asarray(state)[..., 3], 0.0) * d[..., 2]


# ---------------------------------------------------------------------------
# Benchmark 2: Duffing oscillator
# ---------------------------------------------------------------------------

DUFFING_DAMPING = 0.3
DUFFING_FORCING_FREQ = 1.2


def duffing_forcing(t, a_w):
    return a_w * np.cos(DUFFING_FORCING_FREQ * np.asarray(t, dtype=float))


def duffing_deriv(state, u, t, a_w):
    """``q'' + 0.3 q' + q^3 = u + a_w cos(1.2 t)`` as a first-order system."""
    x = np.asarray(state, dtype=float)
    return _duffing(x, np.asarray(u, dtype=float), duffing_forcing(t, a_w))


def _duffing(x, u, w):
    # w is a scalar or carries a trailing axis of length 1
    w = np.asarray(w, dtype=float)
    if w.ndim:
        w = w[..., 0]
    q, qd = x[..., 0], x[..., 1]
    out = np.empty(np.broadcast_shapes(x.shape, np.shape(u)[:-1] + (2,)))
    out[..., 0] = qd
    out[..., 1] = -DUFFING_DAMPING * qd - q ** 3 + u[..., 0] + w
    return out


# ---------------------------------------------------------------------------
# Scenarios and references
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    """One benchmark episode.

    ``friction_schedule`` is a tuple of ``(t_start, mu)`` breakpoints; the
    friction is piecewise constant and switches exactly at the first sample
    whose time reaches ``t_start``. The crosswind is
    ``wind_mean + wind_gust * sin(2 pi t / wind_period + phase)`` with a
    seed-derived phase, clipped to +-6 m/s.
    """

    duration: float = 12.0
    dt: float = 0.02
    friction_schedule: tuple = ((0.0, 0.9),)
    wind_mean: float = 0.0
    wind_gust: float = 0.0
    wind_period: float = 4.0
    a_w: float = 0.0
    seed: int = 0
    x0: tuple | None = None

    def __post_init__(self):
        if not self.dt > 0 or not self.duration > 0:
            raise ValueError("duration and dt must be positive")
        sched = tuple((float(t), float(m)) for t, m in self.friction_schedule)
        if not sched or sched[0][0] > 0.0:
            raise ValueError("friction schedule must start at t=0")
        if any(not 0.3 - 1e-12 <= m <= 0.9 + 1e-12 for _, m in sched):
            raise ValueError("friction must lie in [0.3, 0.9]")
        if any(b[0] <= a[0] for a, b in zip(sched, sched[1:])):
            raise ValueError("friction breakpoints must be increasing")
        if self.a_w < 0:
            raise ValueError("forcing amplitude must be >= 0")
        object.__setattr__(self, "friction_schedule", sched)

    @property
    def steps(self):
        return int(round(self.duration / self.dt))

    def time(self, k):
        return k * self.dt

    def mu_at_step(self, k):
        mu = self.friction_schedule[0][1]
        for t0, m in self.friction_schedule:
            if k >= int(round(t0 / self.dt)):
                mu = m
        return mu

    def wind_at(self, t):
        phase = rng_for(self.seed, 17).uniform(0.0, 2.0 * np.pi)
        w = self.wind_mean + self.wind_gust * np.sin(2.0 * np.pi * t / self.wind_period + phase)
        return float(np.clip(w, -6.0, 6.0))


@dataclass(frozen=True)
class LaneChange:
    """Double lane change: 0 -> width over ``up``, back to 0 over ``down``."""

    width: float = 3.5
    speed: float = 10.0
    up: tuple = (2.5, 5.5)
    down: tuple = (6.0, 9.0)
    sharpness: float = 1.0


def _blend(s, beta):
    # C-infinity step: exactly 0 for s <= 0 and 1 for s >= 1
    s = np.asarray(s, dtype=float)
    inner = (s > 0.0) & (s < 1.0)
    ss = np.where(inner, s, 0.5)
    val = 0.5 * (1.0 + np.tanh(beta * (ss - 0.5) / (ss * (1.0 - ss))))
    return np.where(s >= 1.0, 1.0, np.where(inner, val, 0.0))


def lane_offset(t, path=LaneChange()):
    t = np.asarray(t, dtype=float)
    su = (t - path.up[0]) / (path.up[1] - path.up[0])
    sd = (t - path.down[0]) / (path.down[1] - path.down[0])
    return path.width * (_blend(su, path.sharpness) - _blend(sd, path.sharpness))


def double_lane_change(t, path=LaneChange(), duration=12.0):
    """Desired ``[px, py, psi, v]`` at time ``t`` (clamped to the episode)."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, duration)
    eps = 1e-4
    slope = (lane_offset(t + eps, path) - lane_offset(t - eps, path)) / (2 * eps)
    out = np.stack(np.broadcast_arrays(
        path.speed * t, lane_offset(t, path), np.arctan2(slope, path.speed),
        np.full_like(t, path.speed)), axis=-1)
    return out


def path_lateral_error(state, path=LaneChange()):
    """Signed offset of the vehicle from the path at its current ``px``."""
    x = np.asarray(state, dtype=float)
    return x[..., 1] - lane_offset(x[..., 0] / path.speed, path)


# ---------------------------------------------------------------------------
# Plant objects and episode simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Plant:
    """Uniform interface over the two benchmark simulators.

    ``deriv(x, u, xi, w)`` evaluates the true vector field for measured
    environment ``xi`` and disturbance ``w``.
    """

    name: str
    n: int
    m: int
    n_xi: int
    n_w: int
    u_low: tuple
    u_high: tuple
    bicycle: BicycleParams | None = None

    def clamp(self, u):
        return np.clip(np.asarray(u, dtype=float), self.u_low, self.u_high)

    def deriv(self, x, u, xi, w):
        if self.name == "b1":
            return bicycle_deriv(x, self.clamp(u), (np.asarray(xi)[..., 0], np.asarray(w)[..., 0]),
                                 self.bicycle)
        return _duffing(np.asarray(x, float), self.clamp(u), np.asarray(w, float))

    def environment(self, scenario, k):
        """Measured environment ``xi`` and disturbance ``w`` at sample ``k``."""
        t = scenario.time(k)
        if self.name == "b1":
            wind = scenario.wind_at(t)
            return np.array([scenario.mu_at_step(k)]), np.array([wind])
        return np.zeros(0), np.array([float(duffing_forcing(t, scenario.a_w))])

    def postprocess(self, x):
        if self.name == "b1":
            x = np.array(x, dtype=float)
            x[..., 2] = wrap_angle(x[..., 2])
            x[..., 3] = np.maximum(x[..., 3], 0.0)
        return x


def bicycle_plant(params=BicycleParams()):
    return Plant("b1", 4, 2, 1, 1, (-params.steer_limit, -params.accel_limit),
                 (params.steer_limit, params.accel_limit), params)


def duffing_plant(u_max=5.0):
    return Plant("b2", 2, 1, 0, 1, (-u_max,), (u_max,))


def make_plant(benchmark):
    return {"b1": bicycle_plant, "b2": duffing_plant}[benchmark]()


@dataclass
class Trajectory:
    """Sampled episode. Row ``k`` of ``u``/``w``/``xi`` acts on ``[t_k, t_{k+1})``;
    the final row repeats the last applied values."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    w: np.ndarray
    xi: np.ndarray
    failed: str | None = None
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    def to_csv(self, path):
        n, m, k = self.x.shape[1], self.u.shape[1], self.w.shape[1]
        header = ["t"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)] \
            + [f"w{i}" for i in range(k)]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            for row in np.column_stack([self.t, self.x, self.u, self.w]):
                wr.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, data = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
        cols = {p: [i for i, h in enumerate(header) if h.startswith(p) and h[1:].isdigit()]
                for p in "xuw"}
        return cls(data[:, 0], data[:, cols["x"]], data[:, cols["u"]], data[:, cols["w"]],
                   np.zeros((len(data), 0)))


def simulate_episode(plant, controller, scenario, x0=None, disturbance=None):
    """Integrate ``plant`` in closed loop with ``controller``.

    ``controller(k, t, x, xi)`` returns the control for ``[t_k, t_{k+1})``.
    ``disturbance(k, t)`` overrides the scenario disturbance if given. A
    non-finite control or state stops the episode and records the cause in
    ``Trajectory.failed``; the arrays are then truncated at that sample.
    """
    K = scenario.steps
    dt = scenario.dt
    x = np.asarray(x0 if x0 is not None else scenario.x0, dtype=float).copy()
    ts, xs, us, ws, xis = [], [], [], [], []
    failed = None
    for k in range(K + 1):
        t = scenario.time(k)
        xi, w = plant.environment(scenario, k)
        if disturbance is not None:
            w = np.atleast_1d(np.asarray(disturbance(k, t), dtype=float))
        if k < K:
            u = np.asarray(controller(k, t, x.copy(), xi.copy()), dtype=float)
            if not np.all(np.isfinite(u)):
                failed = f"non-finite control at t={t:g}"
                break
            u = plant.clamp(u)
        ts.append(t)
        xs.append(x.copy())
        us.append(u)
        ws.append(w)
        xis.append(xi)
        if k == K:
            break
        try:
            x = rk4_step(lambda _t, s: plant.deriv(s, u, xi, w), x, t, dt)
        except FloatingPointError as exc:
            failed = f"non-finite state at t={t:g}: {exc}"
            break
        x = plant.postprocess(x)
        if not np.all(np.isfinite(x)):
            failed = f"non-finite state at t={t + dt:g}"
            break
    return Trajectory(np.array(ts), np.array(xs), np.array(us), np.array(ws),
                      np.array(xis).reshape(len(ts), -1), failed)


def scenario_env_arrays(plant, scenario):
    """Environment and disturbance samples for every step of ``scenario``."""
    env = [plant.environment(scenario, k) for k in range(scenario.steps + 1)]
    xi = np.array([e[0] for e in env]).reshape(len(env), -1)
    w = np.array([e[1] for e in env]).reshape(len(env), -1)
    return xi, w


# ---------------------------------------------------------------------------
# Training data generation
# ---------------------------------------------------------------------------


def _smooth_noise(rng, steps, dt, dims, corr_time, scale):
    """First-order filtered white noise, unit-ish variance times ``scale``."""
    a = math.exp(-dt / corr_time)
    e = rng.standard_normal((steps, dims)) * math.sqrt(1 - a * a)
    out = np.empty((steps, dims))
    s = rng.standard_normal(dims)
    for k in range(steps):
        s = a * s + e[k]
        out[k] = s
    return out * np.asarray(scale)


def random_training_scenario(benchmark, seed, duration=10.0, dt=0.02):
    rng = rng_for(seed, 1)
    if benchmark == "b1":
        t_switch = float(rng.uniform(1.0, duration - 1.0))
        mus = rng.uniform(0.3, 0.9, size=2)
        return Scenario(duration=duration, dt=dt,
                        friction_schedule=((0.0, float(mus[0])), (t_switch, float(mus[1]))),
                        wind_mean=float(rng.uniform(-4.0, 4.0)),
                        wind_gust=float(rng.uniform(0.0, 2.0)), seed=seed,
                        x0=(0.0, float(rng.uniform(-1.0, 4.5)), float(rng.uniform(-0.15, 0.15)),
                            float(rng.uniform(7.0, 12.0))))
    return Scenario(duration=duration, dt=dt, a_w=float(rng.uniform(0.0, 1.0)), seed=seed,
                    x0=(float(rng.uniform(-1.5, 1.5)), float(rng.uniform(-1.0, 1.0))))


def zero_order_hold(ctrl, hold_steps):
    """Re-evaluate ``ctrl`` every ``hold_steps`` samples and hold in between."""
    held = {}

    def wrapped(k, t, x, xi):
        if k % hold_steps == 0 or "u" not in held:
            held["u"] = ctrl(k, t, x, xi)
        return held["u"]
    return wrapped


# bicycle exploration: heading-command clip (rad), heading gain, steering noise std (rad)
EXPLORE_HEADING = 0.3
EXPLORE_STEER_GAIN = 0.8
EXPLORE_STEER_NOISE = 0.05


def exploration_controller(benchmark, seed, scenario, plant, hold_steps=5):
    """Noisy feedback controller used to collect identification data.

    Bicycle: proportional heading/lateral tracking of random lane targets
    plus speed regulation around a random cruise speed. Duffing: PD
    regulation around random setpoints plus filtered excitation. Controls
    are held for ``hold_steps`` samples, matching the controller rate.
    """
    rng = rng_for(seed, 2)
    K = scenario.steps
    dt = scenario.dt
    if benchmark == "b1":
        noise = _smooth_noise(rng, K, dt, 2, 0.3, (EXPLORE_STEER_NOISE, 1.2))
        n_seg = 4
        seg_t = np.sort(rng.uniform(0, scenario.duration, n_seg))
        seg_y = rng.uniform(-1.0, 4.5, n_seg)
        v_cruise = rng.uniform(7.0, 12.0)

        def ctrl(k, t, x, xi):
            idx = np.searchsorted(seg_t, t)
            y_tgt = seg_y[idx - 1] if idx > 0 else x[1]
            psi_des = np.clip(0.25 * (y_tgt - x[1]), -EXPLORE_HEADING, EXPLORE_HEADING)
            delta = EXPLORE_STEER_GAIN * (psi_des - x[2]) + noise[k, 0]
            acc = 0.8 * (v_cruise - x[3]) + noise[k, 1]
            return plant.clamp([delta, acc])
        return zero_order_hold(ctrl, hold_steps)

    noise = _smooth_noise(rng, K, dt, 1, 0.5, (1.5,))
    seg_t = np.sort(rng.uniform(0, scenario.duration, 3))
    seg_q = rng.uniform(-1.5, 1.5, 3)

    def ctrl(k, t, x, xi):
        idx = np.searchsorted(seg_t, t)
        q_tgt = seg_q[idx - 1] if idx > 0 else 0.0
        u = q_tgt ** 3 + 1.5 * (q_tgt - x[0]) - 0.8 * x[1] + noise[k, 0]
        return plant.clamp([u])
    return zero_order_hold(ctrl, hold_steps)


def training_trajectories(benchmark, count, seed, duration=10.0, dt=0.02):
    """Identification data: ``count`` closed-loop exploration episodes."""
    plant = make_plant(benchmark)
    out = []
    for i in range(count):
        s = int(rng_for(seed, 3, i).integers(2 ** 31))
        sc = random_training_scenario(benchmark, s, duration, dt)
        out.append(simulate_episode(plant, exploration_controller(benchmark, s, sc, plant), sc))
    return out
