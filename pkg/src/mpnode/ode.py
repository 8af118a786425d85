"""Deterministic time integration: explicit Euler, classical RK4, Tsit5.

All steppers are pure functions and work both on plain numpy arrays and on
traced values from :mod:`mpnode.autodiff`, so gradients can flow through the
unrolled fixed-step schemes. Every stage output is checked for finiteness:
diverging rollouts of chaotic systems must fail loudly, not propagate NaNs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import MaxStepsExceeded, NonFiniteState

EULER = "euler"
RK4 = "rk4"
TSIT5 = "tsit5"
METHODS = (EULER, RK4, TSIT5)

# Tsitouras 5(4) pair: 7 stages, FSAL. The last row of A doubles as the
# 5th-order weights; _TSIT5_E holds the embedded error coefficients.
_TSIT5_C = np.array([0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0])
_TSIT5_A = [
    [],
    [0.161],
    [-0.008480655492356989, 0.335480655492357],
    [2.8971530571054935, -6.359448489975075, 4.3622954328695815],
    [5.325864828439257, -11.748883564062828, 7.4955393428898365,
     -0.09249506636175525],
    [5.86145544294642, -12.92096931784711, 8.159367898576159,
     -0.071584973281401, -0.028269050394068383],
    [0.09646076681806523, 0.01, 0.4798896504144996, 1.379008574103742,
     -3.290069515436081, 2.324710524099774],
]
_TSIT5_B = np.array([0.09646076681806523, 0.01, 0.4798896504144996,
                     1.379008574103742, -3.290069515436081,
                     2.324710524099774, 0.0])
_TSIT5_E = np.array([-0.00178001105222577714, -0.0008164344596567469,
                     0.007880878010261995, -0.1447110071732629,
                     0.5823571654525552, -0.45808210592918697,
                     0.015151515151515152])


@dataclass
class IntegratorConfig:
    """Fixed-step settings plus optional adaptivity for Tsit5.

    ``dt`` is the step for fixed-step marching (and the initial trial step
    when adaptive). ``adaptive_tolerances`` is an (abs_tol, rel_tol) pair;
    setting it switches Tsit5 to step-size control.
    """

    method: str = RK4
    dt: float = 0.01
    adaptive_tolerances: Optional[tuple] = None
    max_steps: int = 10_000_000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.adaptive_tolerances is not None:
            abs_tol, rel_tol = self.adaptive_tolerances
            if not (abs_tol > 0 and rel_tol > 0):
                raise ValueError("adaptive tolerances must both be positive")
            if self.method != TSIT5:
                raise ValueError("adaptive stepping is only available for tsit5")


@dataclass
class Trajectory:
    """Time-stamped sequence of states: ``states[i]`` holds q(times[i])."""

    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).ravel()
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states.reshape(-1, 1)
        self.states = states
        if self.times.size != self.states.shape[0]:
            raise ValueError(
                f"{self.times.size} times but {self.states.shape[0]} state rows"
            )
        if self.times.size >= 2 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")
        if not np.all(np.isfinite(self.times)) or not np.all(np.isfinite(self.states)):
            raise ValueError("trajectory contains non-finite entries")

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def num_samples(self):
        return self.times.size

    def __len__(self):
        return self.times.size


def _check_finite(q, t, what="state"):
    v = ad.value_of(q)
    if not np.all(np.isfinite(v)):
        raise NonFiniteState(f"non-finite {what} at t={t:.6g}", t=t)


def step(rhs, q, t, dt, method):
    """One explicit step of the named scheme; raises on non-finite stages."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if method == EULER:
        k1 = rhs(q, t)
        _check_finite(k1, t, "stage")
        out = q + dt * k1
    elif method == RK4:
        k1 = rhs(q, t)
        _check_finite(k1, t, "stage")
        k2 = rhs(q + (0.5 * dt) * k1, t + 0.5 * dt)
        _check_finite(k2, t, "stage")
        k3 = rhs(q + (0.5 * dt) * k2, t + 0.5 * dt)
        _check_finite(k3, t, "stage")
        k4 = rhs(q + dt * k3, t + dt)
        _check_finite(k4, t, "stage")
        out = q + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    elif method == TSIT5:
        out, _ = _tsit5_step(rhs, q, t, dt)
    else:
        raise ValueError(f"unknown method {method!r}")
    _check_finite(out, t + dt)
    return out


def _tsit5_step(rhs, q, t, dt):
    """Advance with the 7-stage pair; returns (q_new, stages)."""
    ks = []
    for i in range(7):
        qi = q
        for aij, kj in zip(_TSIT5_A[i], ks):
            if aij != 0.0:
                qi = qi + (dt * aij) * kj
        ki = rhs(qi, t + _TSIT5_C[i] * dt)
        _check_finite(ki, t, "stage")
        ks.append(ki)
    out = q
    for bi, ki in zip(_TSIT5_B, ks):
        if bi != 0.0:
            out = out + (dt * bi) * ki
    return out, ks


def rollout(rhs, q0, times, method):
    """States at every entry of ``times`` by fixed stepping between them.

    Works on traced values; returns a list of states (q0 first).
    """
    states = [q0]
    q = q0
    for i in range(len(times) - 1):
        q = step(rhs, q, times[i], times[i + 1] - times[i], method)
        states.append(q)
    return states


def _fixed_grid(t0, t1, dt):
    """Uniform grid from t0 to t1; a final partial step lands exactly on t1."""
    span = t1 - t0
    n_full = int(np.floor(span / dt + 1e-12))
    times = t0 + dt * np.arange(n_full + 1)
    remainder = span - n_full * dt
    if remainder > 1e-12 * max(abs(t1), 1.0):
        times = np.append(times, t1)
    else:
        times[-1] = t1
    return times


def integrate(rhs, q0, t0, t1, config, sample_times=None):
    """Solve from t0 to t1 and return the :class:`Trajectory`.

    Fixed-step methods march a uniform grid (plus one final partial step so
    the result ends exactly at t1). Adaptive Tsit5 returns the accepted
    steps, or — when ``sample_times`` is given — the solution interpolated
    onto those times with a cubic Hermite using the stage derivatives.
    """
    if not t1 > t0:
        raise ValueError("t1 must exceed t0")
    q0 = np.asarray(q0, dtype=float)
    if config.adaptive_tolerances is not None:
        return _integrate_adaptive(rhs, q0, t0, t1, config, sample_times)
    times = _fixed_grid(t0, t1, config.dt)
    if times.size - 1 > config.max_steps:
        raise MaxStepsExceeded(
            f"{times.size - 1} steps needed but max_steps={config.max_steps}"
        )
    states = rollout(rhs, q0, times, config.method)
    return Trajectory(times, np.stack(states))


def _integrate_adaptive(rhs, q0, t0, t1, config, sample_times):
    abs_tol, rel_tol = config.adaptive_tolerances
    t, q = t0, q0
    dt = min(config.dt, t1 - t0)
    accepted_t = [t0]
    accepted_q = [q0]
    derivs = [np.asarray(rhs(q0, t0), dtype=float)]
    n_steps = 0
    while t < t1 - 1e-12 * max(abs(t1), 1.0):
        if n_steps >= config.max_steps:
            raise MaxStepsExceeded(
                f"adaptive solve exceeded max_steps={config.max_steps}"
            )
        dt = min(dt, t1 - t)
        q_new, ks = _tsit5_step(rhs, q, t, dt)
        err = dt * sum(ei * ki for ei, ki in zip(_TSIT5_E, ks))
        scale = abs_tol + rel_tol * np.maximum(np.abs(q), np.abs(q_new))
        err_norm = float(np.sqrt(np.mean((err / scale) ** 2)))
        n_steps += 1
        if err_norm <= 1.0:
            t = t + dt
            q = q_new
            accepted_t.append(t)
            accepted_q.append(q)
            derivs.append(np.asarray(ks[-1], dtype=float))  # FSAL stage = f(t, q_new)
        factor = 0.9 * err_norm ** -0.2 if err_norm > 0 else 5.0
        dt = dt * min(5.0, max(0.2, factor))
    times = np.asarray(accepted_t)
    states = np.stack(accepted_q)
    if sample_times is None:
        return Trajectory(times, states)
    sample_times = np.asarray(sample_times, dtype=float)
    if sample_times.min() < t0 - 1e-12 or sample_times.max() > t1 + 1e-12:
        raise ValueError("sample_times must lie within [t0, t1]")
    resampled = _hermite_interp(times, states, np.stack(derivs), sample_times)
    return Trajectory(sample_times, resampled)


def _hermite_interp(times, states, derivs, query):
    """Cubic Hermite interpolation using stored endpoint derivatives."""
    idx = np.clip(np.searchsorted(times, query, side="right") - 1, 0, len(times) - 2)
    h = times[idx + 1] - times[idx]
    s = ((query - times[idx]) / h)[:, None]
    q0, q1 = states[idx], states[idx + 1]
    d0, d1 = derivs[idx] * h[:, None], derivs[idx + 1] * h[:, None]
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    return h00 * q0 + h10 * d0 + h01 * q1 + h11 * d1


@dataclass
class TestProblem:
    """An ODE with a known solution, for convergence measurement."""

    rhs: object
    q0: np.ndarray
    t0: float
    t1: float
    exact_final: np.ndarray


def linear_decay_problem(rate=1.0, q0=1.0, horizon=1.0):
    """dq/dt = -rate*q, the standard order-verification problem."""
    q0 = np.atleast_1d(np.asarray(q0, dtype=float))
    return TestProblem(
        rhs=lambda q, t: -rate * q,
        q0=q0,
        t0=0.0,
        t1=horizon,
        exact_final=q0 * np.exp(-rate * horizon),
    )


def convergence_order(method, problem, dts=None):
    """Slope of log(final error) against log(dt) over a ladder of steps.

    The default ladders keep every error inside the asymptotic regime: for
    Tsit5 the finest steps are excluded because its final error drops to
    machine precision (the scheme's leading error term on smooth problems is
    unusually small), which would contaminate the slope.
    """
    if dts is None:
        span = problem.t1 - problem.t0
        divisors = (8, 16, 32, 64) if method == TSIT5 else (8, 16, 32, 64, 128)
        dts = [span / n for n in divisors]
    if len(dts) < 4:
        raise ValueError("need at least 4 step sizes for a slope estimate")
    errors = []
    for dt in dts:
        config = IntegratorConfig(method=method, dt=dt)
        traj = integrate(problem.rhs, problem.q0, problem.t0, problem.t1, config)
        errors.append(np.linalg.norm(traj.states[-1] - problem.exact_final))
    slope = np.polyfit(np.log(np.asarray(dts)), np.log(np.asarray(errors)), 1)[0]
    return float(slope)
