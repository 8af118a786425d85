"""Multistep-penalty training: windows, penalty loss, schedules, loops.

The fit horizon is split into contiguous windows; every interior boundary
gets a learnable restart state. Each window is integrated independently from
its restart, the data-mismatch term sees the windowed prediction, and the
jumps between a window's endpoint and the next restart are penalized with a
strength that is ratcheted up on a ladder during training.

Two loss implementations live here on purpose: a plain sequential one
(:func:`mp_loss`) that states the definition window by window, and a batched
one used by the training loops that stacks all (batch item, window) pairs of
equal step count into single array rollouts. The sequential form is the
reference the fast path is tested against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import models as mdl
from . import ode
from .errors import (
    AlignmentError,
    DivergedTraining,
    NonFiniteState,
    TooManyWindows,
)


# --- window partition ---------------------------------------------------------

@dataclass(frozen=True)
class WindowPartition:
    """Index boundaries into the sample grid: window k spans samples
    ``boundaries[k]`` through ``boundaries[k+1]`` (endpoint shared)."""

    boundaries: tuple

    def __post_init__(self):
        b = tuple(int(i) for i in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        if len(b) < 2 or b[0] != 0:
            raise ValueError("boundaries must start at 0")
        if any(b[i + 1] <= b[i] for i in range(len(b) - 1)):
            raise ValueError("every window needs at least one step")

    @property
    def n_windows(self):
        return len(self.boundaries) - 1

    @property
    def num_samples(self):
        return self.boundaries[-1] + 1

    def window_steps(self):
        b = self.boundaries
        return tuple(b[i + 1] - b[i] for i in range(len(b) - 1))


def make_partition(num_samples, n_windows):
    """Split ``num_samples - 1`` steps into near-equal contiguous windows.

    The remainder goes to the earliest windows, one extra step each.
    """
    steps = num_samples - 1
    if n_windows < 1:
        raise ValueError("need at least one window")
    if n_windows > steps:
        raise TooManyWindows(f"{n_windows} windows but only {steps} steps available")
    base, rem = divmod(steps, n_windows)
    boundaries = [0]
    for w in range(n_windows):
        boundaries.append(boundaries[-1] + base + (1 if w < rem else 0))
    return WindowPartition(tuple(boundaries))


@dataclass
class PenaltyState:
    """Learnable restart states, one per interior window boundary."""

    qk_plus: object
    partition: WindowPartition

    def __post_init__(self):
        qk = np.asarray(ad.value_of(self.qk_plus), dtype=float)
        n = self.partition.n_windows
        if qk.ndim != 2 or qk.shape[0] != n - 1:
            raise ValueError(f"expected {n - 1} restart rows, got shape {qk.shape}")
        if not np.all(np.isfinite(qk)):
            raise ValueError("restart states must be finite")
        if not isinstance(self.qk_plus, ad.Var):
            self.qk_plus = qk


def init_penalty_state(data, partition):
    """Restarts seeded from the data at the interior boundary times."""
    if partition.num_samples != data.num_samples:
        raise AlignmentError(
            f"partition covers {partition.num_samples} samples, data has "
            f"{data.num_samples}"
        )
    interior = list(partition.boundaries[1:-1])
    qk = data.states[interior].copy() if interior else np.zeros((0, data.state_dim))
    return PenaltyState(qk, partition)


# --- penalty schedule ----------------------------------------------------------

EVERY_K = "every_k"
PLATEAU = "plateau"


@dataclass(frozen=True)
class PenaltySchedule:
    """Penalty-strength ladder: multiply by ``growth_factor`` when the
    trigger fires, clamped at ``mu_max``.

    trigger:
      ("every_k", K)                -- fire at optimizer steps K, 2K, ...
      ("plateau", window, rel_tol)  -- fire when the loss improved by less
                                       than ``rel_tol`` (relative) over the
                                       last ``window`` steps.
    """

    mu_min: float
    mu_max: float
    growth_factor: float = 10.0
    trigger: tuple = (EVERY_K, 170)

    def __post_init__(self):
        if not (self.mu_min > 0 and self.mu_max > 0):
            raise ValueError("penalty strengths must be positive")
        if self.mu_min > self.mu_max:
            raise ValueError("mu_min must not exceed mu_max")
        if not self.growth_factor > 1:
            raise ValueError("growth_factor must exceed 1")
        kind = self.trigger[0]
        if kind == EVERY_K:
            if len(self.trigger) != 2 or int(self.trigger[1]) < 1:
                raise ValueError("every_k trigger needs a positive step count")
        elif kind == PLATEAU:
            if (len(self.trigger) != 3 or int(self.trigger[1]) < 1
                    or self.trigger[2] < 0):
                raise ValueError("plateau trigger needs (window, rel_tol)")
        else:
            raise ValueError(f"unknown trigger kind {kind!r}")

    def ladder(self):
        """All rung values from mu_min upward, clamped at mu_max."""
        rungs = [self.mu_min]
        while rungs[-1] * self.growth_factor <= self.mu_max * (1 + 1e-12):
            rungs.append(rungs[-1] * self.growth_factor)
        return rungs


def schedule_step(schedule, mu, step, loss_history, last_fire_step=0):
    """New penalty strength after optimizer step ``step``.

    ``loss_history`` holds recorded totals with index 0 being the value
    before the first step. The returned strength never decreases.
    """
    if not (schedule.mu_min * (1 - 1e-12) <= mu <= schedule.mu_max * (1 + 1e-12)):
        raise ValueError(f"mu={mu} outside [{schedule.mu_min}, {schedule.mu_max}]")
    kind = schedule.trigger[0]
    if kind == EVERY_K:
        k = int(schedule.trigger[1])
        fired = step > 0 and step % k == 0
    else:
        window, rel_tol = int(schedule.trigger[1]), float(schedule.trigger[2])
        fired = False
        if step - last_fire_step >= window and len(loss_history) > window:
            base = loss_history[-window - 1]
            current = loss_history[-1]
            improvement = (base - current) / max(abs(base), 1e-300)
            fired = improvement < rel_tol
    if fired:
        return min(mu * schedule.growth_factor, schedule.mu_max)
    return mu


@dataclass
class MpLossBreakdown:
    """total = l_gt + (mu/2) * l_p; all terms non-negative."""

    total: float
    l_gt: float
    l_p: float
    mu: float


# --- sequential rollout and loss (reference implementation) --------------------

def _interval_steps(dt, config):
    return max(1, int(round(dt / config.dt)))


def _window_samples(rhs, params, start, times, i0, i1, config):
    """States at sample times ``times[i0..i1]``, substepping per config.dt."""
    def bound_rhs(q, t):
        return rhs(params, q, t)

    q = start
    samples = [q]
    for i in range(i0, i1):
        dt = times[i + 1] - times[i]
        n_sub = _interval_steps(dt, config)
        h = dt / n_sub
        for j in range(n_sub):
            q = ode.step(bound_rhs, q, times[i] + j * h, h, config.method)
        samples.append(q)
    return samples


def mp_rollout(rhs, params, penalty, q0, data_times, config):
    """Integrate every window independently from its restart state.

    Window 0 starts from ``q0`` (the true initial condition), window k>0
    from restart k. Returns the per-window state lists on the sample grid
    and the endpoints that meet the interior boundaries.
    """
    data_times = np.asarray(data_times, dtype=float)
    b = penalty.partition.boundaries
    if b[-1] != data_times.size - 1:
        raise AlignmentError(
            f"partition expects {b[-1] + 1} samples, times have {data_times.size}"
        )
    qk = penalty.qk_plus
    trajectories = []
    endpoints = []
    for w in range(penalty.partition.n_windows):
        start = q0 if w == 0 else qk[w - 1]
        try:
            samples = _window_samples(
                rhs, params, start, data_times, b[w], b[w + 1], config
            )
        except NonFiniteState as err:
            raise NonFiniteState(f"window {w} diverged: {err}", t=err.t, window=w)
        trajectories.append(samples)
        if w < penalty.partition.n_windows - 1:
            endpoints.append(samples[-1])
    return trajectories, endpoints


def mp_loss_terms(rhs, params, penalty, data, config):
    """(l_gt, l_p) for one trajectory; traced when the inputs are traced.

    The data term averages squared error over all samples and divides by
    twice the sample count; sample ``boundaries[k]`` is represented by
    restart k (the windowed prediction is right-open at boundaries). The
    penalty term averages squared jumps over the interior boundaries.
    Squared norms sum over state dimensions.
    """
    if data.num_samples != penalty.partition.num_samples:
        raise AlignmentError(
            f"data has {data.num_samples} samples, partition covers "
            f"{penalty.partition.num_samples}"
        )
    b = penalty.partition.boundaries
    n = penalty.partition.n_windows
    trajectories, endpoints = mp_rollout(
        rhs, params, penalty, data.states[0], data.times, config
    )
    l_gt_sum = 0.0
    for w, samples in enumerate(trajectories):
        last_local = len(samples) - 1
        for s, q in enumerate(samples):
            if s == last_local and w < n - 1:
                continue  # boundary sample belongs to the next window's restart
            diff = q - data.states[b[w] + s]
            l_gt_sum = l_gt_sum + ad.array_sum(diff * diff)
    l_gt = l_gt_sum / (2.0 * data.num_samples)
    if n == 1:
        return l_gt, 0.0
    l_p_sum = 0.0
    for k in range(1, n):
        jump = penalty.qk_plus[k - 1] - endpoints[k - 1]
        l_p_sum = l_p_sum + ad.array_sum(jump * jump)
    l_p = l_p_sum / (n - 1.0)
    return l_gt, l_p


def mp_loss(rhs, params, penalty, data, mu, config):
    """Loss breakdown for one trajectory at penalty strength ``mu``."""
    l_gt, l_p = mp_loss_terms(rhs, params, penalty, data, config)
    l_gt_v = float(ad.value_of(l_gt))
    l_p_v = float(ad.value_of(l_p))
    return MpLossBreakdown(l_gt_v + 0.5 * mu * l_p_v, l_gt_v, l_p_v, mu)


# --- optimizer -------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Adam settings plus the loop controls shared by all formulations."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: Optional[float] = None
    cosine_decay: bool = False
    lr_min: float = 1e-5
    max_steps: int = 1000
    num_iters: int = 1
    batch_size: int = 1
    method: str = ode.RK4
    substeps: int = 1
    seed: int = 0
    diverged_patience: int = 5
    global_register: bool = False


class Adam:
    """Plain Adam; optionally cosine-decays the learning rate over a horizon."""

    def __init__(self, n, config, horizon=None):
        self.config = config
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.horizon = horizon

    def _lr(self):
        cfg = self.config
        if not cfg.cosine_decay or not self.horizon:
            return cfg.lr
        frac = min(self.t / self.horizon, 1.0)
        return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1 + np.cos(np.pi * frac))

    def step(self, values, grad):
        cfg = self.config
        self.t += 1
        self.m = cfg.beta1 * self.m + (1 - cfg.beta1) * grad
        self.v = cfg.beta2 * self.v + (1 - cfg.beta2) * grad * grad
        m_hat = self.m / (1 - cfg.beta1 ** self.t)
        v_hat = self.v / (1 - cfg.beta2 ** self.t)
        return values - self._lr() * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


# --- training data ----------------------------------------------------------------

@dataclass
class TrainingData:
    """Equal-length sub-trajectories on a shared uniform sample grid."""

    trajectories: list
    n_windows: int

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("no training trajectories")
        first = self.trajectories[0]
        for tr in self.trajectories:
            if tr.num_samples != first.num_samples or tr.state_dim != first.state_dim:
                raise ValueError("all training trajectories must share a shape")
        dts = np.diff(first.times)
        if not np.allclose(dts, dts[0], rtol=1e-9, atol=1e-12):
            raise AlignmentError("training requires a uniform sample grid")
        self.dt_sample = float(dts[0])
        self.states = np.stack([tr.states for tr in self.trajectories])
        self.partition = make_partition(first.num_samples, self.n_windows)

    @property
    def num_samples(self):
        return self.trajectories[0].num_samples

    @property
    def state_dim(self):
        return self.trajectories[0].state_dim

    def __len__(self):
        return len(self.trajectories)


# --- batched loss (fast path for the loops) ------------------------------------------

def _window_groups(partition):
    """Contiguous window blocks of equal step count (at most two)."""
    steps = np.asarray(partition.window_steps())
    if steps.max() == steps.min():
        return [(0, partition.n_windows, int(steps[0]))]
    split = int(np.sum(steps == steps.max()))  # longer windows lead
    return [(0, split, int(steps.max())),
            (split, partition.n_windows, int(steps.min()))]


def batched_loss_terms(spec, theta, qk_matrix, states, partition, mu,
                       dt_sample, method=ode.RK4, substeps=1):
    """(total, l_gt, l_p) over a stacked batch; traced when inputs are traced.

    ``states`` is the (B, N, d) ground truth; ``qk_matrix`` holds the
    restart rows item-major, i.e. row ``j*(n-1) + (k-1)`` restarts window k
    of item j. All (window, item) pairs with equal step counts roll out as
    one array.
    """
    B, N, d = states.shape
    n = partition.n_windows
    b = np.asarray(partition.boundaries)
    rhs = mdl.make_mlp_rhs(spec, theta)
    h = dt_sample / substeps

    l_gt_sum = 0.0
    if n > 1:
        starts_truth = states[:, b[1:-1], :].reshape(B * (n - 1), d)
        diff0 = qk_matrix - starts_truth
        l_gt_sum = ad.array_sum(diff0 * diff0)
        window_major = np.concatenate(
            [np.arange(B) * (n - 1) + (w - 1) for w in range(1, n)]
        )
        start_rows = ad.concatenate([states[:, 0, :], qk_matrix[window_major]], axis=0)
    else:
        start_rows = states[:, 0, :]

    endpoint_blocks = []
    for (w_lo, w_hi, steps) in _window_groups(partition):
        q = start_rows[w_lo * B : w_hi * B]
        w_vec = np.repeat(np.arange(w_lo, w_hi), B)
        j_vec = np.tile(np.arange(B), w_hi - w_lo)
        base_idx = b[w_vec]
        t0_vec = base_idx * dt_sample
        for s in range(1, steps + 1):
            t_vec = t0_vec + (s - 1) * dt_sample
            for j_sub in range(substeps):
                q = ode.step(rhs, q, t_vec + j_sub * h, h, method)
            if s < steps:
                diff = q - states[j_vec, base_idx + s, :]
                l_gt_sum = l_gt_sum + ad.array_sum(diff * diff)
            elif w_hi == n:  # this group ends with the final window
                last = q[(w_hi - w_lo - 1) * B :]
                diff = last - states[:, N - 1, :]
                l_gt_sum = l_gt_sum + ad.array_sum(diff * diff)
        endpoint_blocks.append(q)
    l_gt = l_gt_sum / (2.0 * N * B)

    if n == 1:
        return l_gt, l_gt, 0.0
    endpoints = (endpoint_blocks[0] if len(endpoint_blocks) == 1
                 else ad.concatenate(endpoint_blocks, axis=0))
    window_major = np.concatenate(
        [np.arange(B) * (n - 1) + (w - 1) for w in range(1, n)]
    )
    jumps = qk_matrix[window_major] - endpoints[: (n - 1) * B]
    l_p = ad.array_sum(jumps * jumps) / ((n - 1.0) * B)
    total = l_gt + (0.5 * mu) * l_p
    return total, l_gt, l_p


# --- training loops -----------------------------------------------------------------

def _fixed_blocks(n_items, batch_size):
    return [list(range(i, min(i + batch_size, n_items)))
            for i in range(0, n_items, batch_size)]


class _Trainer:
    """Shared machinery for the three loop formulations.

    Batches are fixed index blocks whose visit order reshuffles each pass;
    restart states are reinitialized from the data whenever a batch is
    picked up (unless the optional global register is enabled, which
    resumes each block's restarts from its previous visit).
    """

    def __init__(self, model, dataset, schedule, config):
        self.spec = model.spec
        self.theta = model.params.values.copy()
        self.layout = model.params.layout
        self.dataset = dataset
        self.schedule = schedule
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.blocks = _fixed_blocks(len(dataset), config.batch_size)
        self.adam_theta = Adam(self.theta.size, config, horizon=config.max_steps)
        self.history = []
        self.step_count = 0
        self.bad_streak = 0
        self.register = {}

    def block_order(self):
        return [int(i) for i in self.rng.permutation(len(self.blocks))]

    def _init_restarts(self, block_id):
        if self.config.global_register and block_id in self.register:
            return self.register[block_id].copy()
        items = self.blocks[block_id]
        interior = list(self.dataset.partition.boundaries[1:-1])
        d = self.dataset.state_dim
        if not interior:
            return np.zeros((0, d))
        qk = self.dataset.states[items][:, interior, :]
        return qk.reshape(len(items) * len(interior), d)

    def run_batch(self, block_id, phases):
        """Visit one batch: for each (mu, iters) phase run that many steps.

        Restarts persist across every phase of the visit and are refreshed
        only on the next visit.
        """
        cfg = self.config
        items = self.blocks[block_id]
        states = self.dataset.states[items]
        B = len(items)
        n = self.dataset.partition.n_windows
        d = self.dataset.state_dim
        qk = self._init_restarts(block_id)
        adam_qk = Adam(qk.size, cfg, horizon=cfg.max_steps)
        n_theta = self.theta.size
        for mu, iters in phases:
            for _ in range(iters):
                p = ad.ParamVector(np.concatenate([self.theta, qk.ravel()]))
                terms = {}

                def objective(pv):
                    theta_t = pv[:n_theta]
                    qk_t = ad.reshape(pv[n_theta:], (B * (n - 1), d))
                    total, l_gt, l_p = batched_loss_terms(
                        self.spec, theta_t, qk_t, states, self.dataset.partition,
                        mu, self.dataset.dt_sample, cfg.method, cfg.substeps,
                    )
                    terms["l_gt"] = float(ad.value_of(l_gt))
                    terms["l_p"] = float(ad.value_of(l_p))
                    return total

                try:
                    result = ad.grad(objective, p)
                    bad = result.overflow or not np.isfinite(result.value)
                except NonFiniteState:
                    result = None
                    bad = True
                self.step_count += 1
                if bad:
                    self.bad_streak += 1
                    self.history.append(
                        self._row(np.inf, np.inf, np.inf, mu, np.nan, np.nan)
                    )
                    if self.bad_streak >= cfg.diverged_patience:
                        raise DivergedTraining(
                            f"loss non-finite for {self.bad_streak} consecutive steps"
                        )
                    continue
                self.bad_streak = 0
                g = result.gradient
                if cfg.grad_clip is not None:
                    norm = float(np.linalg.norm(g))
                    if norm > cfg.grad_clip:
                        g = g * (cfg.grad_clip / norm)
                g_theta, g_qk = g[:n_theta], g[n_theta:]
                self.history.append(self._row(
                    result.value, terms["l_gt"], terms["l_p"], mu,
                    float(np.linalg.norm(g_theta)), float(np.linalg.norm(g_qk)),
                ))
                self.theta = self.adam_theta.step(self.theta, g_theta)
                if qk.size:
                    qk = adam_qk.step(qk.ravel(), g_qk).reshape(qk.shape)
        if cfg.global_register:
            self.register[block_id] = qk.copy()

    def _row(self, total, l_gt, l_p, mu, gn_theta, gn_qk):
        return {
            "step": self.step_count,
            "total": float(total),
            "l_gt": l_gt,
            "l_p": l_p,
            "mu": mu,
            "grad_norm_theta": gn_theta,
            "grad_norm_qk": gn_qk,
        }

    def result(self):
        return ad.ParamVector(self.theta, self.layout), self.history


def train_formulation1(model, dataset, schedule, optimizer_config):
    """Outer loop over penalty rungs; one optimizer step per batch visit.

    The schedule's trigger decides when to climb to the next rung; restarts
    reinitialize on every batch visit. Runs for ``max_steps`` steps.
    """
    tr = _Trainer(model, dataset, schedule, optimizer_config)
    mu = schedule.mu_min
    last_fire = 0
    totals = [np.nan]
    while tr.step_count < optimizer_config.max_steps:
        for block_id in tr.block_order():
            tr.run_batch(block_id, [(mu, 1)])
            totals.append(tr.history[-1]["total"])
            new_mu = schedule_step(schedule, mu, tr.step_count, totals, last_fire)
            if new_mu > mu:
                mu, last_fire = new_mu, tr.step_count
            if tr.step_count >= optimizer_config.max_steps:
                break
    return tr.result()


def train_formulation2(model, dataset, schedule, optimizer_config):
    """Per rung: one pass over the batches, ``num_iters`` steps each."""
    tr = _Trainer(model, dataset, schedule, optimizer_config)
    for mu in schedule.ladder():
        for block_id in tr.block_order():
            tr.run_batch(block_id, [(mu, optimizer_config.num_iters)])
    return tr.result()


def train_formulation3(model, dataset, schedule, optimizer_config):
    """One pass over the batches; the full penalty ladder runs per batch,
    with restarts initialized once per batch and carried across rungs."""
    tr = _Trainer(model, dataset, schedule, optimizer_config)
    phases = [(mu, optimizer_config.num_iters) for mu in schedule.ladder()]
    for block_id in tr.block_order():
        tr.run_batch(block_id, phases)
    return tr.result()
