"""Right-hand-side models: MLP vector fields and parametric Lorenz control.

Everything here evaluates on plain arrays or traced values alike. States may
be single vectors ``(d,)`` or batches ``(B, d)``; batching is how window
rollouts amortize work.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import ode
from .errors import DimensionMismatch, NonFiniteState, TimeOutOfRange

_ACTIVATIONS = {"tanh": ad.tanh, "gelu": ad.gelu}


@dataclass(frozen=True)
class MlpSpec:
    """Feed-forward architecture for a learned vector field.

    ``layer_widths`` lists every layer including input and output; the output
    width is the state dimension, and the input width is the state dimension
    plus one when the field is conditioned on time.
    """

    layer_widths: tuple
    activation: str = "tanh"
    time_conditioned: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 3:
            raise ValueError("need at least one hidden layer")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        expected_in = self.state_dim + (1 if self.time_conditioned else 0)
        if self.layer_widths[0] != expected_in:
            raise ValueError(
                f"input width {self.layer_widths[0]} != state_dim"
                f"{'+1 (time)' if self.time_conditioned else ''} = {expected_in}"
            )

    @property
    def state_dim(self):
        return self.layer_widths[-1]

    @property
    def num_layers(self):
        return len(self.layer_widths) - 1


def mlp_layout(spec):
    """(name, offset, shape) descriptors for the flat parameter vector."""
    layout = []
    offset = 0
    for i in range(spec.num_layers):
        fan_in, fan_out = spec.layer_widths[i], spec.layer_widths[i + 1]
        layout.append((f"w{i}", offset, (fan_in, fan_out)))
        offset += fan_in * fan_out
        layout.append((f"b{i}", offset, (fan_out,)))
        offset += fan_out
    return tuple(layout)


def mlp_param_count(spec):
    widths = spec.layer_widths
    return sum(widths[i] * widths[i + 1] + widths[i + 1] for i in range(spec.num_layers))


def init_mlp_params(spec, rng):
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    named = []
    for i in range(spec.num_layers):
        fan_in, fan_out = spec.layer_widths[i], spec.layer_widths[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        named.append((f"w{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out))))
        named.append((f"b{i}", np.zeros(fan_out)))
    return ad.ParamVector.from_arrays(named)


def unpack_mlp(spec, flat):
    """Slice a flat (traced or plain) vector into per-layer weight blocks."""
    n = mlp_param_count(spec)
    have = ad.value_of(flat).size
    if have != n:
        raise DimensionMismatch(f"expected {n} parameters, got {have}")
    blocks = []
    offset = 0
    for i in range(spec.num_layers):
        fan_in, fan_out = spec.layer_widths[i], spec.layer_widths[i + 1]
        w = ad.reshape(flat[offset : offset + fan_in * fan_out], (fan_in, fan_out))
        offset += fan_in * fan_out
        b = flat[offset : offset + fan_out]
        offset += fan_out
        blocks.append((w, b))
    return blocks


def mlp_forward(spec, blocks, x):
    """Feed-forward pass; the output layer is affine (no activation)."""
    act = _ACTIVATIONS[spec.activation]
    h = x
    for i, (w, b) in enumerate(blocks):
        h = h @ w + b
        if i < len(blocks) - 1:
            h = act(h)
    return h


def _with_time_column(q, t):
    if ad.value_of(q).ndim == 1:
        return ad.concatenate([q, np.asarray([t], dtype=float)])
    rows = ad.value_of(q).shape[0]
    t_col = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1, 1), (rows, 1))
    return ad.concatenate([q, t_col], axis=1)


def make_mlp_rhs(spec, flat_params):
    """Bind parameters once and return ``rhs(q, t)``.

    Use this inside rollouts: slicing the flat vector happens a single time
    instead of at every solver stage.
    """
    blocks = unpack_mlp(spec, flat_params)

    def rhs(q, t):
        x = _with_time_column(q, t) if spec.time_conditioned else q
        return mlp_forward(spec, blocks, x)

    return rhs


def mlp_rhs(spec, params, q, t):
    """Evaluate the learned vector field at one (state, time) point."""
    qdim = ad.value_of(q).shape[-1]
    if qdim != spec.state_dim:
        raise DimensionMismatch(f"state dim {qdim} != spec state dim {spec.state_dim}")
    flat = params.values if isinstance(params, ad.ParamVector) else params
    return make_mlp_rhs(spec, flat)(q, t)


@dataclass
class NodeModel:
    """A learned vector field plus its current parameters."""

    spec: MlpSpec
    params: ad.ParamVector

    @classmethod
    def initialize(cls, spec, seed=0):
        rng = np.random.default_rng(seed)
        return cls(spec, init_mlp_params(spec, rng))

    def rhs(self, q, t):
        return make_mlp_rhs(self.spec, self.params.values)(q, t)


def node_rollout(spec, params, q0, n_steps, dt_sample, method=ode.RK4, substeps=1,
                 stop_on_nonfinite=False):
    """Autoregressive rollout of a trained field on a uniform sample grid.

    Returns ``(trajectory, completed)``: if the rollout diverges and
    ``stop_on_nonfinite`` is set, the trajectory is truncated at the last
    finite sample and ``completed`` is False.
    """
    flat = params.values if isinstance(params, ad.ParamVector) else np.asarray(params)
    rhs = make_mlp_rhs(spec, flat)
    h = dt_sample / substeps
    q = np.asarray(q0, dtype=float)
    states = [q]
    for i in range(n_steps):
        try:
            for j in range(substeps):
                q = ode.step(rhs, q, i * dt_sample + j * h, h, method)
        except NonFiniteState:
            if stop_on_nonfinite:
                break
            raise
        states.append(q)
    states = np.stack(states)
    times = dt_sample * np.arange(states.shape[0])
    return ode.Trajectory(times, states), states.shape[0] == n_steps + 1


# --- Lorenz-63 with control -------------------------------------------------

@dataclass
class LorenzParams:
    """Classic Lorenz-63 constants; ``rho`` may be a traced scalar."""

    sigma: float = 10.0
    rho: object = 28.0
    beta: float = 8.0 / 3.0


def _lorenz_core(q, p, forcing_z):
    """Shared Lorenz field; ``forcing_z`` is added to the z equation.

    Recorded as one fused primitive with analytic backward rules, keeping
    tape length at one record per stage instead of a dozen.
    """
    qv = np.asarray(ad.value_of(q), dtype=float)
    rho_v = ad.value_of(p.rho)
    f_v = ad.value_of(forcing_z)
    sigma, beta = p.sigma, p.beta
    x, y, z = qv[..., 0], qv[..., 1], qv[..., 2]
    out = np.stack(
        [sigma * (y - x), x * (rho_v - z) - y, x * y - beta * z + f_v], axis=-1
    )
    if not (isinstance(q, ad.Var) or isinstance(p.rho, ad.Var)
            or isinstance(forcing_z, ad.Var)):
        return out
    parents = []
    if isinstance(q, ad.Var):
        def vjp_q(g):
            g0, g1, g2 = g[..., 0], g[..., 1], g[..., 2]
            return np.stack(
                [-sigma * g0 + (rho_v - z) * g1 + y * g2,
                 sigma * g0 - g1 + x * g2,
                 -x * g1 - beta * g2],
                axis=-1,
            )
        parents.append((q, vjp_q))
    if isinstance(p.rho, ad.Var):
        rho_shape = np.shape(ad.value_of(p.rho))
        parents.append(
            (p.rho, lambda g: np.sum(g[..., 1] * x).reshape(rho_shape))
        )
    if isinstance(forcing_z, ad.Var):
        f_shape = np.shape(f_v)
        parents.append(
            (forcing_z, lambda g: ad._unbroadcast(g[..., 2], f_shape))
        )
    return ad.primitive(out, parents)


def controlled_lorenz_rhs(q, p):
    """Lorenz-63 field with ``rho`` as the control parameter."""
    return _lorenz_core(q, p, 0.0)


def lorenz_fixed_point(p):
    """The positive nontrivial equilibrium (exists for rho > 1)."""
    rho_v = float(ad.value_of(p.rho))
    c = np.sqrt(p.beta * (rho_v - 1.0))
    return np.array([c, c, rho_v - 1.0])


@dataclass
class ForcingVector:
    """One control value per time step, piecewise constant on [t_start, t_end].

    ``values`` may be a plain vector, a traced vector, or a batch of vectors
    ``(B, n_steps)`` when scanning many controllers at once.
    """

    values: object
    t_start: float = 0.0
    t_end: float = 20.0

    def __post_init__(self):
        if not self.t_end > self.t_start:
            raise ValueError("t_end must exceed t_start")
        v = ad.value_of(self.values)
        if np.shape(v)[-1] < 1:
            raise ValueError("need at least one forcing value")

    @property
    def num_steps(self):
        return np.shape(ad.value_of(self.values))[-1]

    def step_index(self, t):
        """Index of the step whose half-open interval contains ``t``.

        Times within 1e-9 (relative) of a boundary count as the later step;
        ``t_end`` itself belongs to the final step.
        """
        span = self.t_end - self.t_start
        rel = (t - self.t_start) / span
        if rel < -1e-9 or rel > 1.0 + 1e-9:
            raise TimeOutOfRange(
                f"t={t:.6g} outside forcing domain [{self.t_start}, {self.t_end}]"
            )
        idx = int(np.floor(rel * self.num_steps + 1e-9))
        return min(max(idx, 0), self.num_steps - 1)

    def at(self, t):
        idx = self.step_index(t)
        v = self.values
        if ad.value_of(v).ndim == 1:
            return v[idx]
        return v[:, idx]


def forced_lorenz_rhs(q, p, f, t):
    """Lorenz field with time-varying forcing added to the z equation."""
    return _lorenz_core(q, p, f.at(t))
