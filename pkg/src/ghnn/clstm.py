"""Continuous-time LSTM cell.

Discrete gate updates happen at event timestamps; between events the cell
memory relaxes exponentially from ``c_start`` toward ``c_target`` at rate
``delta``. All functions accept a single state (vectors of size d) or a batch
(leading axis B) alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Parameter, Tensor, as_tensor, default_dtype, exp, matmul, reshape, scaled_softplus, sigmoid, tanh

GATES = ("i", "i_bar", "f", "f_bar", "z", "o", "delta")


@dataclass
class ClstmParams:
    """Weights of the seven gates stacked along the output axis in ``GATES`` order.

    ``W`` is (7d, input_dim), ``U`` is (7d, d), ``b`` is (7d,), so the block of rows
    ``g*d:(g+1)*d`` is the per-gate matrix ``W_g`` of shape (d, input_dim).
    """

    W: Parameter
    U: Parameter
    b: Parameter
    psi: float = 1.0
    z_activation: str = "sigmoid"

    @property
    def hidden_dim(self) -> int:
        return self.U.shape[1]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.W, self.U, self.b]

    def gate_weights(self, gate: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d = self.hidden_dim
        g = GATES.index(gate)
        rows = slice(g * d, (g + 1) * d)
        return self.W.data[rows], self.U.data[rows], self.b.data[rows]

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator, psi: float = 1.0,
             z_activation: str = "sigmoid", dtype=None, prefix: str = "clstm") -> "ClstmParams":
        if psi <= 0:
            raise ValueError("psi must be positive")
        if z_activation not in ("sigmoid", "tanh"):
            raise ValueError(f"unknown z activation {z_activation!r}")
        a = 1.0 / np.sqrt(hidden_dim)
        W = rng.uniform(-a, a, size=(7 * hidden_dim, input_dim))
        U = rng.uniform(-a, a, size=(7 * hidden_dim, hidden_dim))
        b = np.zeros(7 * hidden_dim)
        return cls(Parameter(W, f"{prefix}.W", dtype), Parameter(U, f"{prefix}.U", dtype),
                   Parameter(b, f"{prefix}.b", dtype), psi, z_activation)


@dataclass
class ClstmState:
    c_start: Tensor
    c_target: Tensor
    delta: Tensor
    o_gate: Tensor
    t_update: np.ndarray  # scalar or (B,)


def initial_state(hidden_dim: int, batch: int | None = None, dtype=None) -> ClstmState:
    shape = (hidden_dim,) if batch is None else (batch, hidden_dim)
    dtype = dtype or default_dtype()
    zeros = np.zeros(shape, dtype=dtype)
    t0 = np.zeros(() if batch is None else (batch,))
    return ClstmState(Tensor(zeros), Tensor(zeros.copy()), Tensor(np.ones(shape, dtype=dtype)),
                      Tensor(np.full(shape, 0.5, dtype=dtype)), t0)


def _elapsed(state: ClstmState, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    dt = t - state.t_update
    if np.any(dt < 0):
        raise ValueError("cannot evaluate the cell before its last update")
    return dt


def _as_column(dt: np.ndarray, like: Tensor) -> np.ndarray:
    # broadcast a per-row elapsed time against (..., d)
    dt = np.asarray(dt, dtype=like.dtype)
    return dt[..., None] if dt.ndim else dt


def decay_cell(state: ClstmState, t) -> Tensor:
    """``c(t) = c_target + (c_start - c_target) * exp(-delta * (t - t_update))``.

    Evaluated as a convex blend so ``t == t_update`` returns ``c_start`` exactly.
    """
    dt = _as_column(_elapsed(state, t), state.c_start)
    w = exp(state.delta * (-dt))
    return state.c_start * w + state.c_target * (1.0 - w)


def decay_cell_grid(state: ClstmState, times) -> Tensor:
    """Cell values of a batched state on a per-row time grid ``times`` (B, G) -> (B, G, d)."""
    times = np.asarray(times, dtype=np.float64)
    dt = times - np.asarray(state.t_update, dtype=np.float64)[:, None]
    if np.any(dt < 0):
        raise ValueError("cannot evaluate the cell before its last update")
    B, d = state.c_start.shape
    c0 = reshape(state.c_start, (B, 1, d))
    cbar = reshape(state.c_target, (B, 1, d))
    delta = reshape(state.delta, (B, 1, d))
    w = exp(delta * (-dt[..., None].astype(state.c_start.dtype)))
    return c0 * w + cbar * (1.0 - w)


def hidden_at(state: ClstmState, t) -> Tensor:
    """``h(t) = o * tanh(c(t))``."""
    return state.o_gate * tanh(decay_cell(state, t))


def cell_update(params: ClstmParams, k, prev: ClstmState, t_event) -> ClstmState:
    """Feed input ``k`` at ``t_event``; gates read the hidden value evaluated at ``t_event``."""
    k = as_tensor(k)
    if k.shape[-1] != params.input_dim:
        raise ValueError(f"input dim {k.shape[-1]} != expected {params.input_dim}")
    d = params.hidden_dim
    c_now = decay_cell(prev, t_event)
    h_now = prev.o_gate * tanh(c_now)
    pre = matmul(k, params.W.T) + matmul(h_now, params.U.T) + params.b

    def block(g: int) -> Tensor:
        return pre[..., g * d:(g + 1) * d]

    i, i_bar, f, f_bar = (sigmoid(block(g)) for g in range(4))
    z = sigmoid(block(4)) if params.z_activation == "sigmoid" else tanh(block(4))
    o = sigmoid(block(5))
    delta = scaled_softplus(block(6), params.psi)
    c_start = f * c_now + i * z
    c_target = f_bar * prev.c_target + i_bar * z
    t_new = np.broadcast_to(np.asarray(t_event, dtype=np.float64), np.shape(prev.t_update)).copy()
    return ClstmState(c_start, c_target, delta, o, t_new)
