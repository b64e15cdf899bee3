"""Graph Hawkes model: neighbor aggregation, history encoding, intensity head,
survival terms and next-occurrence time densities."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import clstm as cl
from .numerics import (
    Parameter,
    Tensor,
    concat,
    cumsum,
    default_dtype,
    exp,
    log,
    log_scaled_softplus,
    matmul,
    reshape,
    scaled_softplus,
    segment_mean,
    take_rows,
    tanh,
    trapezoid_weights,
    tsum,
)
from .tkg_store import HistorySequence


@dataclass
class ModelConfig:
    num_entities: int
    num_predicates: int
    embed_dim: int = 200
    hidden_dim: int = 200
    softplus_scale: float = 1.0
    psi: float = 1.0
    z_activation: str = "sigmoid"
    # "gate": h = o * tanh(c) feeds W_h; "embedding": h = e_candidate * tanh(c) at scoring
    readout: str = "gate"
    time_combine: str = "mean"

    def validate(self) -> None:
        if self.softplus_scale <= 0 or self.psi <= 0:
            raise ValueError("softplus scales must be positive")
        if self.readout not in ("gate", "embedding"):
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.readout == "embedding" and self.embed_dim != self.hidden_dim:
            raise ValueError("embedding readout requires embed_dim == hidden_dim")
        if self.time_combine not in ("mean", "sum"):
            raise ValueError(f"unknown time combine mode {self.time_combine!r}")


class GHNN:
    """Entity/predicate embeddings, the shared cLSTM, W_lambda (r x 3r) and W_h (r x d)."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None, dtype=None):
        config.validate()
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = np.dtype(dtype or default_dtype())
        self.dtype = dtype
        r, d = config.embed_dim, config.hidden_dim
        ne, npred = config.num_entities, config.num_predicates

        def xavier(shape):
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            return rng.uniform(-a, a, size=shape)

        self.entity_emb = Parameter(xavier((ne, r)), "entity_emb", dtype)
        self.predicate_emb = Parameter(xavier((npred, r)), "predicate_emb", dtype)
        self.W_lambda = Parameter(xavier((r, 3 * r)), "W_lambda", dtype)
        self.W_h = Parameter(xavier((r, d)), "W_h", dtype)
        self.clstm = cl.ClstmParams.init(3 * r, d, rng, config.psi, config.z_activation, dtype)

    @property
    def s(self) -> float:
        return self.config.softplus_scale

    def parameters(self) -> list[Parameter]:
        return [self.entity_emb, self.predicate_emb, self.W_lambda, self.W_h, *self.clstm.parameters()]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters().items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype, copy=True)
            p.zero_grad()

    def config_dict(self) -> dict:
        return asdict(self.config)

    # W_lambda column blocks: anchor | projected hidden | predicate
    def _blocks(self) -> tuple[Tensor, Tensor, Tensor]:
        r = self.config.embed_dim
        W = self.W_lambda
        return W[:, :r], W[:, r:2 * r], W[:, 2 * r:]


# ---------------------------------------------------------------------------
# histories -> cLSTM states


@dataclass
class HistoryBatch:
    """Histories left-padded to a common length L."""

    anchors: np.ndarray        # (B,)
    predicates: np.ndarray     # (B,)
    step_times: np.ndarray     # (B, L)
    step_mask: np.ndarray      # (B, L) bool
    step_ids: list[tuple[np.ndarray, np.ndarray]]  # per step: (neighbor ids, row of each id)
    t_last: np.ndarray         # (B,) nan where no history

    @property
    def size(self) -> int:
        return len(self.anchors)

    @property
    def has_history(self) -> np.ndarray:
        return ~np.isnan(self.t_last)


def make_history_batch(histories: Sequence[HistorySequence]) -> HistoryBatch:
    B = len(histories)
    L = max((len(h) for h in histories), default=0)
    times = np.zeros((B, L))
    mask = np.zeros((B, L), dtype=bool)
    ids: list[list[int]] = [[] for _ in range(L)]
    rows: list[list[int]] = [[] for _ in range(L)]
    t_last = np.full(B, np.nan)
    for b, h in enumerate(histories):
        off = L - len(h)
        for j, (t, nbrs) in enumerate(zip(h.times, h.neighbors)):
            if not nbrs:
                raise ValueError("history steps must have non-empty neighbor sets")
            times[b, off + j] = t
            mask[b, off + j] = True
            ids[off + j].extend(nbrs)
            rows[off + j].extend([b] * len(nbrs))
        if len(h):
            t_last[b] = h.times[-1]
    return HistoryBatch(
        anchors=np.array([h.anchor for h in histories], dtype=np.int64),
        predicates=np.array([h.predicate for h in histories], dtype=np.int64),
        step_times=times,
        step_mask=mask,
        step_ids=[(np.array(i, dtype=np.int64), np.array(r, dtype=np.int64)) for i, r in zip(ids, rows)],
        t_last=t_last,
    )


@dataclass
class EncodedHistory:
    state: cl.ClstmState
    t_last: np.ndarray   # (B,) nan = no history
    anchors: np.ndarray
    predicates: np.ndarray

    @property
    def size(self) -> int:
        return len(self.anchors)

    @property
    def has_history(self) -> np.ndarray:
        return ~np.isnan(self.t_last)

    def t_last_or(self, fallback) -> np.ndarray:
        return np.where(np.isnan(self.t_last), fallback, self.t_last)


def aggregate_neighbors(neighbor_ids, entity_emb: Tensor) -> Tensor:
    """Element-wise mean of the neighbors' embeddings."""
    ids = np.asarray(sorted(set(int(i) for i in neighbor_ids)), dtype=np.int64)
    if len(ids) == 0:
        raise ValueError("cannot aggregate an empty neighbor set")
    return segment_mean(entity_emb, ids, np.zeros(len(ids), dtype=np.int64), 1)[0]


def _blend(new: Tensor, old: Tensor, m: np.ndarray) -> Tensor:
    return new * m + old * (1.0 - m)


def encode_batch(model: GHNN, batch: HistoryBatch) -> EncodedHistory:
    B = batch.size
    d = model.config.hidden_dim
    state = cl.initial_state(d, B, model.dtype)
    if batch.step_mask.shape[1]:
        e_anchor = take_rows(model.entity_emb, batch.anchors)
        e_pred = take_rows(model.predicate_emb, batch.predicates)
    for j in range(batch.step_mask.shape[1]):
        active = batch.step_mask[:, j]
        ids, rows = batch.step_ids[j]
        g = segment_mean(model.entity_emb, ids, rows, B)
        k = concat([g, e_anchor, e_pred], axis=-1)
        t_j = np.where(active, batch.step_times[:, j], state.t_update)
        new = cl.cell_update(model.clstm, k, state, t_j)
        if active.all():
            state = new
        else:
            m = active.astype(model.dtype)[:, None]
            state = cl.ClstmState(
                _blend(new.c_start, state.c_start, m),
                _blend(new.c_target, state.c_target, m),
                _blend(new.delta, state.delta, m),
                _blend(new.o_gate, state.o_gate, m),
                np.where(active, new.t_update, state.t_update),
            )
    return EncodedHistory(state, batch.t_last.copy(), batch.anchors.copy(), batch.predicates.copy())


def encode_history(model: GHNN, hist: HistorySequence | Sequence[HistorySequence]) -> EncodedHistory:
    """Run the cLSTM over one history (or a list); the result is always batched."""
    hists = [hist] if isinstance(hist, HistorySequence) else list(hist)
    return encode_batch(model, make_history_batch(hists))


# ---------------------------------------------------------------------------
# intensity head


def _check_time(enc: EncodedHistory, t) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (enc.size,)).copy()
    bad = enc.has_history & (t < np.nan_to_num(enc.t_last, nan=-np.inf))
    if np.any(bad):
        raise ValueError("query time precedes the last history event")
    return t


def candidate_logits(model: GHNN, enc: EncodedHistory, t) -> Tensor:
    """Pre-softplus scores of every entity as the missing slot, shape (B, N_e)."""
    t = _check_time(enc, t)
    E = model.entity_emb
    e_anchor = take_rows(E, enc.anchors)
    e_pred = take_rows(model.predicate_emb, enc.predicates)
    if model.config.readout == "gate":
        h = cl.hidden_at(enc.state, t)
        x = concat([e_anchor, matmul(h, model.W_h.T), e_pred], axis=-1)
        v = matmul(x, model.W_lambda.T)
        return matmul(v, E.T)
    # candidate-dependent hidden e_c * tanh(c(t)): logits split by W_lambda block
    Wa, Wm, Wp = model._blocks()
    base = matmul(matmul(e_anchor, Wa.T) + matmul(e_pred, Wp.T), E.T)
    q = matmul(matmul(E, Wm), model.W_h) * E
    return base + matmul(tanh(cl.decay_cell(enc.state, t)), q.T)


def intensity_all(model: GHNN, enc: EncodedHistory, t) -> Tensor:
    """Strictly positive intensities of every candidate at time ``t``, shape (B, N_e)."""
    return scaled_softplus(candidate_logits(model, enc, t), model.s)


def log_intensity_all(model: GHNN, enc: EncodedHistory, t) -> Tensor:
    return log_scaled_softplus(candidate_logits(model, enc, t), model.s)


def _grid_logits(model: GHNN, enc: EncodedHistory, partner: np.ndarray, times: np.ndarray) -> Tensor:
    """Logit of entity ``partner[b]`` in row ``b`` at every time ``times[b, g]`` -> (B, G)."""
    E = model.entity_emb
    Wa, Wm, Wp = model._blocks()
    e_anchor = take_rows(E, enc.anchors)
    e_pred = take_rows(model.predicate_emb, enc.predicates)
    e_cand = take_rows(E, partner)
    base = tsum((matmul(e_anchor, Wa.T) + matmul(e_pred, Wp.T)) * e_cand, axis=-1)   # (B,)
    u = matmul(matmul(e_cand, Wm), model.W_h)                                          # (B, d)
    c = cl.decay_cell_grid(enc.state, times)                                           # (B, G, d)
    B, G = times.shape
    if model.config.readout == "gate":
        o = reshape(enc.state.o_gate, (B, 1, -1))
        h_dot = tsum(o * tanh(c) * reshape(u, (B, 1, -1)), axis=-1)
    else:
        h_dot = tsum(tanh(c) * reshape(u * e_cand, (B, 1, -1)), axis=-1)
    return reshape(base, (B, 1)) + h_dot


def time_intensity_grid(model: GHNN, enc_sp: EncodedHistory, enc_op: EncodedHistory,
                        events: np.ndarray, times: np.ndarray) -> Tensor:
    """Combined two-branch intensity of triplet ``events[b] = (s, p, o)`` on ``times`` (B, G)."""
    events = np.asarray(events, dtype=np.int64).reshape(-1, 3)
    times = np.asarray(times, dtype=np.float64)
    if times.ndim == 1:
        times = times[:, None]
    if not (np.array_equal(enc_sp.anchors, events[:, 0]) and np.array_equal(enc_op.anchors, events[:, 2])):
        raise ValueError("encodings do not match the events' subject/object")
    for enc in (enc_sp, enc_op):
        t_last = enc.t_last_or(0.0)
        if np.any(times < t_last[:, None]):
            raise ValueError("time precedes the last history event")
    lam_sub = scaled_softplus(_grid_logits(model, enc_sp, events[:, 2], times), model.s)
    lam_obj = scaled_softplus(_grid_logits(model, enc_op, events[:, 0], times), model.s)
    total = lam_sub + lam_obj
    return total * 0.5 if model.config.time_combine == "mean" else total


def time_intensity(model: GHNN, enc_sp: EncodedHistory, enc_op: EncodedHistory, events, t) -> Tensor:
    """Intensity that triplet (s, p, o) occurs at time ``t``; shape (B,)."""
    events = np.asarray(events, dtype=np.int64).reshape(-1, 3)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(events),))
    return time_intensity_grid(model, enc_sp, enc_op, events, t[:, None])[:, 0]


def time_origin(enc_sp: EncodedHistory, enc_op: EncodedHistory) -> np.ndarray:
    """Latest history timestamp over both branches, an empty branch counting as 0."""
    return np.maximum(enc_sp.t_last_or(0.0), enc_op.t_last_or(0.0))


@dataclass
class TimePrediction:
    grid: np.ndarray      # (B, G) absolute times
    density: Tensor       # (B, G)
    mass: Tensor          # (B,) trapezoid mass of the density on the grid
    expected: Tensor      # (B,) expected next-occurrence time


def time_density_and_expectation(model: GHNN, enc_sp: EncodedHistory, enc_op: EncodedHistory,
                                 events, horizon: float, grid_points: int = 100,
                                 renormalize: bool = True) -> TimePrediction:
    """Density ``lambda(t) exp(-int lambda)`` on ``[t_L, t_L + horizon]`` and its mean.

    With ``renormalize`` the mean is taken under the density rescaled to unit mass
    on the truncated grid.
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    if grid_points < 2:
        raise ValueError("need at least two grid points")
    events = np.asarray(events, dtype=np.int64).reshape(-1, 3)
    offsets = np.linspace(0.0, horizon, grid_points)
    t0 = time_origin(enc_sp, enc_op)
    grid = t0[:, None] + offsets[None, :]
    lam = time_intensity_grid(model, enc_sp, enc_op, events, grid)
    dtype = lam.dtype
    w = trapezoid_weights(offsets).astype(dtype)
    B = lam.shape[0]
    half_dx = (0.5 * np.diff(offsets)).astype(dtype)
    steps = (lam[:, 1:] + lam[:, :-1]) * half_dx
    compensator = concat([Tensor(np.zeros((B, 1), dtype=dtype)), cumsum(steps, axis=-1)], axis=-1)
    density = lam * exp(-compensator)
    mass = matmul(density, w)
    first = matmul(density, (offsets * w).astype(dtype))
    if renormalize:
        expected = first / mass + t0.astype(dtype)
    else:
        expected = first + mass * t0.astype(dtype)
    return TimePrediction(grid, density, mass, expected)


# ---------------------------------------------------------------------------
# survival and link densities (diagnostics; ranking uses intensities)


def survival_term(model: GHNN, enc: EncodedHistory, t, grid_points: int = 20) -> Tensor:
    """Integral of the summed candidate intensities from ``t_L`` to ``t``; zero without history."""
    t = _check_time(enc, t)
    t_start = enc.t_last_or(t)
    span = t - t_start
    if np.any(span > 0) and grid_points < 2:
        raise ValueError("need at least two grid points for a non-empty interval")
    B = enc.size
    if not np.any(span > 0):
        return Tensor(np.zeros(B, dtype=model.dtype))
    frac = np.linspace(0.0, 1.0, grid_points)
    grid = t_start[:, None] + span[:, None] * frac[None, :]
    totals = []
    for g in range(grid_points):
        totals.append(reshape(tsum(intensity_all(model, enc, grid[:, g]), axis=-1), (B, 1)))
    lam_surv = concat(totals, axis=-1)                      # (B, G)
    w = trapezoid_weights(frac)
    weights = (span[:, None] * w[None, :]).astype(model.dtype)
    return tsum(lam_surv * weights, axis=-1)


def link_log_density(model: GHNN, enc: EncodedHistory, t, grid_points: int = 20) -> Tensor:
    """``log lambda(c, t) - survival`` for every candidate ``c``; shape (B, N_e)."""
    surv = survival_term(model, enc, t, grid_points)
    return log(intensity_all(model, enc, t)) - reshape(surv, (enc.size, 1))
