"""Shared fixtures-as-functions: tiny models, random histories, finite differences."""

from __future__ import annotations

import numpy as np

from ghnn import clstm as cl
from ghnn import model as gm
from ghnn.numerics import backward, precision
from ghnn.tkg_store import Direction, HistorySequence, Quadruple


def tiny_model(ne=5, npred=2, r=4, d=4, seed=0, dtype=np.float64, scale=1.0, **kw) -> gm.GHNN:
    """Small model with non-trivial weights (biases included) in extended precision."""
    rng = np.random.default_rng(seed)
    cfg = gm.ModelConfig(ne, npred, embed_dim=r, hidden_dim=d, **kw)
    with precision(dtype):
        m = gm.GHNN(cfg, rng, dtype)
    for p in m.parameters():
        p.data = (p.data + scale * 0.3 * rng.standard_normal(p.shape)).astype(dtype)
    return m


def random_history(rng, ne, npred, direction=Direction.SUBJECT, length=3, t0=0.0, anchor=None, pred=None):
    times = np.cumsum(rng.uniform(0.2, 1.5, size=length)) + t0
    nbrs = tuple(tuple(sorted(rng.choice(ne, size=rng.integers(1, 4), replace=False).tolist())) for _ in range(length))
    anchor = int(rng.integers(ne)) if anchor is None else anchor
    pred = int(rng.integers(npred)) if pred is None else pred
    return HistorySequence(Direction(direction), anchor, pred, tuple(float(t) for t in times), nbrs)


def random_quads(rng, n, ne, npred, tmax=10, integer=True):
    out = []
    for _ in range(n):
        s, o = rng.choice(ne, size=2, replace=False)
        t = int(rng.integers(tmax)) if integer else float(rng.uniform(0, tmax))
        out.append(Quadruple(int(s), int(rng.integers(npred)), int(o), float(t)))
    out.sort(key=lambda q: q.timestamp)
    return out


def finite_difference_check(params, loss_fn, eps=1e-5, rtol=1e-4, atol=1e-7, max_entries=None, rng=None):
    """Compare ``backward`` gradients of ``loss_fn()`` with central differences.

    Returns ``{name: max violation ratio}``; a ratio <= 1 means the entry is within
    ``atol + rtol * |fd|``.
    """
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    analytic = {p.name: p.grad.copy() for p in params}
    report = {}
    for p in params:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            up = loss_fn().item()
            flat[i] = old - eps
            down = loss_fn().item()
            flat[i] = old
            fd = (up - down) / (2 * eps)
            an = analytic[p.name].reshape(-1)[i]
            worst = max(worst, abs(an - fd) / (atol + rtol * abs(fd)))
        report[p.name] = worst
    return report


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def oracle_step(P, k, st_, t):
    """Independent transcription of one cLSTM update; ``st_`` = (c, cbar, delta, o, t_m)."""
    c, cbar, delta, o, tm = st_
    c_t = cbar + (c - cbar) * np.exp(-delta * (t - tm))
    h = o * np.tanh(c_t)
    gate = {}
    for g in cl.GATES:
        W, U, b = P.gate_weights(g)
        gate[g] = W @ k + U @ h + b
    i, ib, f, fb = (sig(gate[g]) for g in ("i", "i_bar", "f", "f_bar"))
    z = sig(gate["z"])
    o_new = sig(gate["o"])
    dlt = P.psi * np.log1p(np.exp(gate["delta"] / P.psi))
    return (f * c_t + i * z, fb * cbar + ib * z, dlt, o_new, t)


def oracle_encode(m, hist):
    """Unrolled history encoder on plain arrays: returns (c, cbar, delta, o, t_m)."""
    E, Pm = m.entity_emb.data, m.predicate_emb.data
    d = m.config.hidden_dim
    state = (np.zeros(d), np.zeros(d), np.ones(d), np.full(d, 0.5), 0.0)
    for t, nbrs in zip(hist.times, hist.neighbors):
        g = sum(E[n] for n in nbrs) / len(nbrs)
        k = np.concatenate([g, E[hist.anchor], Pm[hist.predicate]])
        state = oracle_step(m.clstm, k, state, t)
    return state


def oracle_logits(m, hist, t):
    """Per-candidate scalar loop of the intensity head's pre-softplus score."""
    c, cbar, delta, o, tm = oracle_encode(m, hist)
    c_t = cbar + (c - cbar) * np.exp(-delta * (t - tm))
    E, Pm = m.entity_emb.data, m.predicate_emb.data
    Wl, Wh = m.W_lambda.data, m.W_h.data
    out = []
    for cand in range(E.shape[0]):
        h = o * np.tanh(c_t) if m.config.readout == "gate" else E[cand] * np.tanh(c_t)
        x = np.concatenate([E[hist.anchor], Wh @ h, Pm[hist.predicate]])
        out.append(float((Wl @ x) @ E[cand]))
    return np.array(out)


def softplus(x, s):
    return s * np.logaddexp(0.0, np.asarray(x) / s)
