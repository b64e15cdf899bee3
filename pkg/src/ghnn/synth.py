"""Seeded synthetic temporal KGs with known generating processes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tkg_store import Dataset, Quadruple, Vocab


@dataclass
class SynthSpec:
    n_entities: int = 20
    n_predicates: int = 2
    n_events: int = 600
    seed: int = 0
    mode: str = "periodic"
    n_types: int | None = None          # default: one triplet per entity
    # periodic mode: integer periods (in ticks) drawn from [min_period, max_period]
    min_period: int = 2
    max_period: int = 6
    # explicit (s, p, o, period, phase) types; overrides random types
    types: Sequence[tuple[int, int, int, float, float]] | None = None
    horizon: float | None = None
    # hawkes mode
    mu: float = 0.5
    alpha: float = 0.4
    beta: float = 1.0
    tick: float = 1.0
    split_fractions: tuple[float, float] = (0.8, 0.1)

    def validate(self) -> None:
        if self.mode not in ("periodic", "hawkes"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if min(self.n_entities, self.n_predicates, self.n_events) <= 0:
            raise ValueError("counts must be positive")
        if self.n_entities < 2 and self.types is None:
            raise ValueError("need at least two entities")
        if self.tick <= 0:
            raise ValueError("tick must be positive")
        if self.mode == "periodic" and not 0 < self.min_period <= self.max_period:
            raise ValueError("invalid period range")
        if self.mode == "hawkes":
            if self.mu <= 0 or self.alpha < 0 or self.beta <= 0:
                raise ValueError("hawkes needs mu > 0, alpha >= 0, beta > 0")
            if self.alpha / self.beta >= 1:
                raise ValueError(f"unstable hawkes parameters: alpha/beta = {self.alpha / self.beta:.3g} >= 1")


def _random_triplets(spec: SynthSpec, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    n = spec.n_types or spec.n_entities
    ne = spec.n_entities
    out = []
    seen = set()
    round_ = 0
    while len(out) < n:
        # subjects in a shuffled order, objects by a derangement of the same order
        subjects = rng.permutation(ne)
        shift = 1 + (round_ % (ne - 1))
        for i, s in enumerate(subjects):
            o = int(subjects[(i + shift) % ne])
            p = int(rng.integers(spec.n_predicates))
            if (int(s), p, o) not in seen:
                seen.add((int(s), p, o))
                out.append((int(s), p, o))
            if len(out) == n:
                break
        round_ += 1
    return out


def _split(events: list[Quadruple], spec: SynthSpec, entities: int, predicates: int) -> Dataset:
    events.sort(key=lambda q: (q.timestamp, q.subject, q.predicate, q.object))
    times = np.array([q.timestamp for q in events])
    n = len(events)
    f_train, f_valid = spec.split_fractions
    # cut on slice boundaries so one timestamp never straddles two splits
    t1 = times[min(int(n * f_train), n - 1)] if n else 0.0
    t2 = times[min(int(n * (f_train + f_valid)), n - 1)] if n else 0.0
    train = [q for q in events if q.timestamp < t1]
    valid = [q for q in events if t1 <= q.timestamp < t2]
    test = [q for q in events if q.timestamp >= t2]
    return Dataset(train, valid, test, Vocab(entities, predicates), time_scale=spec.tick)


def generate_periodic(spec: SynthSpec) -> Dataset:
    """Each triplet type recurs with its own constant period and phase."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    if spec.types is not None:
        types = [(int(s), int(p), int(o), float(per), float(ph)) for s, p, o, per, ph in spec.types]
    else:
        types = []
        for s, p, o in _random_triplets(spec, rng):
            period = int(rng.integers(spec.min_period, spec.max_period + 1))
            phase = int(rng.integers(period))
            types.append((s, p, o, period, phase))
    horizon = spec.horizon
    if horizon is None:
        horizon = spec.n_events / sum(1.0 / t[3] for t in types)
    events = []
    for s, p, o, period, phase in types:
        k = 0
        while phase + k * period < horizon - 1e-9:
            events.append(Quadruple(s, p, o, (phase + k * period) * spec.tick))
            k += 1
    return _split(events, spec, spec.n_entities, spec.n_predicates)


@dataclass
class HawkesStream:
    times: np.ndarray
    max_accept_ratio: float   # largest lambda(t) / dominating rate seen; must be <= 1


def simulate_hawkes(mu: float, alpha: float, beta: float, horizon: float,
                    rng: np.random.Generator) -> HawkesStream:
    """Univariate exponential-kernel Hawkes process on ``[0, horizon)`` by thinning.

    Between events the intensity only decays, so its value just after the current
    time dominates it until the next proposal.
    """
    t = 0.0
    excite = 0.0
    out = []
    worst = 0.0
    while True:
        bound = mu + excite
        w = rng.exponential(1.0 / bound)
        t += w
        if t >= horizon:
            break
        excite *= math.exp(-beta * w)
        lam = mu + excite
        worst = max(worst, lam / bound)
        if rng.uniform() * bound <= lam:
            out.append(t)
            excite += alpha
    return HawkesStream(np.array(out), worst)


def generate_hawkes(spec: SynthSpec) -> Dataset:
    """Independent univariate Hawkes stream per triplet type, discretized to ``tick``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    triplets = _random_triplets(spec, rng)
    rate = spec.mu / (1.0 - spec.alpha / spec.beta)
    horizon = spec.horizon or spec.n_events / (len(triplets) * rate)
    seeds = np.random.SeedSequence(spec.seed).spawn(len(triplets))
    events = set()
    for (s, p, o), ss in zip(triplets, seeds):
        stream = simulate_hawkes(spec.mu, spec.alpha, spec.beta, horizon, np.random.default_rng(ss))
        for t in stream.times:
            events.add(Quadruple(s, p, o, math.floor(t / spec.tick) * spec.tick))
    return _split(list(events), spec, spec.n_entities, spec.n_predicates)


def generate(spec: SynthSpec) -> Dataset:
    return generate_periodic(spec) if spec.mode == "periodic" else generate_hawkes(spec)
