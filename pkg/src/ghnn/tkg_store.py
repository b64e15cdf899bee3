"""Quadruple datasets, graph-slice indexing and relevant-history extraction."""

from __future__ import annotations

import bisect
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

SPLITS = ("train", "valid", "test")


class DataError(ValueError):
    """Malformed or inconsistent dataset files."""


class Quadruple(NamedTuple):
    subject: int
    predicate: int
    object: int
    timestamp: float


class Direction(str, Enum):
    """Which side of a query is known.

    ``SUBJECT`` (subject-side history) answers ``(s, p, ?, t)`` from the objects
    ``s`` linked to under ``p``; ``OBJECT`` answers ``(?, p, o, t)``.
    """

    SUBJECT = "sp"
    OBJECT = "op"


@dataclass
class Vocab:
    entity_count: int
    predicate_count: int
    entity_names: dict[int, str] | None = None
    predicate_names: dict[int, str] | None = None


@dataclass
class Dataset:
    train: list[Quadruple]
    valid: list[Quadruple]
    test: list[Quadruple]
    vocab: Vocab
    time_scale: float = 1.0

    def split(self, name: str) -> list[Quadruple]:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def all_quadruples(self) -> list[Quadruple]:
        return sorted(self.train + self.valid + self.test, key=lambda q: q.timestamp)

    @property
    def num_entities(self) -> int:
        return self.vocab.entity_count

    @property
    def num_predicates(self) -> int:
        return self.vocab.predicate_count

    def timestamps(self) -> list[float]:
        return sorted({q.timestamp for q in self.train + self.valid + self.test})

    def validate(self) -> None:
        for name in SPLITS:
            prev = -math.inf
            for q in self.split(name):
                if not (0 <= q.subject < self.vocab.entity_count and 0 <= q.object < self.vocab.entity_count):
                    raise DataError(f"{name}: entity id out of range in {q}")
                if not 0 <= q.predicate < self.vocab.predicate_count:
                    raise DataError(f"{name}: predicate id out of range in {q}")
                if q.timestamp < 0:
                    raise DataError(f"{name}: negative timestamp in {q}")
                if q.timestamp < prev:
                    raise DataError(f"{name}: timestamps not sorted at {q}")
                prev = q.timestamp


# ---------------------------------------------------------------------------
# files


def _read_quadruples(path: Path, vocab: Vocab, time_scale: float) -> list[Quadruple]:
    if not path.exists():
        raise DataError(f"missing file: {path}")
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 4:
                raise DataError(f"{path}:{lineno}: expected 4 columns, got {len(parts)}")
            try:
                s, p, o, t = (int(x) for x in parts[:4])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer field in {line.strip()!r}") from None
            if s >= vocab.entity_count or o >= vocab.entity_count or s < 0 or o < 0:
                raise DataError(f"{path}:{lineno}: entity id >= declared count {vocab.entity_count}")
            if p >= vocab.predicate_count or p < 0:
                raise DataError(f"{path}:{lineno}: predicate id >= declared count {vocab.predicate_count}")
            if t < 0:
                raise DataError(f"{path}:{lineno}: negative timestamp {t}")
            out.append(Quadruple(s, p, o, t * time_scale))
    out.sort(key=lambda q: q.timestamp)  # stable
    return out


def _read_names(path: Path) -> dict[int, str] | None:
    if not path.exists():
        return None
    names = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            # ICEWS ships "name<TAB>id"; accept either column order
            a, b = line.rstrip("\n").split("\t")[:2]
            if a.strip().lstrip("-").isdigit():
                names[int(a)] = b
            else:
                names[int(b)] = a
    return names


def load_dataset(directory, time_scale: float = 1.0) -> Dataset:
    """Read ``train.txt``/``valid.txt``/``test.txt`` plus ``stat.txt`` from ``directory``.

    Timestamps are multiplied by ``time_scale``; each split is stably sorted by time.
    """
    if not time_scale > 0:
        raise ValueError("time_scale must be positive")
    directory = Path(directory)
    stat = directory / "stat.txt"
    if not stat.exists():
        raise DataError(f"missing file: {stat}")
    fields = stat.read_text().split()
    try:
        vocab = Vocab(int(fields[0]), int(fields[1]))
    except (IndexError, ValueError):
        raise DataError(f"{stat}: expected two integers (entity count, predicate count)") from None
    vocab.entity_names = _read_names(directory / "entity2id.txt")
    vocab.predicate_names = _read_names(directory / "relation2id.txt")
    splits = {name: _read_quadruples(directory / f"{name}.txt", vocab, time_scale) for name in SPLITS}
    return Dataset(vocab=vocab, time_scale=time_scale, **splits)


def _format_time(t: float, time_scale: float) -> str:
    raw = t / time_scale
    r = round(raw)
    if abs(raw - r) > 1e-6 * max(1.0, abs(raw)):
        raise DataError(f"timestamp {t} does not map back to an integer tick under scale {time_scale}")
    return str(int(r))


def save_dataset(dataset: Dataset, directory) -> None:
    """Write ``dataset`` in the format read by :func:`load_dataset` (raw integer ticks)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        with open(directory / f"{name}.txt", "w") as fh:
            for q in dataset.split(name):
                fh.write(f"{q.subject}\t{q.predicate}\t{q.object}\t{_format_time(q.timestamp, dataset.time_scale)}\n")
    (directory / "stat.txt").write_text(f"{dataset.vocab.entity_count}\t{dataset.vocab.predicate_count}\n")
    for fname, names in (("entity2id.txt", dataset.vocab.entity_names),
                         ("relation2id.txt", dataset.vocab.predicate_names)):
        if names:
            with open(directory / fname, "w") as fh:
                for i in sorted(names):
                    fh.write(f"{names[i]}\t{i}\n")


# ---------------------------------------------------------------------------
# slices and histories


@dataclass(frozen=True)
class GraphSlice:
    timestamp: float
    facts: frozenset[Quadruple]


@dataclass(frozen=True)
class HistorySequence:
    direction: Direction
    anchor: int
    predicate: int
    times: tuple[float, ...] = ()
    neighbors: tuple[tuple[int, ...], ...] = ()

    @property
    def steps(self) -> list[tuple[float, tuple[int, ...]]]:
        return list(zip(self.times, self.neighbors))

    @property
    def t_last(self) -> float | None:
        """Timestamp of the latest step, or ``None`` when there is no history."""
        return self.times[-1] if self.times else None

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class SliceIndex:
    """Immutable after construction; safe for concurrent read-only queries."""

    slices: list[GraphSlice]
    # (entity, predicate, direction) -> (sorted times, neighbor tuples)
    _neighbors: dict[tuple[int, int, Direction], tuple[list[float], list[tuple[int, ...]]]] = field(repr=False)

    def neighbors_at(self, entity: int, predicate: int, direction: Direction, t: float) -> frozenset[int]:
        """``O_t(entity, predicate)`` for subject-side, ``S_t(entity, predicate)`` for object-side."""
        entry = self._neighbors.get((entity, predicate, Direction(direction)))
        if entry is None:
            return frozenset()
        times, nbrs = entry
        i = bisect.bisect_left(times, t)
        if i < len(times) and times[i] == t:
            return frozenset(nbrs[i])
        return frozenset()

    def keys(self):
        return self._neighbors.keys()


def build_slice_index(events: Iterable[Quadruple]) -> SliceIndex:
    events = sorted(events, key=lambda q: q.timestamp)
    by_time: dict[float, set[Quadruple]] = defaultdict(set)
    groups: dict[tuple[int, int, Direction], dict[float, set[int]]] = defaultdict(lambda: defaultdict(set))
    for q in events:
        by_time[q.timestamp].add(q)
        groups[(q.subject, q.predicate, Direction.SUBJECT)][q.timestamp].add(q.object)
        groups[(q.object, q.predicate, Direction.OBJECT)][q.timestamp].add(q.subject)
    slices = [GraphSlice(t, frozenset(by_time[t])) for t in sorted(by_time)]
    neighbors = {}
    for key, per_time in groups.items():
        times = sorted(per_time)
        neighbors[key] = (times, [tuple(sorted(per_time[t])) for t in times])
    return SliceIndex(slices, neighbors)


def history_for(index: SliceIndex, anchor: int, predicate: int, direction: Direction,
                query_time: float, max_len: int = 10) -> HistorySequence:
    """The ``max_len`` latest non-empty neighbor groups strictly before ``query_time``."""
    if query_time < 0:
        raise ValueError("query_time must be non-negative")
    if max_len < 1:
        raise ValueError("max_len must be positive")
    direction = Direction(direction)
    entry = index._neighbors.get((anchor, predicate, direction))
    if entry is None:
        return HistorySequence(direction, anchor, predicate)
    times, nbrs = entry
    end = bisect.bisect_left(times, query_time)
    start = max(0, end - max_len)
    return HistorySequence(direction, anchor, predicate, tuple(times[start:end]), tuple(nbrs[start:end]))


def query_histories(index: SliceIndex, q: Quadruple, max_len: int = 10) -> tuple[HistorySequence, HistorySequence]:
    """Subject-side and object-side histories of quadruple ``q``."""
    return (history_for(index, q.subject, q.predicate, Direction.SUBJECT, q.timestamp, max_len),
            history_for(index, q.object, q.predicate, Direction.OBJECT, q.timestamp, max_len))


def split_times(quads: list[Quadruple]) -> np.ndarray:
    return np.array([q.timestamp for q in quads], dtype=np.float64)
