"""Joint link/time loss, AdamW updates, batching, checkpointing and the epoch loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model as gm
from .numerics import Parameter, Tensor, backward, getitem, global_grad_norm, load_tensor, log_softmax, no_grad, precision, save_tensor, tsum
from .tkg_store import Dataset, HistorySequence, Quadruple, build_slice_index, query_histories

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Raised when a training loss becomes NaN or infinite."""


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 1024
    weight_decay: float = 1e-5
    epochs: int = 200
    nu: float = 0.01
    max_history: int = 10
    embed_dim: int = 200
    hidden_dim: int = 200
    softplus_scale: float = 1.0
    psi: float = 1.0
    z_activation: str = "sigmoid"
    readout: str = "gate"
    time_combine: str = "mean"
    horizon: float | None = None       # None: largest training gap
    grid_points: int = 100
    eval_grid_points: int = 1000
    renormalize: bool = True
    clip_norm: float = 10.0
    seed: int = 0
    precision: str = "standard"
    eval_every: int = 1
    protocol: str = "time-aware"
    train_only_history: bool = False

    def validate(self) -> None:
        if self.lr <= 0 or self.batch_size <= 0:
            raise ValueError("lr and batch_size must be positive")
        if self.nu < 0:
            raise ValueError("nu must be non-negative")
        if self.max_history < 1:
            raise ValueError("max_history must be positive")
        if self.precision not in ("standard", "extended"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "extended" else np.float32

    def model_config(self, dataset: Dataset) -> gm.ModelConfig:
        return gm.ModelConfig(
            num_entities=dataset.num_entities, num_predicates=dataset.num_predicates,
            embed_dim=self.embed_dim, hidden_dim=self.hidden_dim, softplus_scale=self.softplus_scale,
            psi=self.psi, z_activation=self.z_activation, readout=self.readout,
            time_combine=self.time_combine,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# losses


def link_loss(logits: Tensor, truth) -> Tensor:
    """Summed cross-entropy of the true ids under softmax over candidate log-intensities."""
    truth = np.asarray(truth, dtype=np.int64)
    n = logits.shape[-1]
    if np.any(truth < 0) or np.any(truth >= n):
        raise ValueError("truth id out of range")
    logp = log_softmax(logits, axis=-1)
    return -tsum(getitem(logp, (np.arange(len(truth)), truth)))


def time_loss(predicted: Tensor, t_true, mask=None) -> Tensor:
    """Summed squared error between predicted and true occurrence times."""
    t_true = np.asarray(t_true, dtype=predicted.dtype)
    err = predicted - t_true
    sq = err * err
    if mask is not None:
        sq = sq * np.asarray(mask, dtype=predicted.dtype)
    return tsum(sq)


@dataclass
class QueryBatch:
    """Training/eval quadruples with their subject- and object-side histories."""

    quads: list[Quadruple]
    sp: list[HistorySequence]
    op: list[HistorySequence]

    @property
    def events(self) -> np.ndarray:
        return np.array([(q.subject, q.predicate, q.object) for q in self.quads], dtype=np.int64).reshape(-1, 3)

    @property
    def times(self) -> np.ndarray:
        return np.array([q.timestamp for q in self.quads], dtype=np.float64)

    def take(self, idx) -> "QueryBatch":
        return QueryBatch([self.quads[i] for i in idx], [self.sp[i] for i in idx], [self.op[i] for i in idx])


def build_queries(quads: Sequence[Quadruple], history_events: Sequence[Quadruple], max_history: int) -> QueryBatch:
    index = build_slice_index(history_events)
    sp, op = [], []
    for q in quads:
        a, b = query_histories(index, q, max_history)
        sp.append(a)
        op.append(b)
    return QueryBatch(list(quads), sp, op)


def _split_encoding(enc: gm.EncodedHistory, B: int) -> tuple[gm.EncodedHistory, gm.EncodedHistory]:
    def part(sl):
        st = enc.state
        return gm.EncodedHistory(
            gm.cl.ClstmState(st.c_start[sl], st.c_target[sl], st.delta[sl], st.o_gate[sl], st.t_update[sl]),
            enc.t_last[sl], enc.anchors[sl], enc.predicates[sl])
    return part(slice(0, B)), part(slice(B, 2 * B))


def time_targets_mask(batch: QueryBatch) -> np.ndarray:
    """Queries with at least one non-empty history branch take part in time prediction."""
    return np.array([len(a) > 0 or len(b) > 0 for a, b in zip(batch.sp, batch.op)], dtype=bool)


@dataclass
class BatchLoss:
    total: Tensor
    link: float
    time: float


def batch_loss(model: gm.GHNN, batch: QueryBatch, nu: float, horizon: float, grid_points: int,
               renormalize: bool = True) -> BatchLoss:
    """``L_sp + L_op + nu * L_time`` for one batch (sums over queries)."""
    B = len(batch.quads)
    enc = gm.encode_batch(model, gm.make_history_batch(batch.sp + batch.op))
    events = batch.events
    t = batch.times
    logits = gm.log_intensity_all(model, enc, np.concatenate([t, t]))
    truth = np.concatenate([events[:, 2], events[:, 0]])
    l_link = link_loss(logits, truth)
    total = l_link
    l_time = 0.0
    if nu > 0:
        mask = time_targets_mask(batch)
        if mask.any():
            enc_sp, enc_op = _split_encoding(enc, B)
            pred = gm.time_density_and_expectation(model, enc_sp, enc_op, events, horizon, grid_points,
                                                   renormalize).expected
            lt = time_loss(pred, t, mask)
            l_time = lt.item()
            total = total + lt * nu
    return BatchLoss(total, l_link.item(), l_time)


def default_horizon(batch: QueryBatch) -> float:
    """Largest gap between a training quadruple and its latest relevant history event."""
    gaps = []
    for q, a, b in zip(batch.quads, batch.sp, batch.op):
        lasts = [h.t_last for h in (a, b) if h.t_last is not None]
        if lasts:
            gaps.append(q.timestamp - max(lasts))
    gaps = [g for g in gaps if g > 0]
    return float(max(gaps)) if gaps else 1.0


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay and optional global-norm gradient clipping."""

    def __init__(self, params: list[Parameter], lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999),
                 eps=1e-8, clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> float:
        norm = global_grad_norm(self.params)
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.dtype)
        return norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: gm.GHNN
    config: TrainConfig
    epoch: int
    optimizer: AdamW | None = None
    history: list[dict] = field(default_factory=list)
    rng_state: dict | None = None
    data_dir: str | None = None
    time_scale: float = 1.0


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    for name, p in ckpt.model.named_parameters().items():
        save_tensor(directory / "tensors" / f"{name}.bin", p.data, name)
    opt = None
    if ckpt.optimizer is not None:
        for i, (m, v) in enumerate(zip(ckpt.optimizer.m, ckpt.optimizer.v)):
            name = ckpt.optimizer.params[i].name
            save_tensor(directory / "tensors" / f"adam_m.{name}.bin", m, f"adam_m.{name}")
            save_tensor(directory / "tensors" / f"adam_v.{name}.bin", v, f"adam_v.{name}")
        opt = {"t": ckpt.optimizer.t}
    manifest = {
        "format": 1,
        "epoch": ckpt.epoch,
        "train_config": asdict(ckpt.config),
        "model_config": ckpt.model.config_dict(),
        "optimizer": opt,
        "history": ckpt.history,
        "rng_state": ckpt.rng_state,
        "data_dir": ckpt.data_dir,
        "time_scale": ckpt.time_scale,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default))
    return directory


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {directory}")
    manifest = json.loads(manifest_path.read_text())
    config = TrainConfig.from_dict(manifest["train_config"])
    model = gm.GHNN(gm.ModelConfig(**manifest["model_config"]), dtype=config.dtype)
    state = {name: load_tensor(directory / "tensors" / f"{name}.bin")[1] for name in model.named_parameters()}
    model.load_state_dict(state)
    optimizer = None
    if manifest.get("optimizer") is not None:
        optimizer = AdamW(model.parameters(), config.lr, config.weight_decay, clip_norm=config.clip_norm)
        optimizer.t = manifest["optimizer"]["t"]
        for i, p in enumerate(model.parameters()):
            optimizer.m[i] = load_tensor(directory / "tensors" / f"adam_m.{p.name}.bin")[1].copy()
            optimizer.v[i] = load_tensor(directory / "tensors" / f"adam_v.{p.name}.bin")[1].copy()
    return Checkpoint(model, config, manifest["epoch"], optimizer, manifest.get("history", []),
                      manifest.get("rng_state"), manifest.get("data_dir"), manifest.get("time_scale", 1.0))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: gm.GHNN
    history: list[dict]
    best: Checkpoint | None
    last: Checkpoint


class Trainer:
    """Holds model, optimizer, RNG and cached query histories across epochs."""

    def __init__(self, dataset: Dataset, config: TrainConfig, data_dir: str | None = None):
        config.validate()
        self.dataset = dataset
        self.config = config
        self.data_dir = data_dir
        self.rng = np.random.default_rng(config.seed)
        with precision(config.dtype):
            self.model = gm.GHNN(config.model_config(dataset), np.random.default_rng(config.seed), config.dtype)
        self.optimizer = AdamW(self.model.parameters(), config.lr, config.weight_decay, clip_norm=config.clip_norm)
        self.epoch = 0
        self.history: list[dict] = []
        # the train split precedes valid/test, so train-only histories are the same
        # as all-split histories truncated at each training timestamp
        self.queries = build_queries(dataset.train, dataset.train, config.max_history)
        self.horizon = config.horizon if config.horizon else default_horizon(self.queries)
        self.config.horizon = self.horizon

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dataset: Dataset) -> "Trainer":
        tr = cls(dataset, ckpt.config, ckpt.data_dir)
        tr.model.load_state_dict(ckpt.model.state_dict())
        if ckpt.optimizer is not None:
            tr.optimizer.t = ckpt.optimizer.t
            tr.optimizer.m = [m.copy() for m in ckpt.optimizer.m]
            tr.optimizer.v = [v.copy() for v in ckpt.optimizer.v]
        if ckpt.rng_state is not None:
            tr.rng.bit_generator.state = ckpt.rng_state
        tr.epoch = ckpt.epoch
        tr.history = list(ckpt.history)
        return tr

    def checkpoint(self) -> Checkpoint:
        snap = gm.GHNN(self.model.config, dtype=self.config.dtype)
        snap.load_state_dict(self.model.state_dict())
        opt = AdamW(snap.parameters(), self.config.lr, self.config.weight_decay, clip_norm=self.config.clip_norm)
        opt.t = self.optimizer.t
        opt.m = [m.copy() for m in self.optimizer.m]
        opt.v = [v.copy() for v in self.optimizer.v]
        return Checkpoint(snap, self.config, self.epoch, opt, list(self.history),
                          self.rng.bit_generator.state, self.data_dir, self.dataset.time_scale)

    def run_epoch(self) -> dict:
        cfg = self.config
        n = len(self.queries.quads)
        order = self.rng.permutation(n)
        start = time.perf_counter()
        link_sum = time_sum = 0.0
        with precision(cfg.dtype):
            for lo in range(0, n, cfg.batch_size):
                batch = self.queries.take(order[lo:lo + cfg.batch_size])
                self.optimizer.zero_grad()
                out = batch_loss(self.model, batch, cfg.nu, self.horizon, cfg.grid_points, cfg.renormalize)
                value = out.total.item()
                if not math.isfinite(value):
                    raise NumericError(
                        f"non-finite loss {value} at epoch {self.epoch + 1}, batch offset {lo}: "
                        f"link={out.link} time={out.time}")
                backward(out.total)
                self.optimizer.step()
                link_sum += out.link
                time_sum += out.time
        self.epoch += 1
        return {
            "epoch": self.epoch,
            "link_loss": link_sum / max(n, 1),
            "time_loss": time_sum / max(n, 1),
            "wall_time": time.perf_counter() - start,
        }


def train(dataset: Dataset, config: TrainConfig, run_dir=None, data_dir: str | None = None,
          trainer: Trainer | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train for ``config.epochs`` epochs (continuing ``trainer`` when given).

    Validation MRR (``config.protocol``) is computed every ``eval_every`` epochs; the
    best-validation (ties broken by training loss) and last checkpoints are written
    under ``run_dir`` when given.
    """
    from .evaluation import evaluate_link

    trainer = trainer or Trainer(dataset, config, data_dir)
    run_dir = Path(run_dir) if run_dir is not None else None
    best_score: tuple = ()
    best: Checkpoint | None = None
    log_fh = open(run_dir / "train_log.jsonl", "a") if run_dir is not None else None
    try:
        while trainer.epoch < config.epochs:
            record = trainer.run_epoch()
            record["val_mrr"] = None
            if dataset.valid and config.eval_every and trainer.epoch % config.eval_every == 0:
                record["val_mrr"] = evaluate_link(trainer.model, dataset, "valid", config.protocol,
                                                  config.max_history, config.train_only_history)["mrr"]
            trainer.history.append(record)
            log.info("epoch %(epoch)d link %(link_loss).5f time %(time_loss).5f val_mrr %(val_mrr)s", record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if on_epoch is not None:
                on_epoch(record)
            if record["val_mrr"] is None and best is not None and dataset.valid:
                continue
            # validation MRR first; ties (e.g. a saturated MRR) go to the lower training loss
            train_loss = record["link_loss"] + config.nu * record["time_loss"]
            score = (record["val_mrr"] if record["val_mrr"] is not None else -math.inf, -train_loss)
            if best is None or score > best_score:
                best_score = score
                best = trainer.checkpoint()
                if run_dir is not None:
                    save_checkpoint(best, run_dir / "best")
    finally:
        if log_fh is not None:
            log_fh.close()
    last = trainer.checkpoint()
    if run_dir is not None:
        save_checkpoint(last, run_dir / "last")
    return TrainResult(trainer.model, trainer.history, best, last)
