import json
import math

import numpy as np
import pytest

from ghnn import model as gm
from ghnn import training as tr
from ghnn.numerics import Parameter, Tensor, backward, precision
from ghnn.synth import SynthSpec, generate_periodic
from ghnn.tkg_store import Dataset, Quadruple, Vocab
from helpers import finite_difference_check, random_quads, tiny_model


def small_config(**kw):
    base = dict(embed_dim=6, hidden_dim=6, batch_size=64, epochs=3, eval_every=1, seed=3)
    base.update(kw)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def periodic():
    return generate_periodic(SynthSpec(n_entities=10, n_events=200, seed=5))


def tiny_batch(rng, ne=5, n=6):
    quads = random_quads(rng, 30, ne, 2, tmax=6)
    return tr.build_queries(quads[-n:], quads, 3)


# --- link loss ---------------------------------------------------------------

def test_link_loss_uniform(f64):
    assert tr.link_loss(Tensor(np.zeros((1, 4))), [2]).item() == pytest.approx(math.log(4), abs=1e-15)


def test_link_loss_saturates(f64):
    logits = np.zeros((1, 5))
    logits[0, 1] = 1e4
    assert tr.link_loss(Tensor(logits), [1]).item() < 1e-12


def test_link_loss_matches_scalar_loop(f64, rng):
    logits = rng.standard_normal((6, 7)) * 3
    truth = rng.integers(7, size=6)
    ref = 0.0
    for row, y in zip(logits, truth):
        z = sum(math.exp(v) for v in row)
        ref -= math.log(math.exp(row[y]) / z)
    assert tr.link_loss(Tensor(logits), truth).item() == pytest.approx(ref, rel=1e-12)


def test_link_loss_rejects_bad_truth(f64):
    with pytest.raises(ValueError):
        tr.link_loss(Tensor(np.zeros((1, 4))), [4])


def test_link_loss_shift_invariant(f64, rng):
    logits = rng.standard_normal((5, 9))
    truth = rng.integers(9, size=5)
    base = tr.link_loss(Tensor(logits), truth).item()
    for c in (-100.0, 3.7, 1e3):
        assert abs(tr.link_loss(Tensor(logits + c), truth).item() - base) < 1e-6


# --- time loss ---------------------------------------------------------------

def test_time_loss_examples(f64):
    assert tr.time_loss(Tensor([3.0, 4.0]), [3.0, 4.0]).item() == 0.0
    assert tr.time_loss(Tensor([1.0, 2.0]), [2.0, 4.0]).item() == 5.0
    assert tr.time_loss(Tensor([1.0, 2.0]), [2.0, 4.0], mask=[True, False]).item() == 1.0


def test_time_loss_gradient(rng):
    m = tiny_model()
    batch = tiny_batch(rng)
    horizon = tr.default_horizon(batch)

    def loss():
        enc_sp = gm.encode_history(m, batch.sp)
        enc_op = gm.encode_history(m, batch.op)
        pred = gm.time_density_and_expectation(m, enc_sp, enc_op, batch.events, horizon, 30).expected
        return tr.time_loss(pred, batch.times, tr.time_targets_mask(batch))

    with precision(np.float64):
        report = finite_difference_check(m.parameters(), loss, rtol=1e-4, atol=1e-7)
    assert max(report.values()) <= 1.0, report


@pytest.mark.parametrize("readout", ["gate", "embedding"])
def test_total_loss_gradient(readout, rng):
    m = tiny_model(readout=readout)
    batch = tiny_batch(rng)
    with precision(np.float64):
        report = finite_difference_check(
            m.parameters(), lambda: tr.batch_loss(m, batch, 0.1, 4.0, 25).total, rtol=1e-4, atol=1e-7)
    assert max(report.values()) <= 1.0, report


# --- optimizer -------------------------------------------------------------------

def reference_adamw(theta, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8, clip=None):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, 1):
        n = np.linalg.norm(g)
        if clip is not None and n > clip:
            g = g * clip / (n + 1e-12)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * ((m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps) + wd * theta)
    return theta


@pytest.mark.parametrize("clip", [None, 0.5])
def test_adamw_matches_reference(rng, clip):
    theta = rng.standard_normal(5)
    grads = [rng.standard_normal(5) * 3 for _ in range(4)]
    p = Parameter(theta, "p", np.float64)
    opt = tr.AdamW([p], lr=0.01, weight_decay=0.1, clip_norm=clip)
    for g in grads:
        opt.zero_grad()
        p.grad[...] = g
        opt.step()
    np.testing.assert_allclose(p.data, reference_adamw(theta, grads, 0.01, 0.1, clip=clip), rtol=1e-12)


def test_weight_decay_is_decoupled():
    p = Parameter([2.0], "p", np.float64)
    opt = tr.AdamW([p], lr=0.1, weight_decay=0.5)
    opt.step()  # zero gradient: only the decay term moves the parameter
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


# --- config ------------------------------------------------------------------------

def test_config_defaults_and_validation():
    cfg = tr.TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.weight_decay, cfg.max_history, cfg.embed_dim) == (0.001, 1024, 1e-5, 10, 200)
    for bad in (dict(lr=0.0), dict(batch_size=0), dict(nu=-1.0), dict(precision="half")):
        with pytest.raises(ValueError):
            tr.TrainConfig(**bad).validate()
    with pytest.raises(ValueError):
        tr.TrainConfig.from_dict({"learning_rate": 0.1})


# --- training loop ------------------------------------------------------------------

def test_first_batch_loss_finite(periodic):
    trainer = tr.Trainer(periodic, tr.TrainConfig(epochs=1))
    batch = trainer.queries.take(np.arange(min(256, len(trainer.queries.quads))))
    out = tr.batch_loss(trainer.model, batch, 0.01, trainer.horizon, 100)
    assert math.isfinite(out.total.item()) and out.link > 0


def test_deterministic_runs(periodic):
    a = tr.train(periodic, small_config()).history
    b = tr.train(periodic, small_config()).history
    strip = lambda h: [(r["link_loss"], r["time_loss"], r["val_mrr"]) for r in h]
    assert strip(a) == strip(b)


def test_nu_zero_skips_time_branch(periodic, monkeypatch):
    ref = tr.Trainer(periodic, small_config(nu=0.0, horizon=5.0))
    ref.run_epoch()

    def boom(*a, **k):
        raise AssertionError("time branch evaluated with nu = 0")

    monkeypatch.setattr(gm, "time_density_and_expectation", boom)
    other = tr.Trainer(periodic, small_config(nu=0.0, horizon=50.0))
    rec = other.run_epoch()
    assert rec["time_loss"] == 0.0
    for p, q in zip(ref.model.parameters(), other.model.parameters()):
        assert p.data.tobytes() == q.data.tobytes()


def test_train_loss_decreases_over_first_epochs():
    ds = generate_periodic(SynthSpec(seed=0))
    trainer = tr.Trainer(ds, tr.TrainConfig(seed=0))
    totals = []
    for _ in range(5):
        rec = trainer.run_epoch()
        totals.append(rec["link_loss"] + trainer.config.nu * rec["time_loss"])
    assert all(b < a for a, b in zip(totals, totals[1:])), totals


def test_checkpoint_resume_is_bitwise(periodic, tmp_path):
    cfg = small_config(epochs=3)
    straight = tr.Trainer(periodic, cfg)
    for _ in range(3):
        last = straight.run_epoch()

    first = tr.Trainer(periodic, small_config(epochs=3))
    for _ in range(2):
        first.run_epoch()
    tr.save_checkpoint(first.checkpoint(), tmp_path / "ck")
    loaded = tr.load_checkpoint(tmp_path / "ck")
    resumed = tr.Trainer.from_checkpoint(loaded, periodic)
    rec = resumed.run_epoch()
    assert (rec["link_loss"], rec["time_loss"]) == (last["link_loss"], last["time_loss"])
    for p, q in zip(straight.model.parameters(), resumed.model.parameters()):
        assert p.data.tobytes() == q.data.tobytes()


def test_checkpoint_tensors_roundtrip(tmp_path, periodic):
    trainer = tr.Trainer(periodic, small_config(precision="extended"))
    trainer.run_epoch()
    tr.save_checkpoint(trainer.checkpoint(), tmp_path)
    back = tr.load_checkpoint(tmp_path)
    assert back.epoch == 1 and back.config == trainer.config
    for name, arr in trainer.model.state_dict().items():
        got = back.model.state_dict()[name]
        assert got.dtype == arr.dtype and got.tobytes() == arr.tobytes()


def test_non_finite_loss_aborts(periodic):
    trainer = tr.Trainer(periodic, small_config())
    trainer.model.entity_emb.data[...] = np.nan
    with pytest.raises(tr.NumericError):
        trainer.run_epoch()


def test_train_writes_run_directory(periodic, tmp_path):
    res = tr.train(periodic, small_config(epochs=2), run_dir=tmp_path)
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert set(rec) >= {"epoch", "link_loss", "time_loss", "val_mrr", "wall_time"}
    assert (tmp_path / "best" / "manifest.json").exists() and (tmp_path / "last" / "manifest.json").exists()
    best_mrr = max(r["val_mrr"] for r in res.history)
    assert res.best.history[-1]["val_mrr"] == best_mrr


def test_default_horizon_is_largest_history_gap():
    quads = [Quadruple(0, 0, 1, 0.0), Quadruple(0, 0, 1, 3.0), Quadruple(0, 0, 1, 10.0), Quadruple(2, 0, 3, 4.0)]
    batch = tr.build_queries(quads, quads, 10)
    assert tr.default_horizon(batch) == 7.0
    assert list(tr.time_targets_mask(batch)) == [False, True, True, False]
