import math

import numpy as np
import pytest
import torch

from interfuse.checkpoint import FORMAT_VERSION, load_model, read_container, write_container
from interfuse.data import PairDataset
from interfuse.errors import CheckpointError, ConfigError, NumericalError
from interfuse.gradcheck import ToyFusionNet, grad_check
from interfuse.interventions import InterventionConfig, make_intervention_set
from interfuse.losses import LossWeights, fidelity_loss, total_loss
from interfuse.model import forward_with_interventions
from interfuse.trainer import (
    TrainConfig,
    TrainState,
    make_optimizer,
    read_loss_log,
    sample_batch,
    train,
    train_step,
    validate,
)


def tiny_config(out, **kw):
    base = dict(epochs=2, steps_per_epoch=2, batch_size=2, patch=32, channels=(4, 8, 8), pool_r=2,
                block_size=8, seed=0, out=str(out))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def split(toy_dataset):
    return (PairDataset(toy_dataset.entries[:3], name="train"),
            PairDataset(toy_dataset.entries[3:], name="val"))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(patch=30)
    with pytest.raises(ConfigError):
        TrainConfig(patch=16, pool_r=8)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=16, micro_batch=5)
    with pytest.raises(ConfigError):
        TrainConfig(nec_mode="minimise")


def test_train_writes_artifacts_and_log_invariants(tmp_path, split):
    cfg = tiny_config(tmp_path / "run")
    best = train(cfg, *split)
    out = tmp_path / "run"
    for name in ("train_config.txt", "loss_log.txt", "validation.csv", "epoch_001.ckpt",
                 "epoch_002.ckpt", "loss_curve.png"):
        assert (out / name).is_file(), name
    assert best.is_file()
    rows = read_loss_log(out / "loss_log.txt")
    assert [r["step"] for r in rows] == [1, 2, 3, 4]
    for r in rows:
        recomposed = r["fidelity"] + cfg.alpha * r["inv"] + cfg.beta * r["nec"]
        assert abs(recomposed - r["total"]) <= 1e-6
    assert len((out / "validation.csv").read_text().strip().split("\n")) == 3
    assert "alpha = 0.1" in (out / "train_config.txt").read_text()


def test_runs_are_bit_identical(tmp_path, split):
    names = ("loss_log.txt", "epoch_001.ckpt", "epoch_002.ckpt", "best.ckpt", "validation.csv")
    snapshots = []
    for _ in range(2):  # same config, output directory included
        train(tiny_config(tmp_path / "run"), *split)
        snapshots.append({n: (tmp_path / "run" / n).read_bytes() for n in names})
    assert snapshots[0] == snapshots[1]


def test_resume_continues_bit_identically(tmp_path, split):
    full = tiny_config(tmp_path / "full")
    train(full, *split)
    resumed = tiny_config(tmp_path / "resumed")
    train(resumed, *split, resume=tmp_path / "full/epoch_001.ckpt")
    ref = read_loss_log(tmp_path / "full/loss_log.txt")
    got = read_loss_log(tmp_path / "resumed/loss_log.txt")
    assert [r["step"] for r in got] == [3, 4]
    assert got == ref[2:]
    full_arrays = read_container(tmp_path / "full/epoch_002.ckpt")[0]
    resumed_arrays = read_container(tmp_path / "resumed/epoch_002.ckpt")[0]
    assert full_arrays.keys() == resumed_arrays.keys()
    assert all(np.array_equal(full_arrays[k], resumed_arrays[k]) for k in full_arrays)


def test_zero_weights_total_equals_fidelity(tmp_path, split):
    cfg = tiny_config(tmp_path / "z", alpha=0.0, beta=0.0, epochs=1, steps_per_epoch=1)
    train(cfg, *split)
    (row,) = read_loss_log(tmp_path / "z/loss_log.txt")
    assert row["total"] == row["fidelity"]


def test_training_never_touches_validation_for_steps(tmp_path, split):
    tr, va = split
    train(tiny_config(tmp_path / "c", epochs=1, steps_per_epoch=10), tr, va, max_steps=3)
    assert va.access_count == 0
    assert tr.access_count == 3 * 2
    from interfuse.model import FusionNet

    validate(FusionNet(tiny_config(tmp_path).model_config()), va)
    assert va.access_count == len(va) and tr.access_count == 3 * 2


def test_checkpoint_round_trip_same_report(tmp_path, split):
    cfg = tiny_config(tmp_path / "r", epochs=1, steps_per_epoch=1)
    best = train(cfg, *split)
    a = validate(best, split[1], checkpoint_id="x")
    b = validate(best, split[1], checkpoint_id="x")
    assert a.rows == b.rows
    meta = read_container(best)[1]
    assert meta["train_config"]["alpha"] == 0.1 and meta["model_config"]["channels"] == [4, 8, 8]


def test_checkpoint_version_and_magic_rejected(tmp_path):
    path = write_container(tmp_path / "x.ckpt", {"a": np.zeros(3, np.float32)}, {})
    raw = bytearray(path.read_bytes())
    raw[8:12] = (FORMAT_VERSION + 1).to_bytes(4, "little")
    (tmp_path / "v.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        read_container(tmp_path / "v.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"NOTACKPT" + bytes(raw[8:]))
    with pytest.raises(CheckpointError):
        read_container(tmp_path / "m.ckpt")
    with pytest.raises(FileNotFoundError):
        read_container(tmp_path / "missing.ckpt")


def test_container_round_trip_exact(tmp_path, rng):
    arrays = {"w": rng.standard_normal((3, 4)).astype(np.float32), "s": np.array(7, np.int64)}
    a = write_container(tmp_path / "a.ckpt", arrays, {"k": [1, 2]})
    b = write_container(tmp_path / "b.ckpt", dict(reversed(list(arrays.items()))), {"k": [1, 2]})
    assert a.read_bytes() == b.read_bytes()
    back, meta = read_container(a)
    assert meta == {"k": [1, 2]}
    assert all(np.array_equal(back[k], v) and back[k].dtype == v.dtype for k, v in arrays.items())


def test_nan_loss_aborts(tmp_path, split):
    cfg = tiny_config(tmp_path / "n")
    ir, vi, sets = sample_batch(cfg, split[0], 0, 0)
    from interfuse.model import FusionNet

    model = FusionNet(cfg.model_config())
    state = TrainState(model, make_optimizer(model, cfg.learning_rate))
    ir = ir.clone()
    ir[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericalError) as info:
        train_step(state, cfg, ir, vi, sets)
    assert not math.isfinite(info.value.breakdown["fidelity"])
    assert state.step == 0


def test_micro_batch_matches_full_batch(split):
    from interfuse.model import FusionNet

    grads = []
    for mb in (0, 1):
        cfg = TrainConfig(batch_size=2, micro_batch=mb, patch=32, channels=(4, 8, 8), pool_r=2, block_size=8)
        model = FusionNet(cfg.model_config(), seed=1).double()
        state = TrainState(model, torch.optim.SGD(model.parameters(), lr=0.0))
        ir, vi, sets = sample_batch(cfg, split[0], 0, 0)
        parts = train_step(state, cfg, ir.double(), vi.double(), sets)
        grads.append((parts["total"], [p.grad.clone() for p in model.parameters()]))
    assert grads[0][0] == pytest.approx(grads[1][0], abs=1e-12)
    for a, b in zip(grads[0][1], grads[1][1]):
        assert torch.allclose(a, b, atol=1e-12)


def _toy_problem(seed=0):
    r = np.random.default_rng(seed)
    net = ToyFusionNet(hidden=3, seed=seed).double()
    ir = torch.tensor(r.random((1, 1, 8, 8)), requires_grad=True)
    vi = torch.tensor(r.random((1, 1, 8, 8)), requires_grad=True)
    sets = [make_intervention_set(8, 8, InterventionConfig(block_size=2), r)]
    return net, ir, vi, sets


def test_gradcheck_fidelity_only():
    net, ir, vi, _ = _toy_problem()

    def loss():
        fused, _ = net(ir, vi)
        return fidelity_loss(fused, vi, ir, 1.0)

    assert grad_check(loss, list(net.parameters()) + [ir, vi]) < 1e-4


def test_gradcheck_full_objective():
    net, ir, vi, sets = _toy_problem(1)

    def loss():
        bundle = forward_with_interventions(net, ir, vi, sets)
        return total_loss(bundle, vi, ir, LossWeights(nec_mode="as_written")).total

    assert grad_check(loss, list(net.parameters()) + [ir, vi]) < 1e-3


def test_gradcheck_zero_weight_toy_constant_inputs():
    net = ToyFusionNet(hidden=2).double()
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    ir = torch.full((1, 1, 8, 8), 0.5, dtype=torch.float64, requires_grad=True)
    vi = torch.full((1, 1, 8, 8), 0.5, dtype=torch.float64, requires_grad=True)

    def loss():
        fused, _ = net(ir, vi)
        return fidelity_loss(fused, vi, ir)

    err = grad_check(loss, list(net.parameters()) + [ir, vi])
    assert math.isfinite(err)
