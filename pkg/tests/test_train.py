import json
import math

import numpy as np
import pytest

from zsad3d.autograd import Tensor
from zsad3d.data import SynthSpec, generate_cloud
from zsad3d.model import AnomalyDetector, prepare_sample
from zsad3d.nn import load_checkpoint
from zsad3d.pipeline import toy_model_config
from zsad3d.train import (AdamState, NumericalError, TrainConfig, TrainError, clip_grad_norm,
                          evaluate, lr_at, optimizer_step, train)


# ---------------------------------------------------------------- schedule

def test_lr_schedule_points():
    cfg = TrainConfig(base_lr=1e-2, min_lr=1e-4, warmup_fraction=0.1)
    assert lr_at(0, 100, cfg) == 0.0
    assert lr_at(5, 100, cfg) == pytest.approx(5e-3)
    assert lr_at(10, 100, cfg) == pytest.approx(1e-2)
    assert lr_at(55, 100, cfg) == pytest.approx((1e-2 + 1e-4) / 2, abs=1e-15)
    assert lr_at(100, 100, cfg) == 1e-4
    values = [lr_at(s, 100, cfg) for s in range(10, 101)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        lr_at(101, 100, cfg)


def test_lr_without_warmup_starts_at_base():
    cfg = TrainConfig(base_lr=1e-3, min_lr=0.0, warmup_fraction=0.0)
    assert lr_at(0, 10, cfg) == 1e-3


@pytest.mark.parametrize("bad", [{"epochs": 0}, {"warmup_fraction": 1.0}, {"min_lr": 1.0},
                                 {"clip_norm": 0.0}, {"weight_decay": {"decoder": 0.1}}])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


# ---------------------------------------------------------------- optimizer

def test_adam_first_step_closed_form():
    # f(x) = x: constant gradient 1, bias-corrected moments are exactly 1
    x = Tensor(np.array([2.0]), requires_grad=True)
    state = AdamState()
    optimizer_step({"heads": [("w", x)]}, {"w": np.array([1.0])}, state, lr=0.1)
    assert x.data[0] == pytest.approx(2.0 - 0.1 / (1 + 1e-8), abs=1e-15)


def scalar_adamw(x0, grad_fn, lrs, decay, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v = x0, 0.0, 0.0
    for t, lr in enumerate(lrs, start=1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * decay * x
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adamw_matches_scalar_reference():
    cfg = TrainConfig(base_lr=0.05, min_lr=1e-4)
    lrs = [lr_at(s, 100, cfg) for s in range(100)]
    x = Tensor(np.array([3.0, -1.5]), requires_grad=True)
    b = Tensor(np.array([0.7]), requires_grad=True)
    state = AdamState()
    grad = lambda v: 2 * (v - 0.5)  # noqa: E731
    for lr in lrs:
        optimizer_step({"encoder": [("w", x), ("layer.bias", b)]},
                       {"w": grad(x.data), "layer.bias": grad(b.data)}, state, lr,
                       weight_decay={"encoder": 0.05})
    for i, x0 in enumerate([3.0, -1.5]):
        assert x.data[i] == pytest.approx(scalar_adamw(x0, grad, lrs, 0.05), abs=1e-12)
    # biases are exempt from decay
    assert b.data[0] == pytest.approx(scalar_adamw(0.7, grad, lrs, 0.0), abs=1e-12)


def test_optimizer_rejects_non_finite():
    x = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(NumericalError):
        optimizer_step({"heads": [("w", x)]}, {"w": np.array([np.nan, 0.0])}, AdamState(), 0.1)


def test_clip_grad_norm():
    rng = np.random.default_rng(0)
    grads = {"a": rng.normal(size=(3, 4)) * 10, "b": rng.normal(size=5), "c": None}
    before = clip_grad_norm(grads, 1.0)
    after = math.sqrt(sum(float((g ** 2).sum()) for g in grads.values() if g is not None))
    assert before > 1.0 and after <= 1.0 + 1e-12
    small = {"a": np.array([0.3, 0.4])}
    assert clip_grad_norm(small, 1.0) == pytest.approx(0.5)
    assert small["a"].tolist() == [0.3, 0.4]
    with pytest.raises(NumericalError):
        clip_grad_norm({"a": np.array([np.inf])}, 1.0)


# ---------------------------------------------------------------- loop

@pytest.fixture(scope="module")
def toy_data():
    mcfg = toy_model_config()
    spec = SynthSpec(points_per_cloud=96, anomaly_count=(2, 2), anomaly_radius=(0.5, 0.6))
    samples = []
    for k in range(4):
        cloud, _, _ = generate_cloud("sphere", spec, np.random.default_rng(k), k % 2 == 1)
        samples.append(prepare_sample(cloud, mcfg, with_targets=True, name=f"s{k}"))
    assert [s.object_label for s in samples] == [0, 1, 0, 1]
    return mcfg, samples


def test_training_is_bitwise_deterministic(toy_data, tmp_path):
    mcfg, samples = toy_data
    cfg = TrainConfig(epochs=2, batch_size=2, seed=3)
    for run in ("a", "b"):
        train(AnomalyDetector(mcfg, seed=3), samples, cfg, {"sphere": samples},
              log_path=tmp_path / run / "log.jsonl", checkpoint_path=tmp_path / run / "m.ckpt",
              meta={"seed": 3, "config_hash": "x"})
    for f in ("log.jsonl", "m.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    entries = [json.loads(line) for line in (tmp_path / "a" / "log.jsonl").read_text().splitlines()]
    assert [e["epoch"] for e in entries] == [1, 2]
    assert {"lr", "grad_norm", "loss_total", "p_auroc"} <= set(entries[-1])
    _, meta = load_checkpoint(tmp_path / "a" / "m.ckpt")
    assert meta["train"]["epochs"] == 2 and meta["seed"] == 3


def test_zero_learning_rate_freezes_parameters(toy_data):
    mcfg, samples = toy_data
    model = AnomalyDetector(mcfg, seed=1)
    before = model.state_dict()
    train(model, samples, TrainConfig(epochs=1, batch_size=2, base_lr=0.0, min_lr=0.0))
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_loss_decreases(toy_data):
    mcfg, samples = toy_data
    model = AnomalyDetector(mcfg, seed=2)
    result = train(model, samples, TrainConfig(epochs=5, batch_size=2, base_lr=1e-2,
                                               warmup_fraction=0.0))
    losses = [e["loss_total"] for e in result.history]
    assert losses[-1] < losses[0]
    assert all(np.isfinite(losses))


def test_bad_training_sets(toy_data):
    mcfg, samples = toy_data
    model = AnomalyDetector(mcfg)
    with pytest.raises(TrainError):
        train(model, [], TrainConfig(epochs=1))
    broken = prepare_sample(generate_cloud("sphere", SynthSpec(points_per_cloud=96),
                                           np.random.default_rng(0), False)[0], mcfg)
    broken.object_label = 1
    with pytest.raises(TrainError):
        train(model, [broken], TrainConfig(epochs=1))


def test_nan_loss_raises_numerical_error(toy_data):
    mcfg, samples = toy_data
    model = AnomalyDetector(mcfg)
    model.fusion.proj_f.weight.data[:] = np.nan
    with pytest.raises(NumericalError):
        train(model, samples, TrainConfig(epochs=1, batch_size=2))


def test_threaded_evaluation_matches_serial(toy_data):
    mcfg, samples = toy_data
    model = AnomalyDetector(mcfg, seed=4)
    serial = evaluate(model, {"sphere": samples}).to_dict()
    threaded = evaluate(model, {"sphere": samples}, threads=3).to_dict()
    assert serial == threaded
