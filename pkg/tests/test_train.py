import importlib
import math

import numpy as np
import pytest

from vitatt import tensor as T
from vitatt.data import SynthSpec, generate_synthetic
from vitatt.model import ENCODER, OTHER, ModelConfig, VitAttParams
from vitatt.tensor import Tensor
from vitatt.train import (
    AdamState, TrainConfig, WeightedSampler, adam_step, class_weights, evaluate, train,
)

from conftest import TINY

# the package re-exports the train() function under the same name
train_mod = importlib.import_module("vitatt.train")


@pytest.fixture(scope="module")
def tiny_set():
    ds, _ = generate_synthetic(SynthSpec(num_classes=3, samples_per_class=20, informative_fields=2,
                                         noise_fields=2, seed=3))
    cfg = ModelConfig(**{**TINY, "num_metadata_slots": ds.schema.num_slots,
                         "metadata_width": ds.schema.slot_width})
    return ds, cfg


# ----------------------------------------------------------------- weights

def test_class_weights():
    assert class_weights([0, 1, 2, 0, 1, 2]).tolist() == [1.0, 1.0, 1.0]
    w = class_weights([0, 0, 0, 1])
    assert np.allclose(w, [2 / 3, 2.0], rtol=0, atol=1e-15)
    labels = np.array([0, 0, 0, 1, 2, 2])
    assert abs(class_weights(labels)[labels].mean() - 1.0) < 1e-15
    with pytest.raises(ValueError):
        class_weights([0, 2], num_classes=3)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


# ----------------------------------------------------------------- sampler

def within_3_sigma(draws, labels, target):
    n = len(draws)
    freq = np.bincount(labels[draws], minlength=len(target)) / n
    sigma = np.sqrt(np.asarray(target) * (1 - np.asarray(target)) / n)
    return np.all(np.abs(freq - target) <= 3 * sigma)


def test_sampler_uniform_weights_track_data():
    labels = np.array([0] * 70 + [1] * 20 + [2] * 10)
    draws = WeightedSampler(labels, np.ones(3), 1).draw(10_000)
    assert within_3_sigma(draws, labels, [0.7, 0.2, 0.1])


def test_sampler_single_class():
    labels = np.array([0, 1, 1, 2, 0])
    draws = WeightedSampler(labels, [0.0, 1.0, 0.0], 0).draw(500)
    assert set(labels[draws].tolist()) == {1}


def test_sampler_deterministic_and_validated():
    labels = np.array([0, 1, 1, 1])
    a = WeightedSampler(labels, [3.0, 1.0], 5).draw(50)
    assert np.array_equal(a, WeightedSampler(labels, [3.0, 1.0], 5).draw(50))
    with pytest.raises(ValueError):
        WeightedSampler(labels, [0.0, 0.0])


# -------------------------------------------------------------------- adam

def test_adam_zero_gradient_no_move():
    p = {"w": Tensor(np.array([0.3, -1.2]), requires_grad=True)}
    p["w"].grad = np.zeros(2)
    adam_step(p, AdamState(), {OTHER: 0.1}, {"w": OTHER})
    assert p["w"].data.tolist() == [0.3, -1.2]


def test_adam_scalar_first_step():
    p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
    p["w"].grad = np.array([1.0])
    adam_step(p, AdamState(), {OTHER: 0.1}, {"w": OTHER})
    m_hat = 0.1 / (1 - 0.9)
    v_hat = 0.001 / (1 - 0.999)
    assert abs(p["w"].data[0] - (-0.1 * m_hat / (math.sqrt(v_hat) + 1e-8))) < 1e-15
    assert abs(p["w"].data[0] + 0.1) < 1e-7


def test_adam_two_steps_scalar_oracle():
    p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    st = AdamState()
    w, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate([0.5, -2.0], start=1):
        p["w"].grad = np.array([g])
        adam_step(p, st, {OTHER: 0.01}, {"w": OTHER})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert abs(p["w"].data[0] - w) < 1e-15


def test_adam_groups_get_their_rates():
    p = {"enc": Tensor(np.zeros(1), requires_grad=True), "head": Tensor(np.zeros(1), requires_grad=True)}
    for t in p.values():
        t.grad = np.ones(1)
    adam_step(p, AdamState(), {ENCODER: 3e-5, OTHER: 1e-4}, {"enc": ENCODER, "head": OTHER})
    assert abs(p["enc"].data[0] + 3e-5) < 1e-12
    assert abs(p["head"].data[0] + 1e-4) < 1e-12


def test_param_groups_cover_model(tiny_params):
    groups = tiny_params.groups
    assert groups["blocks.0.attn.wq"] == ENCODER and groups["patch_embed.weight"] == ENCODER
    assert groups["fusion.wq"] == OTHER and groups["head.fc2.weight"] == OTHER
    assert groups["meta_embed.weight"] == OTHER
    assert set(groups) == set(tiny_params.tensors)


# ------------------------------------------------------------------- train

def test_loss_decreases_first_epochs(tiny_set):
    ds, cfg = tiny_set
    r = train(VitAttParams.init(cfg, 0), ds.samples, [], ds.schema, TrainConfig(epochs=10, seed=0))
    loss = [h["train_loss"] for h in r.history]
    assert sum(b >= a for a, b in zip(loss, loss[1:])) <= 2
    assert len(r.history) == 10


def test_lr_zero_keeps_params_and_matches_frozen_run(tiny_set, monkeypatch):
    ds, cfg = tiny_set
    p0 = VitAttParams.init(cfg, 1)
    cfg0 = TrainConfig(epochs=3, lr_encoder=0.0, lr_other=0.0, seed=2)
    p = p0.copy()
    r = train(p, ds.samples[:40], ds.samples[40:], ds.schema, cfg0)
    for n in p.tensors:
        assert np.array_equal(p[n].data, p0[n].data)
    monkeypatch.setattr(train_mod, "adam_step", lambda *a, **k: None)
    frozen = train(p0.copy(), ds.samples[:40], ds.samples[40:], ds.schema, cfg0)
    assert [h["train_loss"] for h in r.history] == [h["train_loss"] for h in frozen.history]
    # constant validation accuracy: the earliest epoch wins the tie
    assert len({h["val_macro_acc"] for h in r.history}) == 1 and r.best_epoch == 1


def test_training_deterministic(tiny_set):
    ds, cfg = tiny_set
    runs = [train(VitAttParams.init(cfg, 4), ds.samples[:40], ds.samples[40:], ds.schema,
                  TrainConfig(epochs=3, seed=7)) for _ in range(2)]
    assert runs[0].history_csv() == runs[1].history_csv()
    for n in runs[0].best.tensors:
        assert np.array_equal(runs[0].best[n].data, runs[1].best[n].data)


def test_best_checkpoint_is_argmax_val(tiny_set):
    ds, cfg = tiny_set
    r = train(VitAttParams.init(cfg, 0), ds.samples[:40], ds.samples[40:], ds.schema,
              TrainConfig(epochs=6, seed=0, lr_encoder=3e-4, lr_other=1e-3))
    accs = [h["val_macro_acc"] for h in r.history]
    assert r.best_epoch == int(np.argmax(accs)) + 1
    assert evaluate(r.best, ds.samples[40:], ds.schema).macro["ACC"] == max(accs)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(tiny_set):
    ds, cfg = tiny_set
    p = VitAttParams.init(cfg, 0)
    p["head.fc2.bias"].data[:] = [np.inf, -np.inf, 0.0]
    with pytest.raises(T.NumericError):
        train(p, ds.samples, [], ds.schema, TrainConfig(epochs=1))


def test_history_csv_format(tiny_set):
    ds, cfg = tiny_set
    r = train(VitAttParams.init(cfg, 0), ds.samples[:20], ds.samples[20:30], ds.schema, TrainConfig(epochs=2))
    lines = r.history_csv().splitlines()
    assert lines[0] == "epoch,train_loss,val_macro_acc" and len(lines) == 3
