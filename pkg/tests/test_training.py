import json
import math
import os

import numpy as np
import pytest

from ergl import autodiff as ad
from ergl.autodiff import Tensor
from ergl.exceptions import ContractError, DimensionError, NumericalError
from ergl.manifest import DatasetManifest
from ergl.ranking import accumulate, project_labels, select_top_n
from ergl.training import (AdamW, Dataset, TrainConfig, _batches, accuracy, adamw_step,
                           combined_loss, confusion_matrix, evaluate, event_loss, scene_loss, train)

TINY = (2, 2, 2, 2)


@pytest.fixture(scope="module")
def small_train(small_corpus):
    m = DatasetManifest.read(small_corpus)
    rows = m.split("train")
    cache = os.path.join(os.path.dirname(small_corpus), "cache")
    vocab = select_top_n(accumulate(m.pseudo_labels(rows)), 4)
    return Dataset(m.features(rows, cache), m.label_indices(rows),
                   project_labels(m.pseudo_labels(rows), vocab), [r.clip_id for r in rows])


def test_event_loss_is_mse(rng, f64):
    p, y = rng.random((3, 4)), rng.random((3, 4))
    assert float(event_loss(Tensor(p), y).data) == pytest.approx(np.mean((p - y) ** 2))
    with pytest.raises(ContractError):
        event_loss(Tensor(p), y[:, :2])


def test_scene_loss_is_cross_entropy(rng, f64):
    z = rng.normal(size=(4, 10))
    labels = np.array([3, 0, 9, 3])
    ref = np.mean([math.log(np.exp(z[b]).sum()) - z[b, labels[b]] for b in range(4)])
    assert float(scene_loss(Tensor(z), labels).data) == pytest.approx(ref, rel=1e-12)
    # a single unbatched row is accepted
    assert float(scene_loss(Tensor(z[0]), 3).data) == pytest.approx(
        math.log(np.exp(z[0]).sum()) - z[0, 3])


@pytest.mark.parametrize("labels", [[0, 10], [-1, 2], [0.5, 1.0], [1]])
def test_scene_loss_rejects_bad_labels(labels, f64):
    with pytest.raises(ContractError):
        scene_loss(Tensor(np.zeros((2, 10))), np.array(labels))


def test_combined_loss_weights(f64):
    out = combined_loss(Tensor(2.0), Tensor(3.0), lambda1=0.5, lambda2=2.0)
    assert float(out.data) == 7.0 and out.shape == ()


def test_adamw_first_step_closed_form(rng):
    p = rng.normal(size=5)
    g = rng.normal(size=5)
    lr, wd, eps = 1e-2, 0.01, 1e-8
    q, m, v = p.copy(), np.zeros(5), np.zeros(5)
    adamw_step(q, g, m, v, lr, 0.9, 0.999, eps, wd, 1 - 0.9, 1 - 0.999)
    np.testing.assert_allclose(q, p * (1 - lr * wd) - lr * g / (np.abs(g) + eps), rtol=1e-12)


def test_adamw_matches_scalar_rederivation(rng):
    grads = rng.normal(size=(6, 3))
    w = Tensor(rng.normal(size=3), requires_grad=True, dtype=np.float64)
    ref = w.data.copy()
    opt = AdamW([w], lr=0.05, weight_decay=0.1)
    m = v = np.zeros(3)
    for t, g in enumerate(grads, start=1):
        w.grad = g
        opt.step()
        ref = ref - 0.05 * 0.1 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(w.data, ref, rtol=1e-12)


def test_adamw_agrees_with_torch(rng):
    torch = pytest.importorskip("torch")
    init, grads = rng.normal(size=4), rng.normal(size=(5, 4))
    w = Tensor(init, requires_grad=True, dtype=np.float64)
    opt = AdamW([w], lr=1e-2, weight_decay=0.01)
    tw = torch.tensor(init, dtype=torch.float64, requires_grad=True)
    topt = torch.optim.AdamW([tw], lr=1e-2, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
    for g in grads:
        w.grad = g
        opt.step()
        tw.grad = torch.tensor(g)
        topt.step()
    np.testing.assert_allclose(w.data, tw.detach().numpy(), rtol=1e-10)


def test_adamw_mask_freezes(rng):
    a = Tensor(rng.normal(size=2), requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    a.grad, b.grad = np.ones(2), np.ones(2)
    a0, b0 = a.data.copy(), b.data.copy()
    AdamW([a, b]).step(mask=[True, False])
    assert not np.array_equal(a.data, a0) and np.array_equal(b.data, b0)


def test_trailing_singleton_batch_skipped():
    sizes = [len(b) for b in _batches(17, 16, np.random.default_rng(0))]
    assert sizes == [16]
    assert sorted(np.concatenate(list(_batches(18, 16, np.random.default_rng(0))))) == list(range(18))


@pytest.mark.parametrize("kw", [{"lr": 0}, {"batch_size": 0}, {"epochs": 0}, {"precision": "half"},
                                {"lambda1": -1}])
def test_train_config_validation(kw):
    from ergl.exceptions import ConfigurationError
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw)


def test_full_scale_config():
    cfg = TrainConfig.full_scale()
    assert (cfg.lr, cfg.batch_size, cfg.epochs, cfg.n_events, cfg.n_layers) == (1e-4, 64, 400, 25, 2)
    assert cfg.conv_channels == (64, 128, 256, 512)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_dataset_shape_checks():
    with pytest.raises(DimensionError):
        Dataset(np.zeros((3, 10, 64)), np.zeros(2))
    with pytest.raises(DimensionError):
        Dataset(np.zeros((3, 10, 64)), np.zeros(3), np.zeros((2, 4)))


def test_confusion_rows_sum_to_support():
    labels = np.array([0, 0, 1, 2, 2, 2])
    pred = np.array([0, 1, 1, 2, 0, 2])
    cm = confusion_matrix(pred, labels, 3)
    np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(labels, minlength=3))
    assert cm[2, 0] == 1 and accuracy(pred, labels) == pytest.approx(4 / 6)


def tiny_config(**kw):
    base = dict(n_events=4, n_layers=1, conv_channels=TINY, epochs=3, batch_size=8, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_training_is_deterministic(small_train):
    a = train(tiny_config(), small_train).model.state_dict()
    b = train(tiny_config(), small_train).model.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_epoch_reports_are_json(small_train):
    reps = []
    res = train(tiny_config(epochs=2), small_train, on_epoch=reps.append)
    assert [r.epoch for r in reps] == [1, 2] and res.best_epoch == 2
    d = json.loads(reps[0].to_json())
    assert set(d) == {"epoch", "L_event", "L_scene", "L_total", "scene_accuracy", "val_accuracy",
                      "wall_time"}
    assert d["L_total"] == pytest.approx(d["L_event"] + d["L_scene"])


def test_frozen_graph_parameters_do_not_move(small_train):
    from ergl.model import ERGLNet

    cfg = tiny_config(epochs=1)
    model = ERGLNet(cfg.model_config(), seed=cfg.seed)
    before = {k: p.data.copy() for k, p in model.named_parameters()}
    frozen = lambda k: k.startswith(("mel.", "gcn."))  # noqa: E731
    train(cfg, small_train, model=model, freeze=frozen)
    for k, p in model.named_parameters():
        same = np.array_equal(before[k], p.data)
        assert same == frozen(k), k


def test_lambda2_zero_leaves_scene_head_at_chance(small_train):
    reps = []
    res = train(tiny_config(lambda2=0.0, epochs=6, lr=3e-3), small_train, on_epoch=reps.append)
    assert reps[-1].L_event < reps[0].L_event
    acc, _ = evaluate(res.model, small_train)
    assert abs(acc - 0.1) <= 0.05 + 1e-9


def test_nan_loss_aborts(small_train):
    bad = Dataset(np.full_like(small_train.features, np.nan), small_train.labels,
                  small_train.event_targets)
    with pytest.raises(NumericalError):
        train(tiny_config(epochs=1), bad)


def test_train_argument_checks(small_train):
    with pytest.raises(DimensionError):
        train(tiny_config(n_events=5), small_train)
    with pytest.raises(ValueError):
        train(tiny_config(), Dataset(small_train.features, small_train.labels))
