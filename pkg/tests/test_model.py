import numpy as np
import pytest

from ergl import autodiff as ad
from ergl.autodiff import Tensor, grad_check
from ergl.backbone import BackboneConfig, EventBackbone
from ergl.exceptions import ConfigurationError, DimensionError
from ergl.model import ERGLNet, ModelConfig

TINY = (2, 2, 2, 2)


def test_pooling_arithmetic():
    cfg = BackboneConfig()
    assert cfg.output_frames(998) == 62
    assert cfg.output_frames(997) == 62
    with pytest.raises(ConfigurationError, match="at least 16"):
        cfg.check_input(15)


@pytest.mark.parametrize("kw", [{"node_dim": 32}, {"joint_dim": 1024}, {"n_events": 0},
                                {"conv_channels": ()}])
def test_backbone_config_invariants(kw):
    with pytest.raises(ConfigurationError):
        BackboneConfig(**kw)


def test_backbone_shapes_and_embeddings(rng, f64):
    bb = EventBackbone(BackboneConfig(conv_channels=TINY, n_events=3), rng)
    x = Tensor(rng.normal(size=(2, 37, 64)))
    tokens, v, p = bb(x)
    assert tokens.shape == (2, 3, 2, 64)
    np.testing.assert_allclose(v.data, tokens.data.mean(axis=2))
    assert np.all((p.data >= 0) & (p.data <= 1))


def test_backbone_rejects_wrong_bins(rng):
    bb = EventBackbone(BackboneConfig(conv_channels=TINY, n_events=3), rng)
    with pytest.raises(DimensionError):
        bb(Tensor(np.zeros((1, 32, 40))))


def test_zero_input_eval_gives_zero_conv_output(rng, f64):
    bb = EventBackbone(BackboneConfig(conv_channels=TINY, n_events=2), rng).eval()
    out = bb.conv_stack(Tensor(np.zeros((1, 32, 64))))
    assert np.all(out.data == 0)


def test_event_heads_are_independent(rng, f64):
    bb = EventBackbone(BackboneConfig(conv_channels=TINY, n_events=4), rng).eval()
    x = Tensor(rng.normal(size=(1, 32, 64)))
    before = bb(x)[0].data
    bb.heads.weight.data[2] += rng.normal(size=bb.heads.weight.data[2].shape)
    after = bb(x)[0].data
    changed = [not np.array_equal(before[0, i], after[0, i]) for i in range(4)]
    assert changed == [False, False, True, False]


def test_head_matches_per_event_matmul(rng, f64):
    bb = EventBackbone(BackboneConfig(conv_channels=TINY, n_events=3), rng)
    joint = rng.normal(size=(2, 5, 2048))
    out = bb.event_heads(Tensor(joint)).data
    for i in range(3):
        ref = joint @ bb.heads.weight.data[i] + bb.heads.bias.data[i]
        np.testing.assert_allclose(out[:, i], ref, atol=1e-10)


def tiny_model(rng, n=3, **kw):
    return ERGLNet(ModelConfig(n_events=n, n_layers=2, conv_channels=TINY, **kw),
                   seed=int(rng.integers(1 << 30)))


def test_model_forward_shapes(rng, f64):
    m = tiny_model(rng).astype(np.float64)
    out = m(Tensor(rng.normal(size=(2, 32, 64))), keep_graphs=True)
    assert out.event_probs.shape == (2, 3)
    assert out.logits.shape == (2, 10)
    assert [g.layer_index for g in out.graphs] == [0, 1, 2]


def test_model_is_seed_deterministic():
    a = ERGLNet(ModelConfig(n_events=3, conv_channels=TINY), seed=5).state_dict()
    b = ERGLNet(ModelConfig(n_events=3, conv_channels=TINY), seed=5).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_state_dict_round_trip(rng):
    src, dst = tiny_model(rng), tiny_model(rng)
    dst.load_state_dict(src.state_dict())
    x = rng.normal(size=(2, 32, 64)).astype(np.float32)
    src.eval(), dst.eval()
    assert np.array_equal(src(Tensor(x)).logits.data, dst(Tensor(x)).logits.data)
    bad = dict(src.state_dict())
    bad.pop(next(iter(bad)))
    with pytest.raises(KeyError):
        dst.load_state_dict(bad)


def test_parameter_names_are_prefixed(rng):
    names = [k for k, _ in tiny_model(rng).named_parameters()]
    assert "backbone.blocks.0.conv1.kernel" in names
    assert "mel.nnm_params.W_q" in names
    assert "gcn.layers.1.Uw" in names
    assert "classifier.fc.weight" in names


@pytest.mark.parametrize("flags", [(True, True), (False, False)])
def test_end_to_end_gradients(flags, rng, f64):
    from ergl.training import combined_loss, event_loss, scene_loss

    m = ERGLNet(ModelConfig(n_events=2, n_layers=1, conv_channels=(2, 2), use_ncm=flags[0],
                            use_nnm=flags[1]), seed=3).astype(np.float64)
    x = Tensor(rng.normal(size=(3, 8, 64)))
    y_ev = Tensor(rng.random((3, 2)))
    labels = np.array([0, 4, 9])

    def f():
        out = m(x)
        return combined_loss(event_loss(out.event_probs, y_ev), scene_loss(out.logits, labels))

    report = grad_check(f, dict(m.named_parameters()), tol=1e-3, max_entries=6,
                        rng=np.random.default_rng(0))
    assert report.passed, report.failures()
