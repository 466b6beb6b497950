import struct

import numpy as np
import pytest

from ergl import autodiff as ad
from ergl.autodiff import Tensor
from ergl.checkpoint import MAGIC, Checkpoint, from_bytes, load, save, to_bytes
from ergl.exceptions import CheckpointError
from ergl.model import ERGLNet
from ergl.ranking import EventVocabulary
from ergl.training import AdamW, TrainConfig


def make_checkpoint(seed=0, precision="float32", with_optimizer=False):
    cfg = TrainConfig(n_events=3, n_layers=1, conv_channels=(2, 2), seed=seed, precision=precision)
    model = ERGLNet(cfg.model_config(), seed=seed)
    if precision == "float64":
        model.astype(np.float64)
    rng = np.random.default_rng(seed)
    for bn in (m for c in model.components().values() for m in c.modules() if hasattr(m, "running_mean")):
        bn.running_mean[:] = rng.normal(size=bn.running_mean.shape)
    opt = None
    if with_optimizer:
        opt = AdamW(model.parameters())
        for p in model.parameters():
            p.grad = rng.normal(size=p.shape)
        opt.step()
    vocab = EventVocabulary([4, 50, 7], [3.0, 2.0, 1.0], ["a", "b", "c"])
    return Checkpoint.from_model(model, cfg, vocab, [f"s{k}" for k in range(10)], optimizer=opt), model


def test_round_trip_is_bitwise(tmp_path):
    ck, _ = make_checkpoint(with_optimizer=True)
    path = tmp_path / "m.erglckpt"
    save(ck, path)
    back = load(path)
    assert back.tensors.keys() == ck.tensors.keys()
    for k in ck.tensors:
        assert back.tensors[k].dtype == ck.tensors[k].dtype
        assert back.tensors[k].tobytes() == ck.tensors[k].tobytes()
    assert back.optimizer["step"] == 1
    assert back.config == ck.config and back.scene_labels == ck.scene_labels
    assert back.vocabulary.event_ids == [4, 50, 7] and back.vocabulary.name(1) == "b"


def test_save_load_save_is_byte_identical(tmp_path):
    ck, _ = make_checkpoint(seed=4, precision="float64")
    save(ck, tmp_path / "a")
    save(load(tmp_path / "a"), tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


@pytest.mark.parametrize("precision", ["float32", "float64"])
def test_forward_equal_after_load(precision, tmp_path, rng):
    ck, model = make_checkpoint(seed=2, precision=precision)
    save(ck, tmp_path / "m")
    restored = load(tmp_path / "m").build_model()
    x = rng.normal(size=(2, 8, 64))
    with ad.precision(precision):
        model.eval()
        a = model(Tensor(x)).logits.data
        b = restored(Tensor(x)).logits.data
    assert a.dtype == b.dtype == np.dtype(precision)
    assert a.tobytes() == b.tobytes()


def test_header_layout():
    blob = to_bytes(make_checkpoint()[0])
    assert blob[:8] == MAGIC
    version, hlen = struct.unpack_from("<HI", blob, 8)
    assert version == 1 and hlen > 0


@pytest.mark.parametrize("cut", [4, 12, 40, -1])
def test_truncation_rejected(cut):
    blob = to_bytes(make_checkpoint()[0])
    with pytest.raises(CheckpointError, match="truncated|payload|corrupt"):
        from_bytes(blob[:cut])


def test_bad_magic_and_version():
    blob = to_bytes(make_checkpoint()[0])
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(CheckpointError, match="version 9"):
        from_bytes(blob[:8] + struct.pack("<H", 9) + blob[10:])


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load(tmp_path / "nope")


def test_failed_save_leaves_no_partial_file(tmp_path):
    ck, _ = make_checkpoint()
    ck.tensors["param:bogus"] = np.zeros(2, dtype=np.int32)
    with pytest.raises(CheckpointError):
        save(ck, tmp_path / "m")
    assert list(tmp_path.iterdir()) == []
