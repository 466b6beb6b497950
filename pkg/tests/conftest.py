import os

import numpy as np
import pytest

from ergl import autodiff as ad
from ergl.synth import gen_synth_dataset

TINY_CHANNELS = (2, 2, 2, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with ad.precision("float64"):
        yield


@pytest.fixture(autouse=True)
def _fresh_tape():
    ad.clear_tape()
    yield
    ad.clear_tape()


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """4 clips per scene, 1 s each: 3 train / 0 val / 1 test."""
    out = tmp_path_factory.mktemp("synth")
    manifest = gen_synth_dataset(str(out), seed=3, clips_per_scene=4, duration=1.0)
    return manifest


@pytest.fixture(scope="session")
def tiny_run(small_corpus, tmp_path_factory):
    """A 2-epoch checkpoint trained through the CLI on the small corpus."""
    from ergl.cli import main

    out = tmp_path_factory.mktemp("run")
    cfg = out / "tiny.cfg"
    cfg.write_text(
        "[model]\nn_events = 4\nconv_channels = 2, 2, 2, 2\n\n[training]\nepochs = 2\nbatch_size = 8\n"
    )
    cache = os.path.join(os.path.dirname(small_corpus), "cache")
    code = main(["train", "--config", str(cfg), "--manifest", small_corpus,
                 "--out", str(out / "run"), "--cache", cache])
    assert code == 0
    return {"dir": out / "run", "ckpt": str(out / "run" / "model.erglckpt"), "config": str(cfg),
            "manifest": small_corpus, "cache": cache}


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    lines = acceptance_log.report()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
