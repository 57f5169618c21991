import os
from pathlib import Path

import numpy as np
import pytest

from callpipe.config import load_config
from callpipe.synthetic import CorpusSpec, make_corpus

CONF = Path(__file__).resolve().parents[1] / "src" / "callpipe" / "conf"

# acceptance results, printed once at the end of the session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _isolated_runs_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("CALLPIPE_RUNS_DIR", str(tmp_path / "runs"))


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """The 200-clip synthetic chirp corpus (audio dir, annotations csv)."""
    return make_corpus(tmp_path_factory.mktemp("corpus"), CorpusSpec())


def corpus_config(corpus, *extra):
    audio, csv = corpus
    return load_config(CONF, "runs/default",
                       [f"data.audio_dir={audio}", f"data.annotations={csv}", *extra])


@pytest.fixture(scope="session")
def trained(corpus, tmp_path_factory):
    """Default-config run on the synthetic corpus: (trainer, run_dir)."""
    from callpipe.trainer import Trainer
    run_dir = tmp_path_factory.mktemp("trained") / "run"
    trainer = Trainer(corpus_config(corpus, "optim.epochs=30"), run_dir=run_dir)
    trainer.run()
    return trainer, run_dir


@pytest.fixture
def rng():
    return np.random.default_rng(0)
