import pytest
import torch

from mcrlab.config import ExperimentConfig
from mcrlab.data import SyntheticSpec, build_vocabulary, generate_corpus


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv("MCRLAB_SEED", raising=False)


@pytest.fixture
def tiny_config():
    """A model small enough to train a few steps in well under a second."""
    return ExperimentConfig(image_size=16, patch_size=4, max_text_len=12, vocab_size=160,
                            embed_dim=16, proj_dim=8, proj_hidden=16, vision_depth=1,
                            text_depth=1, decoder_depth=1, num_heads=2, batch_size=8,
                            epochs=2, warmup_epochs=1)


@pytest.fixture(scope="session")
def vocab():
    return build_vocabulary()


@pytest.fixture(scope="session")
def small_pairs():
    return generate_corpus(SyntheticSpec(n_studies=24, image_size=16, seed=3))


@pytest.fixture
def gen64():
    g = torch.Generator().manual_seed(1234)
    return g
