import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from advcap.data.toyworld import ToyWorldConfig, generate_toy_dataset  # noqa: E402
from advcap.discriminator import Discriminator, DiscriminatorConfig  # noqa: E402
from advcap.generator import Generator, GeneratorConfig  # noqa: E402


@pytest.fixture(scope="session")
def small_dataset():
    return generate_toy_dataset(ToyWorldConfig(n_train=60, n_val=20, n_test=20, feature_dim=12), seed=3)


def tiny_models(dataset, set_size=5, seed=0, max_len=8):
    V = len(dataset.vocab.tokens)
    G = Generator(GeneratorConfig(V, dataset.image_dim, dataset.object_dim, embed_dim=8, hidden_dim=12,
                                  noise_dim=3, max_len=max_len), dataset.vocab, seed=seed)
    D = Discriminator(DiscriminatorConfig(V, dataset.image_dim, word_embed_dim=6, sentence_embed_dim=6,
                                          kernel_inner_dim=3, num_kernels=4, set_size=set_size), seed=seed)
    return G, D


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def micro_models(seed=0, set_size=2, max_len=4, vocab_words=("a", "b", "c"), image_dim=3,
                 embed_dim=3, hidden_dim=4):
    """Models small enough for exhaustive finite-difference checks (every shape <= 8)."""
    from advcap.data.vocab import RESERVED, Vocabulary

    vocab = Vocabulary(list(RESERVED) + list(vocab_words), object_words=vocab_words[:2])
    V = len(vocab)
    G = Generator(GeneratorConfig(V, image_dim, 2, embed_dim=embed_dim, hidden_dim=hidden_dim, num_layers=3, noise_dim=2,
                                  max_len=max_len), vocab, seed=seed)
    D = Discriminator(DiscriminatorConfig(V, image_dim, word_embed_dim=3, sentence_embed_dim=3,
                                          kernel_inner_dim=2, num_kernels=2, set_size=set_size), seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in G.parameters() + D.parameters():
        p.data[...] = rng.uniform(-0.6, 0.6, size=p.shape)
    return G, D


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        terminalreporter.write_line(mod.VERDICTS.get(n, f"criterion {n}: NOT RUN"))
