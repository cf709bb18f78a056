import pytest

from stickersel.corpus import GeneratorConfig, generate_corpus
from stickersel.model import ModelConfig
from stickersel.training import corpus_vocab


@pytest.fixture(scope="session")
def default_corpus():
    return generate_corpus(GeneratorConfig())


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(GeneratorConfig(n_train=300, n_valid=40, n_easy=40, n_hard=40, seed=7))


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return corpus_vocab(small_corpus)


@pytest.fixture(scope="session")
def tiny_model_cfg(small_vocab):
    return ModelConfig(vocab_size=len(small_vocab), d_model=16, n_layers=1, n_heads=2, ffn_dim=32)


def pytest_terminal_summary(terminalreporter):
    # passing tests' stdout is captured, so surface the acceptance verdicts here
    lines = []
    for status in ("passed", "failed"):
        for rep in terminalreporter.stats.get(status, []):
            if getattr(rep, "when", None) == "call":
                lines += [ln for ln in rep.capstdout.splitlines() if ln.startswith("ACCEPTANCE ")]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda ln: int(ln.split()[1])):
            terminalreporter.write_line(line)
