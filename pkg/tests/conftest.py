import pytest
import torch

from audio_kd.pipeline import gen_synthetic, synthetic_vocab


@pytest.fixture(scope="session")
def vocab():
    return synthetic_vocab()


@pytest.fixture(scope="session")
def synth(vocab):
    return gen_synthetic(40, vocab, seed=11)


@pytest.fixture(autouse=True)
def _threads():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
