import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from srft import degradation as D  # noqa: E402
from srft import models as M  # noqa: E402
from srft import pretrain as P  # noqa: E402

HELDOUT_SEED = 99


@pytest.fixture(scope="session")
def heldout():
    """Five 48x48 test images never seen in pretraining."""
    return P.generate_corpus(np.random.default_rng(HELDOUT_SEED), 5, 48)


@pytest.fixture(scope="session")
def pretrained():
    """edsr_style x4 toy model trained with the default configuration (about 3 minutes)."""
    rng = np.random.default_rng(0)
    corpus = P.generate_corpus(rng, 24, 96)
    a4 = D.DegradationSpec.bicubic(4)
    ds = P.synthesize(corpus, a4, 48, 512, rng)
    model = M.build(M.default_spec("edsr_style", 4), np.random.default_rng(1))
    model, curve = P.train(model, ds, P.TrainConfig())
    return model, curve


_ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def report():
    """Record one PASS/FAIL line for an acceptance criterion; returns the verdict."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
