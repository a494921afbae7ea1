import numpy as np
import pytest

from simdino.config import RunConfig
from simdino.data import SyntheticDatasetSpec, generate

TINY = dict(embed_dim=16, depth=1, heads=2, mlp_ratio=2, proj_hidden=16, out_dim=8, batch_size=4,
            n_local=2, n_prototypes=16, warmup_steps=2, teacher_temp_warmup_steps=2, per_class=8,
            image_size=32, global_size=16, local_size=8, eval_short_edge=16, eval_size=16, probe_epochs=50)


def tiny_config(mode="simdino", **kw) -> RunConfig:
    return RunConfig.for_mode(mode, **{**TINY, "steps": 6, **kw})


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate(SyntheticDatasetSpec(n_classes=3, per_class=8, image_size=32, seed=1))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, filled by tests/test_acceptance.py
VERDICTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
