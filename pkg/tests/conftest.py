import numpy as np
import pytest

from comfortmtl.ingest import encode, fit_encoder, generate_synthetic
from comfortmtl.schema import default_schema


@pytest.fixture(scope="session")
def schema():
    return default_schema()


@pytest.fixture(scope="session")
def small_synth():
    return generate_synthetic(300, seed=5)


@pytest.fixture(scope="session")
def small_encoded(small_synth):
    enc = fit_encoder(small_synth)
    return enc, encode(enc, small_synth)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_schema(d: int, class_counts=(3,)):
    """``d`` numeric features and one task per entry of ``class_counts``."""
    from comfortmtl.schema import ComfortScale, DatasetSchema, FeatureSpec, TaskSpec

    feats = tuple(FeatureSpec(f"x{i}", "numeric") for i in range(d))
    tasks = tuple(TaskSpec(ComfortScale(f"T{j}", tuple((v, f"c{v}") for v in range(k))))
                  for j, k in enumerate(class_counts))
    return DatasetSchema(feats, tasks)


def toy_network(d: int, class_counts=(3,), trunk=(), seed=0, **hp):
    """Randomly initialized network over a toy schema with an identity encoder."""
    from comfortmtl.ingest import Encoder
    from comfortmtl.mtl import Hyperparams, init_network

    schema = toy_schema(d, class_counts)
    enc = Encoder(schema, means={f"x{i}": 0.0 for i in range(d)},
                  stds={f"x{i}": 1.0 for i in range(d)}, fills={f"x{i}": 0.0 for i in range(d)},
                  fitted=True)
    return init_network(schema, enc, Hyperparams(trunk_sizes=tuple(trunk), seed=seed, **hp))


# ------------------------------------------------------------ acceptance log

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    """Remember one acceptance verdict; all verdicts are printed after the run."""
    ACCEPTANCE[number] = (passed, f"{title}: {detail}" if detail else title)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, text = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number:2d}  {text}")
