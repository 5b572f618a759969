import pytest

from spn.synth import GeneratorConfig, generate_dataset, write_dataset
from spn.trainer import TrainConfig

TINY_MODEL = dict(n_prototypes=6, dim=16, width=16, heads=2, hidden=32, noise_dim=4,
                  batch_size=16, epochs=2)

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def gen_cfg():
    return GeneratorConfig()


@pytest.fixture(scope="session")
def small_data(tmp_path_factory, gen_cfg):
    """200/40/40 samples, seed 7."""
    root = tmp_path_factory.mktemp("small_data")
    data = generate_dataset(gen_cfg, 7, {"train": 200, "val": 40, "test": 40})
    write_dataset(data, root, gen_cfg, 7)
    return root


@pytest.fixture
def tiny_cfg():
    return TrainConfig(**TINY_MODEL)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
