import pytest

from mdseg import trainer
from mdseg.segnet import ArchConfig
from mdseg.synthgen import default_domains, generate_dataset

TINY_ARCH = ArchConfig(widths=(4, 8, 8, 8, 8), blocks_per_stage=1)


@pytest.fixture(scope="session")
def tiny_datasets():
    return {d.domain_id: generate_dataset(d, 3, (16, 32, 32), seed=5) for d in default_domains()}


def tiny_config(**kw) -> trainer.TrainConfig:
    base = dict(resolution=(32, 32), arch=TINY_ARCH, ae_arch=TINY_ARCH,
                seg=trainer.Schedule(6, 1, 5e-4), ae=trainer.Schedule(6, 1, 1e-4))
    base.update(kw)
    return trainer.TrainConfig(**base)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
