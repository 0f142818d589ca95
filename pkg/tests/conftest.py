import pytest

from maskjscc.config import ExperimentConfig
from maskjscc.data import builtin_images


def tiny_config(**kw) -> ExperimentConfig:
    base = dict(block_depths=[2, 2, 2, 2], epochs=2, batch_size=8, n_train_images=16,
                n_test_images=8, npn_epochs=1, channel_pool_train=40, channel_pool_test=10,
                snr_list_db=[0.0, 6.0, 12.0], lr_start=1e-3, lr_end=2e-4)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def tiny_images():
    return builtin_images(16, 32, "train", 0), builtin_images(8, 32, "test", 0)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {name}: {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
