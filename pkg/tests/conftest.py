import pytest

from mcseg import scenegen


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """A 32x32 dataset with a handful of samples per split."""
    root = tmp_path_factory.mktemp("tiny_data")
    cfg = scenegen.DatasetConfig.from_dict(
        {"seed": 1, "size": [32, 32], "n_source": 6, "n_target_train": 4, "n_target_test": 3}
    )
    scenegen.write_dataset(cfg, root)
    return root


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    """Keep one pass/fail line per acceptance criterion for the terminal summary."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
