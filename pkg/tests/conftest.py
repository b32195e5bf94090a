import os

import pytest
import torch

torch.set_num_threads(int(os.environ.get("FUSESER_THREADS", "1")))

# criterion number -> (passed, detail), filled in by test_acceptance
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def record(criterion: int, passed: bool | None, detail: str) -> None:
    status = "N/A " if passed is None else ("PASS" if passed else "FAIL")
    ACCEPTANCE[criterion] = (status, detail)
    print(f"criterion {criterion}: {status} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {status} {detail}")


@pytest.fixture(scope="session")
def synthetic_corpus(tmp_path_factory):
    from fuseser.dataio import SyntheticSpec, gen_synthetic

    root = tmp_path_factory.mktemp("synthetic")
    return gen_synthetic(root, SyntheticSpec(seed=0))


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    from fuseser.dataio import SyntheticSpec, gen_synthetic

    root = tmp_path_factory.mktemp("small")
    return gen_synthetic(root, SyntheticSpec(per_class=10, seed=3))
