from pathlib import Path

import pytest

from lowacc.idx import load_idx

DATA = Path(__file__).resolve().parents[1] / "data" / "mnist"


@pytest.fixture(scope="session")
def mnist():
    files = [DATA / f for f in ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz",
                                "t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz")]
    if not all(f.exists() for f in files):
        pytest.skip("MNIST subset not built (run scripts/make_mnist_subset.py)")
    return load_idx(files[0], files[1]), load_idx(files[2], files[3])


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
