import os
from pathlib import Path

import pytest

DATA_ROOT = Path(os.environ.get("VDIB_DATA_ROOT", "/root/data"))
MNIST_ROOT = DATA_ROOT / "mnist"

requires_mnist = pytest.mark.skipif(
    not (MNIST_ROOT / "train-images-idx3-ubyte").exists()
    and not (MNIST_ROOT / "train-images-idx3-ubyte.gz").exists(),
    reason="MNIST not available under $VDIB_DATA_ROOT/mnist",
)

# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE: list[str] = []


def report(criterion: int, passed: bool, detail: str) -> bool:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion:>2}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
