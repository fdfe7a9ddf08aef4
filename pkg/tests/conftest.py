import os
from pathlib import Path

import pytest
import torch
from torch import nn

DATA_ROOT = Path(os.environ.get("USBLAB_DATA", Path.home() / "data")).expanduser()


def mnist_available() -> bool:
    return (DATA_ROOT / "MNIST" / "raw" / "train-images-idx3-ubyte").is_file()


needs_mnist = pytest.mark.skipif(not mnist_available(), reason=f"MNIST not found under {DATA_ROOT}")


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def mnist_train():
    from usblab.data import load_dataset

    return load_dataset("mnist", DATA_ROOT, "train")


@pytest.fixture(scope="session")
def mnist_test():
    from usblab.data import load_dataset

    return load_dataset("mnist", DATA_ROOT, "test")


class TinyConvNet(nn.Module):
    """Small differentiable stand-in for the basic model in fast tests."""

    arch = "tiny"

    def __init__(self, num_classes=4, channels=1, size=12, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.conv = nn.Conv2d(channels, 4, 3)
        self.fc = nn.Linear(4 * (size - 2) ** 2, num_classes)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=g) * 0.3)
        self.input_shape = (channels, size, size)
        self.num_classes = num_classes

    def forward(self, x):
        return self.fc(torch.tanh(self.conv(x)).flatten(1))


@pytest.fixture
def tiny_model():
    return TinyConvNet().eval()


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
