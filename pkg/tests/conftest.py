import sys
from pathlib import Path

import pytest
import torch
from torch import nn

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


class CallCounter(nn.Module):
    """Wraps a classifier and counts forward invocations."""

    def __init__(self, inner):
        super().__init__()
        self.inner = inner
        self.calls = 0

    def forward(self, x):
        self.calls += 1
        return self.inner(x)


class LinearProbe(nn.Module):
    def __init__(self, input_shape=(3, 8, 8), num_classes=4, seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        d = int(torch.tensor(input_shape).prod())
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.linear = nn.Linear(d, num_classes)
        with torch.no_grad():
            self.linear.weight.copy_(torch.randn(num_classes, d, generator=gen) * 0.5)
            self.linear.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x):
        return self.linear(x.flatten(1))


class FixedLogits(nn.Module):
    """Returns the same logit row for every input (differentiable in x via a zero term)."""

    def __init__(self, row):
        super().__init__()
        self.register_buffer("row", torch.as_tensor(row, dtype=torch.float32))

    def forward(self, x):
        return self.row.expand(len(x), -1) + 0.0 * x.flatten(1).sum(1, keepdim=True)


@pytest.fixture
def probe():
    return LinearProbe()


@pytest.fixture
def images():
    return torch.rand(16, 3, 8, 8, generator=torch.Generator().manual_seed(3))


@pytest.fixture
def labels():
    return torch.arange(16) % 4


def pytest_terminal_summary(terminalreporter):
    import acceptance_report

    if acceptance_report.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_report.lines():
            terminalreporter.write_line(line)
