import numpy as np
import pytest
import torch
from torch import nn
import torch.nn.functional as F

from dorar.core import build_unit_grid
from dorar.datasets import Dataset

torch.set_num_threads(1)


class LinearBlackBox(nn.Module):
    """Random linear classifier over MNIST-shaped inputs."""

    def __init__(self, num_classes=3, seed=0, features=784):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.fc = nn.Linear(features, num_classes)
        with torch.no_grad():
            self.fc.weight.copy_(torch.randn(num_classes, features, generator=g) * 0.2)
            self.fc.bias.zero_()

    def forward(self, x):
        return F.log_softmax(self.fc(x.flatten(1)), dim=1)


def toy_dataset(n_train=200, n_val=60, n_test=60, seed=0, shape=(1, 28, 28), num_classes=3, kind="mnist"):
    g = torch.Generator().manual_seed(seed)
    make = lambda n: torch.rand((n,) + shape, generator=g)
    xs = [make(n) for n in (n_train, n_val, n_test)]
    ys = [torch.randint(0, num_classes, (len(x),), generator=g) for x in xs]
    return Dataset(kind, xs[0], ys[0], xs[1], ys[1], xs[2], ys[2], num_classes)


@pytest.fixture
def toy_data():
    return toy_dataset()


@pytest.fixture
def toy_blackbox():
    m = LinearBlackBox()
    m.eval()
    for p in m.parameters():
        p.requires_grad_(False)
    return m


@pytest.fixture
def mnist_grid():
    return build_unit_grid((1, 28, 28), (4, 4))


# ------------------------------------------------------ acceptance reporting

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] = entry["ok"] and rep.passed
    entry["details"].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(dict.fromkeys(entry["details"]))
        terminalreporter.write_line(f"criterion {number:>2} {status}  {entry['title']}: {detail}")
