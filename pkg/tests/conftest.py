import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_linear_head(out_weights, seed=0):
    """Tiny 64-bit model whose logits are ``GAP(F_merged) @ out_weights``.

    d1 copies the GAP vector shifted by +10 (so its ReLU stays linear), batch
    norm is the identity and ``d_out`` removes the shift again.
    """
    from msranet.model import ModelConfig, build
    from msranet.tensor import Tensor

    w = np.asarray(out_weights, dtype=np.float64)
    c, n = w.shape
    m = build(ModelConfig(input_size=32, c1=c, c2=2 * c, r=4, n_classes=n, hidden=c), seed=seed, dtype=np.float64)
    shift = 10.0
    m.assign({
        "head.d1.weight": Tensor(np.eye(c)),
        "head.d1.bias": Tensor(np.full(c, shift)),
        "head.bn.gamma": Tensor(np.ones(c)),
        "head.bn.beta": Tensor(np.zeros(c)),
        "head.bn.running_mean": Tensor(np.full(c, shift)),
        "head.bn.running_var": Tensor(np.full(c, 1.0 - m.config.bn_epsilon)),
        "head.d_out.weight": Tensor(w),
        "head.d_out.bias": Tensor(np.zeros(n)),
    })
    return m


@pytest.fixture
def linear_head():
    return make_linear_head


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion(request):
    """``criterion(ident, passed, detail)`` prints one acceptance line and keeps it for the summary."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def report(ident, passed, detail):
        line = f"{ident} {'PASS' if passed else 'FAIL'}: {detail}"
        _ACCEPTANCE.append(line)
        with capman.global_and_fixture_disabled():
            print(f"\n    {line}")
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
