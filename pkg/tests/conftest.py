import numpy as np
import pytest

from richcount.model import init_state, toy_config


def numeric_grad(f, x, h=1e-6):
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


ZERO_GRAD = 1e-7


def rel_error(a, b):
    """Norm-wise relative error; 0 when both gradients are structurally zero."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if max(na, nb) < ZERO_GRAD:
        return 0.0
    return np.linalg.norm(a - b) / max(na, nb)


@pytest.fixture
def tiny_config():
    """d=16, 8x8 images of 4x4 patches."""
    return toy_config(d=16, patch_size=4, image_size=8, text_buckets=64, ffn_depth=3,
                      adapter_depth=2, fusion_heads=4, fusion_layers=2, decoder_hidden=12)


@pytest.fixture
def tiny_state(tiny_config):
    return init_state(tiny_config, seed=0)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance")
        for criterion in sorted(results):
            terminalreporter.write_line(results[criterion])
