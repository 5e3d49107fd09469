import numpy as np
import pytest

from daclora.model import build_model


def central_diff(f, x: np.ndarray, h: float = 1e-5, idx=None) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (optionally only at flat indices ``idx``)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size) if idx is None else idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def rel_err(a, b, floor: float = 1e-6) -> float:
    """Max abs difference over the larger max-magnitude.

    ``floor`` keeps vanishing gradients from dividing central-difference
    round-off (about 1e-16 * |f| / h) by ~0.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), floor))


def perturb_adapters(model, seed: int, scale: float = 0.3):
    """Give every adapter non-zero ``B`` so gradients w.r.t. ``A`` are exercised."""
    rng = np.random.default_rng(seed)
    for layer in model.lora_layers():
        layer.B.data = rng.normal(0.0, scale, size=layer.B.shape)
    return model


@pytest.fixture
def small_model():
    m = build_model(d_pixels=12, num_classes=3, hidden=(8, 6), embed_dim=5, rank=2, seed=3)
    return perturb_adapters(m, 11)


# ---------------------------------------------------------------- acceptance report

_CRITERIA: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    num, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    verdict = "PASS" if rep.passed else "FAIL"
    _CRITERIA[num] = f"criterion {num:>2} {verdict}  {title}" + (f"  [{detail}]" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for num in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[num])
