import numpy as np
import pytest

from capsprune.capsnet import CapsNetConfig, init_model
from capsprune.data import synth_dataset
from capsprune.training import train


def tiny_config(**kw) -> CapsNetConfig:
    """19px input, 2x2 primary grid, 2 capsule types -> 8 capsules."""
    base = dict(image_size=19, conv1_filters=4, conv2_capsule_types=2, pc_dim=4, out_caps_dim=4,
                num_classes=3, decoder_widths=(8, 12, 19 * 19))
    base.update(kw)
    return CapsNetConfig(**base)


def small_config(classes=2, types=2, **kw) -> CapsNetConfig:
    """24px input, 4x4 primary grid: 16 capsules per type."""
    base = dict(image_size=24, conv1_filters=16, conv2_capsule_types=types, num_classes=classes,
                decoder_widths=(32, 64, 24 * 24))
    base.update(kw)
    return CapsNetConfig(**base)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))


@pytest.fixture(scope="session")
def mnist_model():
    return init_model(CapsNetConfig(), seed=0)


@pytest.fixture(scope="session")
def two_class_data():
    return synth_dataset(1000, 24, 2, seed=1), synth_dataset(300, 24, 2, seed=2)


@pytest.fixture(scope="session")
def trained_small(two_class_data):
    """32-capsule model trained on the 2-class synthetic task."""
    tr, te = two_class_data
    model, hist = train(init_model(small_config(), seed=0), tr, te, 5, seed=0)
    return model, hist


def as_dtype(model, dtype):
    """Copy of ``model`` with every parameter cast to ``dtype``."""
    from capsprune.capsnet import CapsNetModel
    from capsprune.tensor import Tensor

    params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in model.params.items()}
    return CapsNetModel(model.config, params, model.survivors.copy())


def straight_line_routing(u_hat: np.ndarray, iters: int) -> np.ndarray:
    """Loop-level routing oracle written without the tensor library."""
    N, n, K, d = u_hat.shape
    out = np.zeros((N, K, d))
    for s in range(N):
        b = [[0.0] * K for _ in range(n)]
        for _ in range(iters):
            c = []
            for i in range(n):
                m = max(b[i])
                e = [np.exp(x - m) for x in b[i]]
                c.append([x / sum(e) for x in e])
            v = []
            for j in range(K):
                sj = [sum(c[i][j] * u_hat[s, i, j, k] for i in range(n)) for k in range(d)]
                sq = sum(x * x for x in sj)
                f = sq / (1 + sq) / np.sqrt(sq + 1e-9)
                v.append([x * f for x in sj])
            for i in range(n):
                for j in range(K):
                    b[i][j] += sum(u_hat[s, i, j, k] * v[j][k] for k in range(d))
        out[s] = v
    return out


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE: dict = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.split("::")[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.outcome != "passed":
        key = int(name.split("_")[2])
        prev = _ACCEPTANCE.get(key, (True, name))
        _ACCEPTANCE[key] = (prev[0] and report.outcome == "passed", name)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        ok, name = _ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  ({name})")
