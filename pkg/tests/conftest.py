import numpy as np
import pytest

from vitatt import tensor as T
from vitatt.data import SynthSpec, generate_synthetic
from vitatt.model import ModelConfig, VitAttParams

# tiny model used throughout: image 32, patch 8, d=16, L=2, h=2, M=4, C=3
TINY = dict(image_size=32, patch_size=8, embed_dim=16, num_encoder_layers=2, num_heads=2,
            num_metadata_slots=4, metadata_width=3, num_classes=3)


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5, entries=None) -> np.ndarray:
    """Central differences of scalar f() w.r.t. array x, perturbed in place."""
    g = np.full(x.shape, np.nan)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    mask = ~np.isnan(numeric)
    a, n = analytic[mask], numeric[mask]
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)).max())


def check_grad(build, inputs, eps=1e-5):
    """build(*tensors) -> scalar Tensor. Returns max relative error over all inputs."""
    tensors = [T.Tensor(x.copy(), requires_grad=True) for x in inputs]
    T.backward(build(*tensors))
    worst = 0.0
    for t in tensors:
        def f():
            with T.no_grad():
                return build(*tensors).item()

        worst = max(worst, rel_error(t.grad, numeric_grad(f, t.data, eps)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_params(tiny_config):
    return VitAttParams.init(tiny_config, 0)


@pytest.fixture(scope="session")
def small_dataset():
    ds, manifest = generate_synthetic(SynthSpec(num_classes=3, samples_per_class=12, noise_fields=4, seed=3))
    return ds, manifest


def model_grad_errors(params, images, meta, labels, weights, per_tensor=None, seed=0, eps=1e-5):
    """Max FD relative error per parameter tensor for the weighted CE loss in
    training mode. Batch-norm running stats are restored around every call so
    each evaluation sees the same state."""
    from vitatt.model import forward

    bn0 = params.bn.copy()

    def loss():
        params.bn = bn0.copy()
        logits, _ = forward(params, images, meta, training=True)
        return T.cross_entropy_weighted(logits, labels, weights)

    params.zero_grad()
    T.backward(loss())
    analytic = {n: t.grad.copy() for n, t in params.tensors.items()}

    def f():
        with T.no_grad():
            return loss().item()

    pick = np.random.default_rng(seed)
    errors = {}
    for name, t in params.tensors.items():
        entries = None
        if per_tensor is not None and t.data.size > per_tensor:
            entries = pick.choice(t.data.size, per_tensor, replace=False)
        errors[name] = rel_error(analytic[name], numeric_grad(f, t.data, eps, entries))
    params.bn = bn0
    params.zero_grad()
    return errors


# acceptance criteria append (number, passed, detail); printed after the run
ACCEPTANCE: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
