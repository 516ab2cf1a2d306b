import numpy as np
import pytest

from fedlaser import kernels, model
from fedlaser import tensor as tn

BACKENDS = kernels.available_backends()


def _problem(seed, B=4, T=9, I=3, H=5):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(B, T, I)), rng.normal(size=(I, 3 * H)) * 0.5,
            rng.normal(size=(H, 3 * H)) * 0.5, rng.normal(size=3 * H) * 0.1,
            rng.normal(size=(B, T, H)))


def test_compiled_backend_built():
    # the compiled kernels are part of the normal install
    assert "cython" in BACKENDS, "run `pip install -e . --no-build-isolation` to build _gru_ext"


@pytest.mark.parametrize("backend", sorted(BACKENDS))
@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_unfused_reference(backend, seed):
    x, W, U, b, _ = _problem(seed)
    hs, _ = BACKENDS[backend].gru_forward(x, W, U, b)
    ref = model.gru_layer_unfused(x, W, U, b).data
    assert np.max(np.abs(hs - ref)) < 1e-12


@pytest.mark.parametrize("backend", sorted(BACKENDS))
@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_unfused_tape(backend, seed):
    x, W, U, b, g = _problem(seed)
    impl = BACKENDS[backend]
    hs, cache = impl.gru_forward(x, W, U, b)
    fused = impl.gru_backward(g, x, W, U, hs, cache)

    tape = tn.Tape()
    with tape:
        ps = {k: tape.watch(k, v) for k, v in dict(x=x, W=W, U=U, b=b).items()}
        out = model.gru_layer_unfused(ps["x"], ps["W"], ps["U"], ps["b"])
        loss = tn.sum_axis(tn.reshape(tn.mul(out, g), (-1,)), 0)
    ref = tn.backward(loss, tape)
    for got, key in zip(fused, ("x", "W", "U", "b")):
        assert np.max(np.abs(got - ref[key])) < 1e-11, key


def test_backends_agree():
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend not built")
    x, W, U, b, g = _problem(11, B=7, T=9, I=1, H=16)
    outs = {}
    for name, impl in BACKENDS.items():
        hs, cache = impl.gru_forward(x, W, U, b)
        outs[name] = (hs, *impl.gru_backward(g, x, W, U, hs, cache))
    for a, c in zip(outs["python"], outs["cython"]):
        assert np.max(np.abs(a - c)) < 1e-12


@pytest.mark.parametrize("backend", sorted(BACKENDS))
def test_single_step_and_empty_batch(backend):
    impl = BACKENDS[backend]
    x, W, U, b, _ = _problem(2, B=1, T=1)
    hs, _ = impl.gru_forward(x, W, U, b)
    # one step from h=0: h = z * n
    a = x[0, 0] @ W + b
    H = U.shape[0]
    z = 1 / (1 + np.exp(-a[:H]))
    n = np.tanh(a[2 * H:])
    assert np.allclose(hs[0, 0], z * n, atol=1e-15)
    hs0, cache0 = impl.gru_forward(np.zeros((0, 9, 3)), W, U, b)
    assert hs0.shape == (0, 9, H)


def test_selected_backend_is_exported():
    assert kernels.BACKEND in BACKENDS
    assert kernels.gru_forward is BACKENDS[kernels.BACKEND].gru_forward
