"""Backend parity: the compiled kernels and the numpy reference must agree
to float64 rounding on random inputs and on every edge case, and the
CONTIQ_KERNELS switch must select the backend it names."""

import os
import subprocess
import sys

import numpy as np
import pytest

from contiq._kernels import _ref, backend_name

try:
    from contiq._kernels import _native
except ImportError:
    _native = None

needs_native = pytest.mark.skipif(_native is None, reason="compiled backend not built")

RNG = np.random.default_rng(20240817)


def both(fn_name, *args):
    """Call one kernel on both backends with independent argument copies."""
    ref_args = [np.copy(a) if isinstance(a, np.ndarray) else a for a in args]
    nat_args = [np.copy(a) if isinstance(a, np.ndarray) else a for a in args]
    ref_out = getattr(_ref, fn_name)(*ref_args)
    nat_out = getattr(_native, fn_name)(*nat_args)
    return ref_out, nat_out, ref_args, nat_args


@needs_native
class TestParity:
    def test_normal_cdf(self):
        z = np.concatenate([RNG.normal(scale=3, size=4000), [-40.0, 0.0, 40.0]])
        ref, nat, _, _ = both("normal_cdf", z)
        np.testing.assert_allclose(nat, ref, rtol=0, atol=1e-14)
        assert nat[-3] == 0.0 and nat[-1] == 1.0

    def test_pair_pref_forward(self):
        sx = RNG.normal(size=3000)
        sy = RNG.normal(size=3000)
        (rp, rd), (np_, nd), _, _ = both("pair_pref_forward", sx, sy)
        np.testing.assert_allclose(np_, rp, rtol=0, atol=1e-14)
        np.testing.assert_allclose(nd, rd, rtol=0, atol=1e-14)

    def test_fidelity_forward(self):
        p = RNG.uniform(size=3000)
        phat = RNG.uniform(size=3000)
        lo, hi = 1e-6, 1.0 - 1e-6
        (rl, rd), (nl, nd), _, _ = both("fidelity_forward", p, phat, lo, hi)
        np.testing.assert_allclose(nl, rl, rtol=0, atol=1e-14)
        np.testing.assert_allclose(nd, rd, rtol=0, atol=1e-14)

    def test_fidelity_clamp_edges(self):
        p = np.array([0.0, 1.0, 0.5, 0.5])
        phat = np.array([0.5, 0.5, 0.0, 1.0])
        lo, hi = 1e-6, 1.0 - 1e-6
        (rl, rd), (nl, nd), _, _ = both("fidelity_forward", p, phat, lo, hi)
        np.testing.assert_allclose(nl, rl, rtol=0, atol=1e-14)
        # flat outside the clamp interval, on both backends
        np.testing.assert_array_equal(rd[2:], [0.0, 0.0])
        np.testing.assert_array_equal(nd[2:], [0.0, 0.0])

    def test_relu_bitwise(self):
        z = RNG.normal(size=(64, 33))
        g = RNG.normal(size=(64, 33))
        ref, nat, _, _ = both("relu", z)
        np.testing.assert_array_equal(nat, ref)
        ref_b, nat_b, _, _ = both("relu_backward", z, g)
        np.testing.assert_array_equal(nat_b, ref_b)

    def test_l2_normalize_rows(self):
        v = RNG.normal(size=(50, 128))
        v[7] = 0.0  # zero row must survive unscaled
        (ru, rn), (nu, nn), _, _ = both("l2_normalize_rows", v)
        np.testing.assert_allclose(nu, ru, rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(nn, rn, rtol=1e-13, atol=0)
        assert np.all(nu[7] == 0.0) and nn[7] == 0.0

    def test_l2_normalize_backward(self):
        v = RNG.normal(size=(40, 96))
        v[3] = 0.0
        unit, norms = _ref.l2_normalize_rows(v)
        g = RNG.normal(size=v.shape)
        ref, nat, _, _ = both("l2_normalize_backward", unit, norms, g)
        np.testing.assert_allclose(nat, ref, rtol=1e-12, atol=1e-15)
        assert np.all(nat[3] == 0.0)

    def test_adam_update(self):
        shape = (37, 11)
        param = RNG.normal(size=shape)
        grad = RNG.normal(size=shape)
        m = RNG.normal(size=shape) * 0.1
        v = np.abs(RNG.normal(size=shape)) * 0.01
        args = (grad, m, v, 7, 3e-4, 0.9, 0.999, 1e-8)
        ref_p, nat_p = param.copy(), param.copy()
        ref_state = [a.copy() if isinstance(a, np.ndarray) else a for a in args]
        nat_state = [a.copy() if isinstance(a, np.ndarray) else a for a in args]
        _ref.adam_update(ref_p, *ref_state)
        _native.adam_update(nat_p, *nat_state)
        np.testing.assert_allclose(nat_p, ref_p, rtol=1e-13, atol=1e-16)
        np.testing.assert_allclose(nat_state[1], ref_state[1], rtol=1e-13, atol=1e-16)
        np.testing.assert_allclose(nat_state[2], ref_state[2], rtol=1e-13, atol=1e-16)

    def test_adam_zero_gradient_is_noop(self):
        param = RNG.normal(size=8)
        for impl in (_ref, _native):
            p = param.copy()
            impl.adam_update(p, np.zeros(8), np.zeros(8), np.zeros(8), 1, 0.1, 0.9, 0.999, 1e-8)
            np.testing.assert_array_equal(p, param)

    def test_assign_nearest(self):
        x = RNG.normal(size=(300, 16))
        c = RNG.normal(size=(12, 16))
        (rl, rd), (nl, nd), _, _ = both("assign_nearest", x, c)
        np.testing.assert_array_equal(nl, rl)
        np.testing.assert_allclose(nd, rd, rtol=1e-12, atol=1e-12)

    def test_assign_nearest_tie_lowest_index(self):
        x = np.array([[1.0, 1.0]])
        c = np.array([[0.0, 0.0], [2.0, 2.0]])  # equidistant
        for impl in (_ref, _native):
            labels, _ = impl.assign_nearest(x, c)
            assert labels[0] == 0


def run_with_backend(value):
    env = dict(os.environ)
    env["CONTIQ_KERNELS"] = value
    return subprocess.run(
        [sys.executable, "-c", "import contiq._kernels as K; print(K.backend_name())"],
        capture_output=True,
        text=True,
        env=env,
    )


class TestBackendSelection:
    def test_current_backend_is_named(self):
        assert backend_name() in ("python", "native")

    def test_force_python(self):
        proc = run_with_backend("python")
        assert proc.returncode == 0
        assert proc.stdout.strip() == "python"

    @needs_native
    def test_force_native(self):
        proc = run_with_backend("native")
        assert proc.returncode == 0
        assert proc.stdout.strip() == "native"

    def test_unknown_value_rejected(self):
        proc = run_with_backend("metal")
        assert proc.returncode != 0
        assert "not understood" in proc.stderr
