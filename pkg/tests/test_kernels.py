import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msranet import _pykernels, kernels

BACKENDS = kernels.available_backends()
needs_compiled = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernels not built")


def test_coords_half_pixel_formula():
    i0, i1, fr = kernels.bilinear_coords(4, 8, np.float64)
    for d in range(8):
        s = min(max((d + 0.5) * 4 / 8 - 0.5, 0), 3)
        assert i0[d] == int(np.floor(s))
        assert i1[d] == min(i0[d] + 1, 3)
        assert fr[d] == pytest.approx(s - np.floor(s))


def test_same_size_resize_is_identity():
    x = np.random.default_rng(0).random((2, 5, 7, 3))
    np.testing.assert_array_equal(kernels.bilinear(x, 5, 7), x)


def test_fallback_im2col_layout():
    x = np.arange(2 * 4 * 4 * 3, dtype=np.float64).reshape(2, 4, 4, 3)
    cols = _pykernels.im2col(x, 3, 3, 1, 2, 2)
    # row (n, oh, ow), column ordering (kh, kw, c)
    assert cols.shape == (2 * 2 * 2, 27)
    assert np.array_equal(cols[3], x[0, 1:4, 1:4, :].ravel())


@needs_compiled
@given(
    st.integers(1, 3), st.integers(3, 9), st.integers(3, 9), st.integers(1, 4),
    st.sampled_from([1, 3]), st.integers(1, 2), st.sampled_from([np.float32, np.float64]), st.integers(0, 2**31),
)
def test_backends_agree_im2col_col2im(n, h, w, c, k, stride, dtype, seed):
    r = np.random.default_rng(seed)
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    x = r.random((n, h, w, c)).astype(dtype)
    py, cy = BACKENDS["python"], BACKENDS["cython"]
    a = py.im2col(x, k, k, stride, ho, wo)
    b = cy.im2col(x, k, k, stride, ho, wo)
    assert a.dtype == b.dtype == dtype
    np.testing.assert_array_equal(a, b)
    cols = r.random(a.shape).astype(dtype)
    np.testing.assert_array_equal(py.col2im(cols, n, h, w, c, k, k, stride, ho, wo),
                                  cy.col2im(cols, n, h, w, c, k, k, stride, ho, wo))


@needs_compiled
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31))
def test_backends_agree_bilinear(h, w, ho, wo, seed):
    r = np.random.default_rng(seed)
    x = r.random((2, h, w, 3))
    i0y, i1y, fy = kernels.bilinear_coords(h, ho, x.dtype)
    i0x, i1x, fx = kernels.bilinear_coords(w, wo, x.dtype)
    py, cy = BACKENDS["python"], BACKENDS["cython"]
    np.testing.assert_array_equal(py.bilinear(x, i0y, i1y, fy, i0x, i1x, fx), cy.bilinear(x, i0y, i1y, fy, i0x, i1x, fx))
    g = r.random((2, ho, wo, 3))
    np.testing.assert_allclose(
        py.bilinear_grad(g, h, w, i0y, i1y, fy, i0x, i1x, fx),
        cy.bilinear_grad(g, h, w, i0y, i1y, fy, i0x, i1x, fx),
        rtol=1e-12, atol=1e-14,
    )


def test_bilinear_grad_is_adjoint(rng):
    # <resize(x), g> == <x, resize^T(g)>
    x = rng.random((1, 3, 5, 2))
    g = rng.random((1, 7, 4, 2))
    lhs = (kernels.bilinear(x, 7, 4) * g).sum()
    rhs = (x * kernels.bilinear_grad(g, 3, 5)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_env_var_forces_fallback():
    env = dict(os.environ, MSRANET_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", "from msranet import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_compiled
def test_compiled_backend_is_default():
    if os.environ.get("MSRANET_KERNELS", "").lower() != "python":
        assert kernels.BACKEND == "cython"
