import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from treecnn import kernels

BACKENDS = sorted(kernels.IMPLEMENTATIONS)

shapes = st.tuples(
    st.integers(1, 3), st.integers(1, 3), st.integers(1, 7), st.integers(1, 7), st.sampled_from([1, 3, 5])
)


def _padded(n, c, h, w, k, seed):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, c, h + k - 1, w + k - 1)).astype(np.float32)


@given(shapes, st.integers(0, 2**16))
def test_im2col_backends_agree(shape, seed):
    n, c, h, w, k = shape
    xp = _padded(n, c, h, w, k, seed)
    ref = kernels.IMPLEMENTATIONS["numpy"]["im2col"](xp, k, k)
    assert ref.shape == (n * h * w, c * k * k)
    for b in BACKENDS:
        assert np.array_equal(kernels.IMPLEMENTATIONS[b]["im2col"](xp, k, k), ref)


@given(shapes, st.integers(0, 2**16))
def test_col2im_is_adjoint_of_im2col(shape, seed):
    n, c, h, w, k = shape
    xp = _padded(n, c, h, w, k, seed).astype(np.float64)
    rng = np.random.default_rng(seed + 1)
    cols = rng.standard_normal((n * h * w, c * k * k))
    hp, wp = xp.shape[2:]
    for b in BACKENDS:
        impl = kernels.IMPLEMENTATIONS[b]
        lhs = np.sum(impl["im2col"](xp, k, k) * cols)
        rhs = np.sum(xp * impl["col2im"](cols, n, c, hp, wp, k, k))
        assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 3]),
       st.integers(0, 2**16))
def test_maxpool_backends_agree(n, c, ho, wo, k, seed):
    rng = np.random.default_rng(seed)
    # odd extents exercise the dropped border
    x = rng.standard_normal((n, c, ho * k + 1, wo * k)).astype(np.float32)
    out_ref, arg_ref = kernels.IMPLEMENTATIONS["numpy"]["maxpool_forward"](x, k)
    dout = rng.standard_normal(out_ref.shape).astype(np.float32)
    dx_ref = kernels.IMPLEMENTATIONS["numpy"]["maxpool_backward"](dout, arg_ref, x.shape[2], x.shape[3], k)
    for b in BACKENDS:
        impl = kernels.IMPLEMENTATIONS[b]
        out, arg = impl["maxpool_forward"](x, k)
        assert np.array_equal(out, out_ref) and np.array_equal(arg, arg_ref)
        assert np.array_equal(impl["maxpool_backward"](dout, arg, x.shape[2], x.shape[3], k), dx_ref)


@pytest.mark.parametrize("backend", BACKENDS)
def test_maxpool_ties_pick_first(backend):
    x = np.ones((1, 1, 2, 2), dtype=np.float32)
    out, arg = kernels.IMPLEMENTATIONS[backend]["maxpool_forward"](x, 2)
    assert out[0, 0, 0, 0] == 1 and arg[0, 0, 0, 0] == 0


def test_env_flag_selects_numpy():
    code = "from treecnn import kernels, _accel; print(_accel.BACKEND, kernels.im2col.__name__)"
    env = dict(os.environ, TREECNN_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "_im2col_numpy"]
