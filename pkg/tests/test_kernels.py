import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from branch_distill import _kernels as K

pytestmark = pytest.mark.skipif(not K._HAVE_NUMBA, reason="numba not installed")


@st.composite
def conv_case(draw):
    k = draw(st.integers(1, 3))
    stride = draw(st.integers(1, 2))
    h = draw(st.integers(k, 7))
    w = draw(st.integers(k, 7))
    b = draw(st.integers(1, 3))
    c = draw(st.integers(1, 3))
    seed = draw(st.integers(0, 2**16))
    return np.random.default_rng(seed).standard_normal((b, c, h, w)), k, stride


@settings(max_examples=60, deadline=None)
@given(conv_case())
def test_im2col_col2im_paths_bitwise_equal(case):
    x, k, s = case
    a = K.im2col(x, k, k, s, use_numba=True)
    b = K.im2col(x, k, k, s, use_numba=False)
    assert np.array_equal(a, b)
    g = np.random.default_rng(1).standard_normal(a.shape)
    assert np.array_equal(
        K.col2im(g, x.shape[2], x.shape[3], s, use_numba=True),
        K.col2im(g, x.shape[2], x.shape[3], s, use_numba=False),
    )


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**16), st.booleans())
def test_maxpool_paths_bitwise_equal(b, c, seed, ties):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 3, (b, c, 6, 6)).astype(np.float64) if ties else rng.standard_normal((b, c, 6, 6))
    out_a, idx_a = K.maxpool_forward(x, 2, 2, use_numba=True)
    out_b, idx_b = K.maxpool_forward(x, 2, 2, use_numba=False)
    assert np.array_equal(out_a, out_b) and np.array_equal(idx_a, idx_b)
    g = rng.standard_normal(out_a.shape)
    assert np.array_equal(
        K.maxpool_backward(g, idx_a, x.shape, 2, 2, use_numba=True),
        K.maxpool_backward(g, idx_b, x.shape, 2, 2, use_numba=False),
    )


def test_maxpool_first_max_wins_ties():
    x = np.ones((1, 1, 2, 2))
    _, idx = K.maxpool_forward(x, 2, 2)
    assert idx.item() == 0
    dx = K.maxpool_backward(np.ones((1, 1, 1, 1)), idx, x.shape, 2, 2)
    assert dx.ravel().tolist() == [1.0, 0.0, 0.0, 0.0]


def test_im2col_layout():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    cols = K.im2col(x, 2, 2, 2)
    assert cols.shape == (1, 1, 2, 2, 2, 2)
    # kernel offset (0, 0) across the 2x2 output grid
    assert cols[0, 0, 0, 0].tolist() == [[0.0, 2.0], [8.0, 10.0]]


@pytest.mark.parametrize("flag, expected", [("0", "numpy"), ("off", "numpy"), ("1", "numba")])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, BRANCH_DISTILL_NUMBA=flag)
    out = subprocess.run(
        [sys.executable, "-c", "from branch_distill import _kernels; print(_kernels.backend_name())"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == expected
