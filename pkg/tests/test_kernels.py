import numpy as np
import pytest

from nldenoise import kernels


def conv_oracle(x, weight, bias):
    """Direct 7-nested-loop cross-correlation with zero padding."""
    cout, cin, k = weight.shape[0], weight.shape[1], weight.shape[2]
    d, h, w = x.shape[1:]
    r = k // 2
    out = np.zeros((cout, d, h, w), dtype=np.float64)
    for co in range(cout):
        for z in range(d):
            for y in range(h):
                for xx in range(w):
                    acc = float(bias[co])
                    for ci in range(cin):
                        for kz in range(k):
                            for ky in range(k):
                                for kx in range(k):
                                    iz, iy, ix = z + kz - r, y + ky - r, xx + kx - r
                                    if 0 <= iz < d and 0 <= iy < h and 0 <= ix < w:
                                        acc += weight[co, ci, kz, ky, kx] * x[ci, iz, iy, ix]
                    out[co, z, y, xx] = acc
    return out


class TestForward:
    def test_pointwise_kernel_scales(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 4, 4, 4)).astype(np.float32)
        w = np.full((1, 1, 1, 1, 1), 2.0, dtype=np.float32)
        b = np.zeros(1, dtype=np.float32)
        y = kernels.conv3d_forward(x, w, b)
        assert np.allclose(y, 2.0 * x)

    def test_ones_kernel_padding_arithmetic(self):
        x = np.ones((1, 5, 5, 5), dtype=np.float32)
        w = np.ones((1, 1, 3, 3, 3), dtype=np.float32)
        b = np.zeros(1, dtype=np.float32)
        y = kernels.conv3d_forward(x, w, b)[0]
        assert y[2, 2, 2] == 27.0
        assert y[0, 0, 0] == 8.0
        assert y[0, 2, 2] == 18.0  # face

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 5, 4, 6)).astype(np.float32)
        w = rng.normal(size=(2, 3, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=2).astype(np.float32)
        y = kernels.conv3d_forward(x, w, b)
        assert np.allclose(y, conv_oracle(x, w, b), atol=1e-5)

    def test_backends_agree(self):
        if not kernels.HAVE_NUMBA:
            pytest.skip("numba backend unavailable")
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 6, 6, 6)).astype(np.float32)
        w = rng.normal(size=(4, 4, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        y_nb = kernels.conv3d_forward_numba(x, w, b)
        y_np = kernels.conv3d_forward_numpy(x, w, b)
        assert np.allclose(y_nb, y_np, atol=1e-5)


class TestBackward:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 4, 4, 4))
        w = rng.normal(size=(2, 2, 3, 3, 3))
        b = rng.normal(size=2)
        dy = rng.normal(size=(2, 4, 4, 4))

        def loss(x_, w_, b_):
            return float(np.sum(kernels.conv3d_forward(x_, w_, b_) * dy))

        gx, gw, gb = kernels.conv3d_backward(x, w, dy)
        eps = 1e-6
        for arr, grad in ((x, gx), (w, gw), (b, gb)):
            flat = arr.ravel()
            for i in rng.choice(flat.size, size=min(10, flat.size), replace=False):
                old = flat[i]
                flat[i] = old + eps
                lp = loss(x, w, b)
                flat[i] = old - eps
                lm = loss(x, w, b)
                flat[i] = old
                fd = (lp - lm) / (2 * eps)
                assert grad.ravel()[i] == pytest.approx(fd, rel=1e-5, abs=1e-7)

    def test_backward_backends_agree(self):
        if not kernels.HAVE_NUMBA:
            pytest.skip("numba backend unavailable")
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 5, 5, 5)).astype(np.float32)
        w = rng.normal(size=(2, 3, 3, 3, 3)).astype(np.float32)
        dy = rng.normal(size=(2, 5, 5, 5)).astype(np.float32)
        gx1, gw1, gb1 = kernels.conv3d_backward_numba(x, w, dy)
        gx2, gw2, gb2 = kernels.conv3d_backward_numpy(x, w, dy)
        assert np.allclose(gx1, gx2, atol=1e-4)
        assert np.allclose(gw1, gw2, atol=1e-3)
        assert np.allclose(gb1, gb2, atol=1e-4)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 4, 4, 4)).astype(np.float32)
        w = rng.normal(size=(2, 2, 3, 3, 3)).astype(np.float32)
        dy = rng.normal(size=(2, 4, 4, 4)).astype(np.float32)
        r1 = kernels.conv3d_backward(x, w, dy)
        r2 = kernels.conv3d_backward(x, w, dy)
        for a, b in zip(r1, r2):
            assert a.tobytes() == b.tobytes()
