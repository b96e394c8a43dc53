"""RMSProp and global-norm clipping."""
import numpy as np
import pytest

from dpfrl.engine import RmsProp, Tensor, clip_global_norm, global_norm


def _param(val):
    t = Tensor(np.asarray(val, dtype=np.float64), requires_grad=True)
    return t


def test_rmsprop_single_step_formula():
    p = _param([1.0])
    opt = RmsProp([p], lr=0.1, alpha=0.99, eps=0.0)
    p.grad = np.array([1.0])
    assert opt.step()
    np.testing.assert_allclose(opt.acc[0], [0.01])
    np.testing.assert_allclose(p.data, [0.0], atol=1e-15)


def test_rmsprop_zero_gradient_keeps_param():
    p = _param([2.5])
    opt = RmsProp([p], lr=0.1)
    p.grad = np.array([0.0])
    opt.step()
    np.testing.assert_allclose(p.data, [2.5])


def test_rmsprop_deterministic():
    def run():
        p = _param([1.0, -2.0])
        opt = RmsProp([p], lr=0.01)
        for _ in range(2):
            p.grad = np.array([0.3, -0.7])
            opt.step()
        return p.data.copy()

    np.testing.assert_array_equal(run(), run())


def test_rmsprop_skips_nonfinite_gradient():
    p = _param([1.0])
    opt = RmsProp([p], lr=0.1)
    p.grad = np.array([np.nan])
    assert not opt.step()
    np.testing.assert_allclose(p.data, [1.0])
    np.testing.assert_allclose(opt.acc[0], [0.0])


def test_clip_scales_above_threshold():
    g = [np.array([0.6, 0.8])]  # norm 1.0
    scale = clip_global_norm(g, 0.5)
    assert scale == pytest.approx(0.5)
    assert global_norm(g) == pytest.approx(0.5)


def test_clip_noop_below_threshold():
    g = [np.array([0.3])]
    assert clip_global_norm(g, 0.5) == pytest.approx(1.0)
    np.testing.assert_allclose(g[0], [0.3])


def test_clip_noop_at_exact_boundary():
    g = [np.array([0.5])]
    assert clip_global_norm(g, 0.5) == pytest.approx(1.0)
    np.testing.assert_allclose(g[0], [0.5])


def test_clip_joint_norm_across_tensors():
    g = [np.full(9, 1.0), np.full(16, 1.0)]  # joint norm 5.0
    scale = clip_global_norm(g, 1.0)
    assert scale == pytest.approx(0.2)
    assert global_norm(g) == pytest.approx(1.0)
