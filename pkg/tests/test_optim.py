import math

import numpy as np
import pytest

from qllm.optim import AdamW, make_rng
from qllm.tensor import ShapeError, Tensor


def test_zero_grad_no_decay_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), True)
    opt = AdamW([p], lr=0.1, total_steps=5)
    for _ in range(5):
        opt.step([np.zeros(2)])
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_single_step_by_hand():
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.1
    p = Tensor(np.array([2.0]), True)
    AdamW([p], lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd, total_steps=10).step([np.array([0.5])])
    m_hat = (1 - b1) * 0.5 / (1 - b1)
    v_hat = (1 - b2) * 0.25 / (1 - b2)
    expected = 2.0 * (1 - lr * wd) - lr * m_hat / (math.sqrt(v_hat) + eps)
    assert p.data[0] == pytest.approx(expected, rel=1e-15)


def test_linear_decay_endpoint():
    opt = AdamW([Tensor(np.zeros(1), True)], lr=5e-4, total_steps=8)
    assert opt.lr_at(0) == 5e-4
    assert opt.lr_at(4) == pytest.approx(2.5e-4)
    assert opt.lr_at(8) == 0.0


def test_schedule_exhausted():
    p = Tensor(np.zeros(1), True)
    opt = AdamW([p], total_steps=1)
    opt.step([np.ones(1)])
    with pytest.raises(RuntimeError):
        opt.step([np.ones(1)])


def test_shape_mismatch():
    opt = AdamW([Tensor(np.zeros(2), True)], total_steps=3)
    with pytest.raises(ShapeError):
        opt.step([np.zeros(3)])
    with pytest.raises(ShapeError):
        opt.step([])


def test_moments_match_parameter_shapes():
    params = [Tensor(np.zeros((2, 3)), True), Tensor(np.zeros(4), True)]
    opt = AdamW(params, total_steps=2)
    assert [m.shape for m in opt.m] == [(2, 3), (4,)] == [v.shape for v in opt.v]


def test_rng_streams():
    a = make_rng(3, 1).standard_normal(5)
    assert np.array_equal(a, make_rng(3, 1).standard_normal(5))
    assert not np.array_equal(a, make_rng(3, 2).standard_normal(5))
    assert not np.array_equal(a, make_rng(4, 1).standard_normal(5))
