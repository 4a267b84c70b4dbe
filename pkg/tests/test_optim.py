import numpy as np
import pytest

from twinvit import tensor as T
from twinvit.errors import StateError
from twinvit.optim import AdamState, decays, learning_rate, optimizer_step


def param(value, grad=None):
    p = T.parameter(np.array(value, dtype=np.float32))
    p.grad = None if grad is None else np.array(grad, dtype=np.float32)
    return p


def test_zero_grad_no_decay_is_noop():
    p = param([[1.0, -2.0]], [[0.0, 0.0]])
    optimizer_step({"w": p}, 0.1, 0.0, AdamState())
    np.testing.assert_array_equal(p.data, [[1.0, -2.0]])


def test_first_step_is_minus_lr():
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
    p = param(0.0, 1.0)
    optimizer_step({"x": p}, 0.1, 0.0, AdamState())
    assert float(p.data) == pytest.approx(-0.1, rel=1e-6)


def test_constant_grad_keeps_unit_steps():
    p, state = param(0.0), AdamState()
    for _ in range(5):
        p.grad = np.float32(1.0)
        optimizer_step({"x": p}, 0.1, 0.0, state)
    assert float(p.data) == pytest.approx(-0.5, rel=1e-5)


def test_weight_decay_shrinks_matrices_only():
    w = param([[2.0, -2.0]], [[0.0, 0.0]])
    b = param([2.0], [0.0])
    optimizer_step({"w": w, "bias": b}, 0.1, 0.5, AdamState())
    np.testing.assert_allclose(w.data, [[1.9, -1.9]], rtol=1e-6)
    np.testing.assert_array_equal(b.data, [2.0])


def test_missing_grad():
    with pytest.raises(StateError):
        optimizer_step({"w": param([1.0])}, 0.1, 0.0, AdamState())


def test_decay_exclusions():
    assert decays("blocks.0.attn.qkv.weight", np.zeros((2, 2)))
    assert not decays("blocks.0.attn.qkv.bias", np.zeros(2))
    assert not decays("backbone.pos_embed", np.zeros((2, 2)))
    assert not decays("backbone.cls_token", np.zeros((1, 2)))


def test_schedule_shape():
    total, base = 100, 5e-4
    lrs = [learning_rate(s, total, base) for s in range(total)]
    assert lrs[0] == pytest.approx(base / 10)
    assert lrs[9] == pytest.approx(base)
    assert max(lrs) == pytest.approx(base)
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
    assert lrs[-1] < base * 0.01


def test_schedule_without_warmup():
    assert learning_rate(0, 10, 1.0, warmup_fraction=0.0) == pytest.approx(1.0)
