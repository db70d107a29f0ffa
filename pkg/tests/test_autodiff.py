import numpy as np
import pytest

from utils.autodiff import Tensor, no_grad, parameter, stack
from utils.training import masked_cross_entropy


def numeric_grad(f, array, eps=1e-6):
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = array[idx]
        array[idx] = old + eps
        plus = f()
        array[idx] = old - eps
        minus = f()
        array[idx] = old
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def test_broadcast_add_and_matmul_gradients(rng):
    a = parameter(rng.normal(size=(3, 4)))
    b = parameter(rng.normal(size=(4,)))
    w = parameter(rng.normal(size=(4, 2)))

    def loss_value():
        return float((((a + b) @ w).tanh() ** 2).sum().data)

    loss = (((a + b) @ w).tanh() ** 2).sum()
    loss.backward()
    for t in (a, b, w):
        np.testing.assert_allclose(t.grad, numeric_grad(loss_value, t.data), rtol=1e-5, atol=1e-8)


def test_softmax_log_softmax_and_gelu(rng):
    x = parameter(rng.normal(size=(2, 5)))
    loss = (x.softmax(axis=-1) * Tensor(np.arange(5.0))).sum() + x.log_softmax(axis=-1).mean() + x.gelu().sum()
    loss.backward()
    f = lambda: float(((x.softmax(axis=-1) * Tensor(np.arange(5.0))).sum()
                       + x.log_softmax(axis=-1).mean() + x.gelu().sum()).data)
    np.testing.assert_allclose(x.grad, numeric_grad(f, x.data), rtol=1e-5, atol=1e-8)


def test_set_rows_routes_gradient_to_both_inputs(rng):
    x = parameter(rng.normal(size=(1, 3, 2)))
    row = parameter(rng.normal(size=(2,)))
    out = x.set_rows((np.array([0]), np.array([1])), stack([row]))
    (out * Tensor(np.arange(6.0).reshape(1, 3, 2))).sum().backward()
    np.testing.assert_allclose(row.grad, [2.0, 3.0])
    np.testing.assert_allclose(x.grad[0, 1], [0.0, 0.0])
    np.testing.assert_allclose(x.grad[0, 0], [0.0, 1.0])


def test_no_grad_records_nothing():
    x = parameter(np.ones(3))
    with no_grad():
        y = (x * 2).sum()
    assert not y.requires_grad
    with pytest.raises(RuntimeError):
        y.backward()


def test_transformer_gradients_match_finite_differences(float64_model, vocab, rng):
    ids = np.array([rng.integers(0, len(vocab), size=7)])
    mask = np.ones_like(ids, dtype=bool)
    model = float64_model

    def loss_value():
        with no_grad():
            logits, _ = model.run(ids, tap_layers=())
            return float(masked_cross_entropy(logits, ids, mask).data)

    logits, _ = model.run(ids, tap_layers=())
    masked_cross_entropy(logits, ids, mask).backward()

    for name in ("blocks.0.attn.q.weight", "blocks.1.mlp.fc.bias", "blocks.0.ln1.weight", "unembed"):
        param = model.params[name]
        flat = param.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(6, flat.size), replace=False)
        for i in picks:
            idx = np.unravel_index(i, param.data.shape)
            old = param.data[idx]
            param.data[idx] = old + 1e-6
            plus = loss_value()
            param.data[idx] = old - 1e-6
            minus = loss_value()
            param.data[idx] = old
            numeric = (plus - minus) / 2e-6
            analytic = param.grad[idx]
            assert abs(numeric - analytic) <= 1e-4 * max(1.0, abs(numeric), abs(analytic)), name
