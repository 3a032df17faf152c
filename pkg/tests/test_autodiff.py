import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ma2t import autodiff as ad
from ma2t.autodiff import Tensor
from ma2t.errors import ContractError, DimensionError, NumericError
from ma2t.rng import Stream


def test_matmul_identity():
    out = ad.primitive_forward("matmul", Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    assert out.data.tolist() == [[3, 4], [5, 6]]


def test_relu_definition():
    assert ad.primitive_forward("relu", Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]


def test_conv_hand_sum():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


def test_conv_matches_direct_loop():
    rs = Stream(0)
    x, w, b = rs.normal((2, 3, 7, 6)), rs.normal((4, 3, 3, 3)), rs.normal(4)
    for stride, pad in [(1, 0), (2, 1), (1, 2)]:
        got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (x.shape[2] + 2 * pad - 3) // stride + 1
        wo = (x.shape[3] + 2 * pad - 3) // stride + 1
        want = np.zeros((2, 4, ho, wo))
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                want[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w) + b
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_backward_square_and_sum():
    with ad.Tape() as tape:
        x = Tensor(3.0, requires_grad=True)
        g = ad.backward(x * x, tape)
    assert g[x].data.item() == 6.0
    with ad.Tape() as tape:
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        g = ad.backward(ad.sum_(x), tape)
    assert np.array_equal(g[x].data, np.ones((2, 3)))


def test_loss_gradient_wrt_itself_is_one():
    x = Tensor(2.0, requires_grad=True)
    assert ad.backward(x)[x].data.item() == 1.0


def test_backward_needs_scalar():
    with ad.Tape() as tape:
        x = Tensor(np.ones(3), requires_grad=True)
        y = x * 2.0
        with pytest.raises(ContractError):
            ad.backward(y, tape)


@pytest.mark.filterwarnings("ignore:overflow")
def test_shape_mismatch_and_non_finite():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])
    with pytest.raises(NumericError):
        ad.mul(Tensor([1e200]), Tensor([1e200]))
    with pytest.raises(ContractError):
        ad.primitive_forward("softmax", Tensor(1.0))


def test_sign_of_zero_is_zero():
    assert ad.sign(Tensor([-2.0, 0.0, 3.0])).data.tolist() == [-1, 0, 1]


def test_clamp_gradient_on_closed_interval():
    with ad.Tape() as tape:
        x = Tensor([-1.0, 0.0, 0.5, 1.0, 2.0], requires_grad=True)
        g = ad.backward(ad.sum_(ad.clamp(x, 0.0, 1.0)), tape)
    assert g[x].data.tolist() == [0, 1, 1, 1, 0]


def test_losses_masked_and_reduced():
    pred = Tensor([[1.0, 2.0], [3.0, 5.0]])
    target = Tensor([[0.0, 2.0], [3.0, 3.0]])
    per = ad.mse_loss(pred, target, mask=np.array([[1.0, 1.0], [0.0, 1.0]]), reduction="none")
    assert per.data.tolist() == [0.5, 4.0]
    empty = ad.mse_loss(pred, target, mask=np.zeros((2, 2)), reduction="none")
    assert empty.data.tolist() == [0.0, 0.0]
    logits = np.array([[0.0, 50.0, -50.0]])
    bce = ad.bce_with_logits_loss(Tensor(logits), Tensor([[1.0, 1.0, 0.0]])).item()
    assert np.isclose(bce, np.log(2.0) / 3.0)


# finite-difference checks per primitive, inputs in [-1, 1]

def _unary(op):
    return lambda x: ad.sum_(ad.mul(op(x), Tensor(np.linspace(0.3, 1.7, x.data.size).reshape(x.shape))))


rs = Stream(11)
W = rs.uniform((4, 3), -1, 1)
K = rs.uniform((2, 2, 3, 3), -1, 1)
CASES = {
    "add": (lambda x: ad.sum_(ad.add(x, Tensor(W)) * Tensor(W)), (4, 3)),
    "sub": (lambda x: ad.sum_(ad.sub(Tensor(W), x) * Tensor(W)), (4, 3)),
    "mul": (lambda x: ad.sum_(ad.mul(x, x)), (4, 3)),
    "matmul": (lambda x: ad.sum_(ad.tanh(ad.matmul(x, Tensor(W.T)))), (5, 3)),
    "conv2d": (lambda x: ad.sum_(ad.tanh(ad.conv2d(x, Tensor(K), None, 2, 1))),
               (1, 2, 5, 5)),
    "conv2d_weight": (lambda w: ad.sum_(ad.tanh(ad.conv2d(Tensor(np.linspace(-1, 1, 50).reshape(1, 2, 5, 5)),
                                                          w, None, 1, 0))), (3, 2, 3, 3)),
    "relu": (_unary(ad.relu), (3, 4)),
    "tanh": (_unary(ad.tanh), (3, 4)),
    "sigmoid": (_unary(ad.sigmoid), (3, 4)),
    "flatten": (lambda x: ad.sum_(ad.tanh(ad.flatten(x))), (2, 2, 3)),
    "concat": (lambda x: ad.sum_(ad.tanh(ad.concat([x, x * 2.0], axis=1))), (2, 3)),
    "slice": (lambda x: ad.sum_(ad.tanh(ad.slice_(x, (slice(None), slice(1, 3))))), (2, 4)),
    "sum": (lambda x: ad.sum_(ad.tanh(ad.sum_(x, axis=0))), (3, 4)),
    "mean": (lambda x: ad.sum_(ad.tanh(ad.mean(x, axis=1))), (3, 4)),
    "mse_loss": (lambda x: ad.mse_loss(x, Tensor(W)), (4, 3)),
    "bce_with_logits_loss": (lambda x: ad.bce_with_logits_loss(x, Tensor((W > 0).astype(float))), (4, 3)),
    "l1_norm": (lambda x: ad.l1_norm(x), (4, 3)),
    "l2_norm": (lambda x: ad.l2_norm(x), (4, 3)),
    "clamp": (lambda x: ad.sum_(ad.mul(ad.clamp(x, -0.5, 0.5), x)), (4, 3)),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients_match_finite_differences(name):
    f, shape = CASES[name]
    gen = Stream(5, "test", sorted(CASES).index(name))
    for _ in range(3):
        x = gen.uniform(shape, -1, 1)
        if name in ("relu", "l1_norm", "clamp"):
            # keep away from kinks so central differences are valid
            x = np.where(np.abs(np.abs(x) - 0.5) < 1e-3, x + 1e-2, x)
            x = np.where(np.abs(x) < 1e-3, 0.1, x)
        assert ad.grad_check(f, x) < 1e-4


def test_grad_check_spec_examples():
    assert ad.grad_check(lambda x: ad.sum_(x * x), np.array([1.0])) < 1e-6
    x = Stream(2).uniform(10, -1, 1)
    assert ad.grad_check(lambda t: ad.sum_(ad.tanh(t)), x) < 1e-4
    assert ad.grad_check(lambda t: ad.sum_(t * 0.0) + 1.0, x) == 0.0
    with pytest.raises(ContractError):
        ad.grad_check(lambda t: ad.sum_(t), x, h=0.0)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-1, 1)),
       st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear(x, a, b):
    def f(t):
        return ad.sum_(ad.tanh(t))

    def g(t):
        return ad.sum_(t * t)

    _, gf = ad.value_and_grad(f, x)
    _, gg = ad.value_and_grad(g, x)
    _, gc = ad.value_and_grad(lambda t: f(t) * a + g(t) * b, x)
    np.testing.assert_allclose(gc, a * gf + b * gg, atol=1e-12)


def test_backward_is_deterministic(model, batch):
    from ma2t.pipeline import forward_with_noise
    obs, labels = batch

    def grads():
        with ad.Tape() as tape:
            _, br = forward_with_noise(model, obs, labels)
            g = ad.backward(br.total, tape)
        return [g[p].data.tobytes() for p in model.parameters()]

    assert grads() == grads()


def test_broadcast_gradient_reduces_to_input_shape():
    with ad.Tape() as tape:
        b = Tensor(np.ones(3), requires_grad=True)
        y = ad.sum_(ad.add(Tensor(np.ones((4, 3))), b))
        g = ad.backward(y, tape)
    assert g[b].data.tolist() == [4.0, 4.0, 4.0]


def test_sgd_and_adam_steps():
    p = Tensor([1.0], requires_grad=True)
    ad.optimizer_step([p], ad.Gradients({p.uid: Tensor([1.0])}), ad.OptimizerState("sgd", 0.1))
    assert np.isclose(p.data[0], 0.9)
    q = Tensor([0.5], requires_grad=True)
    ad.optimizer_step([q], ad.Gradients({q.uid: Tensor([0.0])}), ad.OptimizerState("sgd", 0.1))
    assert q.data[0] == 0.5
    r = Tensor([0.0], requires_grad=True)
    state = ad.OptimizerState("adam", 0.001)
    ad.optimizer_step([r], ad.Gradients({r.uid: Tensor([1.0])}), state)
    # hand evaluation: m = 0.1, v = 0.001, m_hat = 1, v_hat = 1
    assert np.isclose(r.data[0], -0.001 * 1.0 / (1.0 + 1e-8), rtol=0, atol=1e-15)
    assert state.moments[0][0].shape == r.shape


def test_missing_gradient_is_contract_error():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(ContractError):
        ad.optimizer_step([p], ad.Gradients(), ad.OptimizerState("sgd", 0.1))
    with pytest.raises(ContractError):
        ad.OptimizerState("rmsprop", 0.1)
