import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from doslab import numerics as nx

# bounded away from zero so relative FD error is not dominated by roundoff
small = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
               elements=st.floats(0.25, 3))


def _store(**arrays):
    s = nx.ParamStore()
    for k, v in arrays.items():
        s.add(k, v)
    return s


def test_grad_check_quadratic():
    p = _store(p=np.array([1.0, -2.0]))
    leaves = p.tensors()
    loss = nx.total(nx.mul(leaves["p"], leaves["p"]))
    loss.backward()
    np.testing.assert_allclose(leaves["p"].grad, [2.0, -4.0])
    rep = nx.grad_check(lambda t: nx.total(nx.mul(t["p"], t["p"])), p, eps=1e-5)
    assert rep["p"] < 1e-8


def test_grad_check_constant_loss():
    p = _store(a=np.ones((2, 3)))
    rep = nx.grad_check(lambda t: nx.Tensor(np.array(4.0)), p)
    assert rep == {"a": 0.0}


def test_grad_check_flags_non_finite():
    p = _store(a=np.array([1.0]))
    with pytest.raises(nx.NonFiniteError, match="'a'"):
        nx.grad_check(lambda t: nx.scale(nx.total(t["a"]), np.inf), p)


def test_grad_check_detects_wrong_gradient():
    p = _store(a=np.array([0.5, 1.5]))

    def bad(t):
        # value is sum(a^2) but the recorded backward claims d/da = a
        a = t["a"]
        return nx.total(nx._node(a.value ** 2, (a,), lambda g: (g * a.value,)))

    assert nx.grad_check(bad, p)["a"] > 0.1


def _chain(t):
    m = sp.csr_matrix(np.array([[0.5, 0.5, 0.0], [0.0, 1.0, 0.0], [1 / 3, 1 / 3, 1 / 3]]))
    h = nx.relu(nx.affine(t["x"], t["w"], t["b"]))
    h = nx.spmm(m, h)
    h = nx.concat([h, nx.take_rows(t["x"], [0, 0, 2])], axis=1)
    h = nx.add(h, nx.outer(np.array([1.0, 0.0, 0.5]), t["tok"]))
    z = nx.normalize_rows(h)
    lg = nx.scale(nx.matmul(z, nx.transpose(nx.normalize_rows(t["q"]))), 1 / 0.3)
    a = nx.weighted_sum(nx.log_softmax(lg, axis=0), np.array([[0.2, 0.1], [0.5, 0.6], [0.3, 0.3]]))
    b = nx.total(nx.row_dot(z, nx.sub(z, nx.scale(z, 0.5))))
    return nx.add(nx.mul(a, a), nx.add(b, nx.weighted_sum(nx.log_softmax(lg, axis=1), np.ones((3, 2)))))


def test_every_op_passes_grad_check():
    rng = np.random.default_rng(0)
    p = _store(x=rng.normal(size=(3, 2)), w=rng.normal(size=(2, 3)), b=rng.normal(size=3),
               tok=rng.normal(size=5), q=rng.normal(size=(2, 5)))
    rep = nx.grad_check(_chain, p, eps=1e-6)
    assert max(rep.values()) < 1e-6, rep


@given(small, small)
@settings(max_examples=40, deadline=None)
def test_broadcast_add_mul_gradients(a, b):
    b = b[:1, : a.shape[1]] if b.shape[1] >= a.shape[1] else np.resize(b, (1, a.shape[1]))
    p = _store(a=a, b=b)
    rep = nx.grad_check(lambda t: nx.total(nx.mul(nx.add(t["a"], t["b"]), t["a"])), p, eps=1e-6)
    assert max(rep.values()) < 1e-5


def test_no_graph_without_grad():
    x = nx.Tensor(np.ones((2, 2)))
    y = nx.relu(nx.matmul(x, x))
    assert not y.requires_grad and y._parents == ()


def test_take_rows_repeated_indices_accumulate():
    a = nx.Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    nx.total(nx.take_rows(a, [1, 1, 2])).backward()
    np.testing.assert_allclose(a.grad, [[0, 0], [2, 2], [1, 1]])


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        nx.Tensor(np.ones(2), requires_grad=True).backward()


def test_param_store_layout_and_copy():
    s = _store(a=np.ones((2, 3)), b=np.zeros(4))
    assert s.layout() == {"a": (2, 3), "b": (4,)}
    assert all(s.grads[k].shape == s.arrays[k].shape for k in s.names())
    c = s.copy()
    c.arrays["a"][0, 0] = 5
    assert s["a"][0, 0] == 1
    assert not s.equals(c)
    s.arrays["b"][0] = np.nan
    with pytest.raises(nx.NonFiniteError, match="'b'"):
        s.check_finite()


def test_layout_mismatch_names_array():
    a = _store(x=np.ones(2), y=np.ones(3))
    b = _store(x=np.ones(2), y=np.ones(4))
    with pytest.raises(ValueError, match="'y'"):
        nx.check_same_layout(a, b)


def test_adamw_zero_gradient_no_decay_is_identity():
    s = _store(p=np.array([1.0, -2.0]))
    opt = nx.AdamW(lr=0.1, weight_decay=0.0)
    opt.step(s)
    np.testing.assert_array_equal(s["p"], [1.0, -2.0])


def test_adamw_first_step_by_hand():
    s = _store(p=np.array([1.0]))
    s.grads["p"][:] = 1.0
    opt = nx.AdamW(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
    opt.step(s)
    # m_hat = 1, v_hat = 1 after bias correction
    assert s["p"][0] == pytest.approx(1.0 - 0.1 * 1.0 / (1.0 + 1e-8), abs=1e-15)
    assert opt.step_count == 1


def test_adamw_decoupled_decay():
    s = _store(p=np.array([2.0, -3.0]), bias=np.array([1.0]))
    opt = nx.AdamW(lr=0.1, weight_decay=0.1, no_decay=("bias",))
    opt.step(s)
    np.testing.assert_allclose(s["p"], [2.0 * 0.99, -3.0 * 0.99], rtol=1e-15)
    assert s["bias"][0] == 1.0


def test_adamw_rejects_non_finite_gradient():
    s = _store(p=np.array([1.0]), q=np.array([1.0]))
    s.grads["q"][:] = np.inf
    opt = nx.AdamW(lr=0.1)
    with pytest.raises(nx.NonFiniteError, match="'q'"):
        opt.step(s)
    assert s["p"][0] == 1.0 and opt.step_count == 0
