import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ofdmce import autodiff as ad
from ofdmce.autodiff import Tensor

from conftest import check_primitive, rel_error


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _dims(rng, n, lo=1, hi=5):
    return tuple(int(v) for v in rng.integers(lo, hi, size=n))


# each case: rng -> (callable on Tensors, list of input arrays)
def case_matmul(rng):
    b, m, k, n = _dims(rng, 4)
    return ad.matmul, [rng.standard_normal((b, m, k)), rng.standard_normal((k, n))]


def case_add(rng):
    a, b = _dims(rng, 2)
    return ad.add, [rng.standard_normal((a, b)), rng.standard_normal((1, b))]


def case_sub(rng):
    a, b = _dims(rng, 2)
    return ad.sub, [rng.standard_normal((a, 1)), rng.standard_normal((a, b))]


def case_mul(rng):
    a, b, c = _dims(rng, 3)
    return ad.mul, [rng.standard_normal((a, b, c)), rng.standard_normal((b, c))]


def case_add_broadcast_bias(rng):
    a, b, c = _dims(rng, 3)
    return ad.add_broadcast_bias, [rng.standard_normal((a, b, c)), rng.standard_normal(c)]


def case_conv2d_3x3_same(rng):
    n, h, w = _dims(rng, 3, 1, 5)
    ci, co = _dims(rng, 2, 1, 4)
    return ad.conv2d_3x3_same, [rng.standard_normal((n, h, w, ci)),
                                rng.standard_normal((co, ci, 3, 3)), rng.standard_normal(co)]


def case_relu(rng):
    return ad.relu, [_away_from_zero(rng, _dims(rng, 3))]


def case_gelu(rng):
    return ad.gelu, [2 * rng.standard_normal(_dims(rng, 3))]


def case_softmax_rows(rng):
    return ad.softmax_rows, [3 * rng.standard_normal(_dims(rng, 3, 1, 6))]


def case_layer_norm_lastdim(rng):
    a, b, d = _dims(rng, 3, 2, 6)
    return ad.layer_norm_lastdim, [rng.standard_normal((a, b, d)), 1 + 0.3 * rng.standard_normal(d),
                                   rng.standard_normal(d)]


def case_reshape(rng):
    a, b, c = _dims(rng, 3)
    return (lambda x: ad.reshape(x, (c, a * b))), [rng.standard_normal((a, b, c))]


def case_transpose(rng):
    perm = tuple(rng.permutation(3))
    return (lambda x: ad.transpose(x, perm)), [rng.standard_normal(_dims(rng, 3))]


def case_concat_lastdim(rng):
    a, b, c1, c2 = _dims(rng, 4)
    return (lambda x, y: ad.concat_lastdim([x, y])), [rng.standard_normal((a, b, c1)),
                                                       rng.standard_normal((a, b, c2))]


def case_split_heads(rng):
    b, s, m, dh = _dims(rng, 4)
    return (lambda x: ad.split_heads(x, m)), [rng.standard_normal((b, s, m * dh))]


def case_merge_heads(rng):
    return ad.merge_heads, [rng.standard_normal(_dims(rng, 4))]


def case_scale(rng):
    c = float(rng.standard_normal())
    return (lambda x: ad.scale(x, c)), [rng.standard_normal(_dims(rng, 2))]


def case_sum_all(rng):
    return ad.sum_all, [rng.standard_normal(_dims(rng, 3))]


def case_mean_all(rng):
    return ad.mean_all, [rng.standard_normal(_dims(rng, 3))]


CASES = {name[5:]: fn for name, fn in globals().items() if name.startswith("case_")}


def test_every_primitive_has_a_gradient_case():
    assert set(CASES) == set(ad.PRIMITIVES)


@pytest.mark.parametrize("kind", sorted(CASES))
def test_primitive_gradients_match_central_differences(kind):
    for seed in range(10):
        rng = np.random.default_rng([seed, 7])
        op, arrays = CASES[kind](rng)
        assert check_primitive(op, arrays, rng) < 1e-5, (kind, seed, [a.shape for a in arrays])


def test_matmul_matches_triple_loop():
    a = np.array([[1, 2, 3], [4, 5, 6]], float)
    b = np.array([[7, 8], [9, 10], [11, 12]], float)
    want = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(3):
                want[i, j] += a[i, k] * b[k, j]
    np.testing.assert_array_equal(ad.matmul(Tensor(a), Tensor(b)).data, want)
    np.testing.assert_array_equal(want, [[58, 64], [139, 154]])


def test_conv_identity_kernel_and_loop_oracle(rng):
    x = rng.standard_normal((2, 5, 4, 3))
    ident = np.zeros((3, 3, 3, 3))
    for c in range(3):
        ident[c, c, 1, 1] = 1.0
    out = ad.conv2d_3x3_same(Tensor(x), Tensor(ident), Tensor(np.zeros(3))).data
    np.testing.assert_array_equal(out, x)

    for ci, co in ((3, 5), (5, 2)):   # both layouts of the kernel
        x = rng.standard_normal((2, 4, 5, ci))
        w = rng.standard_normal((co, ci, 3, 3))
        b = rng.standard_normal(co)
        pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        want = np.zeros((2, 4, 5, co))
        for r in range(4):
            for s in range(5):
                for o in range(co):
                    want[:, r, s, o] = b[o] + np.sum(pad[:, r:r + 3, s:s + 3, :]
                                                     * w[o].transpose(1, 2, 0), axis=(1, 2, 3))
        got = ad.conv2d_3x3_same(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(got, want, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.floats(0.1, 50), st.integers(0, 2**32 - 1))
def test_softmax_rows_are_stochastic(rows, cols, spread, seed):
    x = spread * np.random.default_rng(seed).standard_normal((rows, cols))
    p = ad.softmax_rows(Tensor(x)).data
    assert np.all(np.abs(p.sum(axis=-1) - 1) <= 1e-12)
    assert np.all((p >= 0) & (p <= 1))


def test_softmax_entries_strictly_inside_unit_interval(rng):
    p = ad.softmax_rows(Tensor(rng.standard_normal((4, 6)))).data
    assert np.all((p > 0) & (p < 1))


def test_gelu_uses_exact_gaussian_cdf():
    xs = np.linspace(-4, 4, 17)
    want = [x * 0.5 * (1 + math.erf(x / math.sqrt(2))) for x in xs]
    np.testing.assert_allclose(ad.gelu(Tensor(xs)).data, want, rtol=1e-14, atol=1e-15)


def test_layer_norm_forward():
    x = np.array([[1.0, 2.0, 3.0, 6.0]])
    mu, var = x.mean(), x.var()
    want = (x - mu) / math.sqrt(var + 1e-5) * 2.0 + 0.5
    out = ad.layer_norm_lastdim(Tensor(x), Tensor(np.full(4, 2.0)), Tensor(np.full(4, 0.5))).data
    np.testing.assert_allclose(out, want, rtol=1e-14)


def test_split_merge_heads_roundtrip(rng):
    x = rng.standard_normal((2, 5, 12))
    h = ad.split_heads(Tensor(x), 3)
    assert h.shape == (2, 3, 5, 4)
    np.testing.assert_array_equal(h.data[:, 1], x[..., 4:8])
    np.testing.assert_array_equal(ad.merge_heads(h).data, x)


def test_sum_gradient_is_all_ones(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_all(x)
    np.testing.assert_array_equal(ad.backward(tape, loss)[x], np.ones((3, 4)))


def test_linear_least_squares_gradient_closed_form(rng):
    w = rng.standard_normal((3, 4))
    x = rng.standard_normal((4, 5))
    y = rng.standard_normal((3, 5))
    wt = Tensor(w, requires_grad=True)
    with ad.Tape() as tape:
        r = ad.sub(ad.matmul(wt, Tensor(x)), Tensor(y))
        loss = ad.mean_all(ad.mul(r, r))
    g = ad.backward(tape, loss)[wt]
    np.testing.assert_allclose(g, 2 * (w @ x - y) @ x.T / y.size, rtol=1e-12)


def test_fan_out_accumulates(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.add(ad.mul(x, x), ad.scale(x, 3.0)))
    np.testing.assert_allclose(ad.backward(tape, loss)[x], 2 * x.data + 3, rtol=1e-14)


def test_backward_rejects_non_scalar_loss(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.scale(x, 2.0)
    with pytest.raises(ad.ShapeError):
        ad.backward(tape, y)


def test_shape_errors_name_the_op():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ad.ShapeError, match="conv2d_3x3_same"):
        ad.conv2d_3x3_same(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((1, 3, 3, 3))),
                           Tensor(np.zeros(1)))
    with pytest.raises(ad.ShapeError, match="split_heads"):
        ad.split_heads(Tensor(np.zeros((2, 5))), 3)
    with pytest.raises(ValueError):
        ad.apply_primitive("einsum", Tensor(np.zeros(2)))


def test_apply_primitive_dispatches():
    out = ad.apply_primitive("scale", Tensor(np.ones(3)), c=2.0)
    np.testing.assert_array_equal(out.data, [2.0, 2.0, 2.0])


def test_non_finite_outputs_are_flagged():
    with pytest.raises(ad.NonFiniteError), np.errstate(over="ignore"):
        ad.mul(Tensor(np.array([1e200])), Tensor(np.array([1e200])))


def test_constants_are_not_recorded(rng):
    with ad.Tape() as tape:
        ad.relu(Tensor(rng.standard_normal(3)))
    assert len(tape) == 0


def test_tape_determinism(rng):
    x0, w0 = rng.standard_normal((4, 6)), rng.standard_normal((6, 3))

    def run():
        x, w = Tensor(x0.copy(), requires_grad=True), Tensor(w0.copy(), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.mean_all(ad.gelu(ad.matmul(x, w)))
        g = ad.backward(tape, loss)
        return loss.data.tobytes(), g[x].tobytes(), g[w].tobytes()

    assert run() == run()


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradient_leaves_params(rng):
    p = {"w": Tensor(rng.standard_normal(5), requires_grad=True)}
    before = p["w"].data.copy()
    ad.adam_step(p, {"w": np.zeros(5)}, ad.AdamState(lr=0.1))
    np.testing.assert_array_equal(p["w"].data, before)


def test_adam_first_step_closed_form():
    g = np.array([0.5, -2.0, 1e-3])
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    st_ = ad.AdamState(lr=0.01)
    ad.adam_step(p, {"w": g}, st_)
    np.testing.assert_allclose(p["w"].data, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert st_.step == 1


def test_adam_epoch_decay():
    st_ = ad.AdamState(lr=1e-3)
    for _ in range(3):
        st_.end_epoch()
    assert st_.lr == pytest.approx(1e-3 * 0.995 ** 3, rel=1e-15)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_adam_converges_on_quadratic_bowl(seed, d):
    w = Tensor(np.random.default_rng(seed).uniform(-1, 1, d), requires_grad=True)
    state = ad.AdamState(lr=0.05, decay=1.0)
    for _ in range(500):
        ad.adam_step({"w": w}, {"w": 2 * w.data}, state)
    assert np.linalg.norm(w.data) < 1e-3


def test_adam_rejects_non_finite_gradient():
    p = {"enc.W": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(ad.NonFiniteError, match="enc.W"):
        ad.adam_step(p, {"enc.W": np.array([1.0, np.nan])}, ad.AdamState())
