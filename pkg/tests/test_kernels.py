import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockcs import _backend
from blockcs.kernels import (
    AdamState, ConvSpec, ShapeError, adam_step, conv2d_backward, conv2d_forward, conv2d_naive,
    convtranspose2d_backward, convtranspose2d_forward, convtranspose2d_naive, finite_difference_grad,
    mse_loss, prelu_backward, prelu_forward, relative_error,
)


# ---- ConvSpec ---------------------------------------------------------------

@settings(max_examples=1000, deadline=None)
@given(
    h=st.integers(1, 40), w=st.integers(1, 40), kh=st.integers(1, 9), kw=st.integers(1, 9),
    sh=st.integers(1, 5), sw=st.integers(1, 5), ph=st.integers(0, 4), pw=st.integers(0, 4),
)
def test_output_shape_law(h, w, kh, kw, sh, sw, ph, pw):
    spec = ConvSpec(1, 1, kh, kw, sh, sw, ph, pw, has_bias=False)
    exp_h = (h + 2 * ph - kh) // sh + 1
    exp_w = (w + 2 * pw - kw) // sw + 1
    if exp_h < 1 or exp_w < 1:
        with pytest.raises(ShapeError):
            spec.output_shape(h, w)
    else:
        assert spec.output_shape(h, w) == (exp_h, exp_w)
        x = np.zeros((1, 1, h, w))
        assert conv2d_forward(x, np.zeros((1, 1, kh, kw)), None, spec).shape == (1, 1, exp_h, exp_w)


@pytest.mark.parametrize("field,value", [("in_channels", 0), ("kernel_h", 0), ("stride_w", 0), ("pad_h", -1)])
def test_convspec_rejects_bad_fields(field, value):
    kwargs = dict(in_channels=1, out_channels=1, kernel_h=3, kernel_w=3)
    kwargs[field] = value
    with pytest.raises(ShapeError, match=field):
        ConvSpec(**kwargs)


# ---- conv2d forward -----------------------------------------------------------

def test_conv_sum_of_ones():
    spec = ConvSpec(1, 1, 2, 2, 2, 2, 0, 0, has_bias=False)
    out = conv2d_forward(np.ones((1, 1, 4, 4)), np.ones((1, 1, 2, 2)), None, spec)
    assert out.shape == (1, 1, 2, 2)
    assert np.all(out == 4.0)


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((1, 1, 5, 7))
    out = conv2d_forward(x, np.ones((1, 1, 1, 1)), None, ConvSpec(1, 1, 1, 1, has_bias=False))
    np.testing.assert_array_equal(out, x)


def test_conv_matches_naive_reference(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    spec = ConvSpec(3, 4, 3, 3, 1, 1, 1, 1)
    assert relative_error(conv2d_forward(x, w, b, spec), conv2d_naive(x, w, b, spec)) < 1e-5


def test_conv_float32_stays_float32(rng):
    x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    spec = ConvSpec(2, 3, 3, 3, 1, 1, 1, 1, has_bias=False)
    out = conv2d_forward(x, w, None, spec)
    assert out.dtype == np.float32
    assert relative_error(out, conv2d_naive(x.astype(np.float64), w.astype(np.float64), None, spec)) < 1e-5


def test_conv_shape_errors_name_dimension(rng):
    spec = ConvSpec(3, 4, 3, 3)
    with pytest.raises(ShapeError, match="input channels"):
        conv2d_forward(np.zeros((1, 2, 5, 5)), np.zeros((4, 3, 3, 3)), np.zeros(4), spec)
    with pytest.raises(ShapeError, match="weights"):
        conv2d_forward(np.zeros((1, 3, 5, 5)), np.zeros((4, 3, 2, 3)), np.zeros(4), spec)
    with pytest.raises(ShapeError, match="bias"):
        conv2d_forward(np.zeros((1, 3, 5, 5)), np.zeros((4, 3, 3, 3)), np.zeros(3), spec)
    with pytest.raises(ShapeError, match="height"):
        conv2d_forward(np.zeros((1, 3, 2, 5)), np.zeros((4, 3, 3, 3)), np.zeros(4), spec)
    with pytest.raises(ShapeError, match="rank 4"):
        conv2d_forward(np.zeros((3, 5, 5)), np.zeros((4, 3, 3, 3)), np.zeros(4), spec)


def random_spec(r, transpose=False):
    while True:
        spec = ConvSpec(
            int(r.integers(1, 4)), int(r.integers(1, 4)), int(r.integers(1, 5)), int(r.integers(1, 5)),
            int(r.integers(1, 4)), int(r.integers(1, 4)),
            0 if transpose else int(r.integers(0, 3)), 0 if transpose else int(r.integers(0, 3)),
            has_bias=bool(r.integers(0, 2)),
        )
        n, h, w = int(r.integers(1, 3)), int(r.integers(1, 9)), int(r.integers(1, 9))
        try:
            out = spec.transpose_output_shape(h, w) if transpose else spec.output_shape(h, w)
        except ShapeError:
            continue
        if max(out) <= 8 or not transpose:
            return spec, (n, spec.in_channels, h, w)


def test_linearity(rng):
    for _ in range(50):
        spec, shape = random_spec(rng)
        spec = ConvSpec(spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w,
                        spec.stride_h, spec.stride_w, spec.pad_h, spec.pad_w, has_bias=False)
        w = rng.standard_normal((spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w))
        x, z = rng.standard_normal(shape), rng.standard_normal(shape)
        a, b = rng.standard_normal(2)
        lhs = conv2d_forward(a * x + b * z, w, None, spec)
        rhs = a * conv2d_forward(x, w, None, spec) + b * conv2d_forward(z, w, None, spec)
        assert relative_error(lhs, rhs) < 1e-5


# ---- transposed convolution ----------------------------------------------------

def test_convtranspose_non_overlapping_tiles():
    spec = ConvSpec(1, 1, 2, 2, 2, 2, 0, 0, has_bias=False)
    out = convtranspose2d_forward(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2)), None, spec)
    np.testing.assert_array_equal(out, np.ones((1, 1, 4, 4)))


def test_convtranspose_one_hot_places_kernel(rng):
    M, B = 5, 4
    w = rng.standard_normal((M, 1, B, B))
    spec = ConvSpec(M, 1, B, B, B, B, 0, 0, has_bias=False)
    for m in range(M):
        x = np.zeros((1, M, 1, 1))
        x[0, m] = 1.0
        np.testing.assert_array_equal(convtranspose2d_forward(x, w, None, spec)[0, 0], w[m, 0])


def test_convtranspose_adjoint_identity(rng):
    for _ in range(100):
        spec, shape = random_spec(rng)
        spec = ConvSpec(spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w,
                        spec.stride_h, spec.stride_w, spec.pad_h, spec.pad_w, has_bias=False)
        w = rng.standard_normal((spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w))
        N, C, H, W = shape
        out_h, out_w = spec.output_shape(H, W)
        # The transpose maps back onto exactly (H', W'); trim x so the shapes match.
        tspec = ConvSpec(spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w,
                         spec.stride_h, spec.stride_w, spec.pad_h, spec.pad_w, has_bias=False)
        try:
            Ht, Wt = tspec.transpose_output_shape(out_h, out_w)
        except ShapeError:
            continue
        if spec.output_shape(Ht, Wt) != (out_h, out_w):
            continue
        x = rng.standard_normal((N, C, Ht, Wt))
        y = rng.standard_normal((N, spec.out_channels, out_h, out_w))
        lhs = np.sum(conv2d_forward(x, w, None, spec) * y)
        rhs = np.sum(x * convtranspose2d_forward(y, w, None, tspec))
        assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), abs(rhs), 1e-12)


def test_convtranspose_grad_input_is_forward_conv(rng):
    spec = ConvSpec(3, 2, 4, 4, 4, 4, 0, 0, has_bias=True)
    x = rng.standard_normal((2, 3, 3, 2))
    w = rng.standard_normal((3, 2, 4, 4))
    g = rng.standard_normal((2, 2, 12, 8))
    gx, _, _ = convtranspose2d_backward(x, w, spec, g)
    cspec = ConvSpec(2, 3, 4, 4, 4, 4, 0, 0, has_bias=False)
    assert relative_error(gx, conv2d_forward(g, w, None, cspec)) < 1e-12


def test_convtranspose_shape_errors():
    spec = ConvSpec(2, 1, 2, 2, 2, 2, 0, 0, has_bias=False)
    with pytest.raises(ShapeError, match="input channels"):
        convtranspose2d_forward(np.zeros((1, 3, 2, 2)), np.zeros((2, 1, 2, 2)), None, spec)
    with pytest.raises(ShapeError, match="grad_output"):
        convtranspose2d_backward(np.zeros((1, 2, 2, 2)), np.zeros((2, 1, 2, 2)), spec, np.zeros((1, 1, 3, 4)))


# ---- oracle equivalence over random shapes ---------------------------------------

@pytest.mark.parametrize("seed", range(4))
def test_fast_paths_match_naive(seed):
    r = np.random.default_rng(seed)
    for _ in range(50):
        spec, shape = random_spec(r)
        w = r.standard_normal((spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w))
        b = r.standard_normal(spec.out_channels) if spec.has_bias else None
        x = r.standard_normal(shape)
        assert relative_error(conv2d_forward(x, w, b, spec), conv2d_naive(x, w, b, spec)) < 1e-5
        tspec, tshape = random_spec(r, transpose=True)
        tw = r.standard_normal((tspec.in_channels, tspec.out_channels, tspec.kernel_h, tspec.kernel_w))
        tb = r.standard_normal(tspec.out_channels) if tspec.has_bias else None
        tx = r.standard_normal(tshape)
        assert relative_error(
            convtranspose2d_forward(tx, tw, tb, tspec), convtranspose2d_naive(tx, tw, tb, tspec)
        ) < 1e-5


@pytest.mark.skipif("cython" not in _backend.available_backends(), reason="extension not built")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_bit_identical(dtype):
    r = np.random.default_rng(7)
    previous = _backend.active_backend()
    try:
        for _ in range(30):
            spec, shape = random_spec(r)
            w = r.standard_normal((spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)).astype(dtype)
            x = r.standard_normal(shape).astype(dtype)
            N, _, H, W = shape
            g = r.standard_normal((N, spec.out_channels, *spec.output_shape(H, W))).astype(dtype)
            results = {}
            for name in ("python", "cython"):
                _backend.set_backend(name)
                results[name] = (conv2d_forward(x, w, None, spec.__class__(**{**spec.__dict__, "has_bias": False})),
                                 *conv2d_backward(x, w, spec, g)[:2])
            for a, b in zip(results["python"], results["cython"]):
                assert a.dtype == dtype
                np.testing.assert_array_equal(a, b)
    finally:
        _backend.set_backend(previous)


def test_set_backend_rejects_unknown():
    with pytest.raises(ValueError):
        _backend.set_backend("fortran")


def test_deterministic_repeat(rng):
    x = rng.standard_normal((2, 4, 16, 16)).astype(np.float32)
    w = rng.standard_normal((4, 4, 3, 3)).astype(np.float32)
    spec = ConvSpec(4, 4, 3, 3, 1, 1, 1, 1, has_bias=False)
    g = rng.standard_normal((2, 4, 16, 16)).astype(np.float32)
    first = conv2d_backward(x, w, spec, g)
    second = conv2d_backward(x, w, spec, g)
    for a, b in zip(first[:2], second[:2]):
        assert a.tobytes() == b.tobytes()


# ---- conv backward examples -----------------------------------------------------

def test_conv_backward_zero_cotangent(rng):
    spec = ConvSpec(2, 3, 3, 3, 2, 2, 1, 1)
    x = rng.standard_normal((2, 2, 7, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    gx, gw, gb = conv2d_backward(x, w, spec, np.zeros((2, 3, 4, 4)))
    assert not gx.any() and not gw.any() and not gb.any()
    assert gx.shape == x.shape and gw.shape == w.shape and gb.shape == (3,)


def test_conv_backward_scalar_weight(rng):
    spec = ConvSpec(1, 1, 1, 1, has_bias=False)
    x = rng.standard_normal((1, 1, 3, 3))
    g = rng.standard_normal((1, 1, 3, 3))
    _, gw, gb = conv2d_backward(x, np.array([[[[0.7]]]]), spec, g)
    assert gb is None
    assert gw[0, 0, 0, 0] == pytest.approx(np.sum(x * g), rel=1e-14)


def test_conv_backward_rejects_bad_cotangent():
    spec = ConvSpec(1, 1, 3, 3)
    with pytest.raises(ShapeError, match="grad_output"):
        conv2d_backward(np.zeros((1, 1, 5, 5)), np.zeros((1, 1, 3, 3)), spec, np.zeros((1, 1, 5, 5)))


# ---- PReLU --------------------------------------------------------------------

def test_prelu_examples():
    x = np.array([[[[1.0, 2.0], [0.5, 3.0]]]])
    np.testing.assert_array_equal(prelu_forward(x, np.array([0.25])), x)
    assert prelu_forward(np.array([[[[-2.0]]]]), np.array([0.25]))[0, 0, 0, 0] == -0.5
    mixed = np.array([[[[-1.0, 2.0, -3.0, 0.0]]]])
    np.testing.assert_array_equal(prelu_forward(mixed, np.array([0.0])), np.maximum(mixed, 0))


def test_prelu_backward_examples(rng):
    x = np.abs(rng.standard_normal((2, 3, 4, 4))) + 0.1
    g = rng.standard_normal(x.shape)
    gx, gs = prelu_backward(x, np.full(3, 0.25), g)
    np.testing.assert_array_equal(gx, g)
    np.testing.assert_array_equal(gs, np.zeros(3))
    gx, gs = prelu_backward(-x, np.full(3, 0.25), np.zeros_like(g))
    assert not gx.any() and not gs.any()


def test_prelu_kink_uses_identity_branch():
    x = np.zeros((1, 1, 1, 2))
    g = np.array([[[[3.0, -2.0]]]])
    gx, gs = prelu_backward(x, np.array([0.25]), g)
    np.testing.assert_array_equal(gx, g)
    assert gs[0] == 0.0


def test_prelu_rejects_slope_length():
    with pytest.raises(ShapeError, match="slope"):
        prelu_forward(np.zeros((1, 3, 2, 2)), np.zeros(2))


# ---- MSE ----------------------------------------------------------------------

def test_mse_examples():
    x = np.arange(8.0).reshape(2, 1, 2, 2)
    loss, grad = mse_loss(x, x)
    assert loss == 0.0 and not grad.any()
    loss, grad = mse_loss(np.array([[[[3.0]]]]), np.array([[[[1.0]]]]))
    assert loss == 4.0 and grad[0, 0, 0, 0] == 4.0


def test_mse_is_batch_mean_of_sums():
    pred = np.ones((4, 1, 3, 3))
    loss, _ = mse_loss(pred, np.zeros_like(pred))
    assert loss == 9.0


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        mse_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


# ---- Adam ---------------------------------------------------------------------

def test_adam_zero_grad_keeps_params():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    state = AdamState.zeros_like(params)
    adam_step(params, {"w": np.zeros(3)}, state, 1e-4)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0, 3.0])
    assert state.t == 1


def test_adam_first_step():
    params = {"w": np.array([0.0])}
    state = AdamState.zeros_like(params)
    adam_step(params, {"w": np.array([1.0])}, state, 1e-4)
    # m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps).
    assert params["w"][0] == pytest.approx(-1e-4 / (1.0 + 1e-8), rel=1e-12)


def _scalar_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    return p


def test_adam_matches_scalar_reference():
    params = {"w": np.array([0.5])}
    state = AdamState.zeros_like(params)
    lr = 1e-3
    adam_step(params, {"w": np.array([0.3])}, state, lr)
    after_one = params["w"][0]
    adam_step(params, {"w": np.array([0.3])}, state, lr)
    second_step = params["w"][0] - after_one
    expected = _scalar_adam(0.5, [0.3, 0.3], lr) - _scalar_adam(0.5, [0.3], lr)
    assert abs(second_step - expected) < 1e-12
    assert state.t == 2


def test_adam_shape_mismatch():
    params = {"w": np.zeros(3)}
    state = AdamState.zeros_like(params)
    with pytest.raises(ShapeError):
        adam_step(params, {"w": np.zeros(4)}, state, 1e-3)
    with pytest.raises(ShapeError):
        adam_step(params, {"v": np.zeros(3)}, state, 1e-3)


# ---- finite differences ------------------------------------------------------------

def test_fd_quadratic():
    g = finite_difference_grad(lambda v: np.sum(v ** 2), np.array([1.0, 2.0]))
    np.testing.assert_allclose(g, [2.0, 4.0], rtol=1e-8)


def test_fd_constant():
    h = 1e-5
    g = finite_difference_grad(lambda v: 3.0, np.array([1.0, 2.0, 3.0]), h)
    assert np.all(np.abs(g) <= 10 * h)
