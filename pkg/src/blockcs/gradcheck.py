"""Finite-difference verification of every backward pass, in float64.

Each check draws small random problems, differentiates the scalar
``sum(cotangent * forward(...))`` with central differences and reports the
worst norm-wise relative error against the analytic gradient.  Kernels are
looked up on ``blockcs.kernels`` at call time, so a patched kernel is what
gets checked.
"""
from dataclasses import dataclass

import numpy as np

from blockcs import kernels as K
from blockcs.kernels import ConvSpec, finite_difference_grad, relative_error
from blockcs.model import CSModel, ModelConfig

FD_STEP = 1e-5
KINK_MARGIN = 1e-3
TINY_MODEL = ModelConfig(block_size=4, measurement_rate=2 / 16, lift_channels=4, residual_blocks=1)


@dataclass
class CheckResult:
    op: str
    worst_error: float
    cases: int

    def passed(self, tolerance):
        return self.worst_error < tolerance


def _random_conv_case(rng, transpose=False):
    while True:
        cin, cout = rng.integers(1, 3, size=2)
        kh, kw = rng.integers(1, 4, size=2)
        sh, sw = rng.integers(1, 3, size=2)
        ph, pw = (0, 0) if transpose else rng.integers(0, 2, size=2)
        spec = ConvSpec(int(cin), int(cout), int(kh), int(kw), int(sh), int(sw), int(ph), int(pw),
                        has_bias=bool(rng.integers(0, 2)))
        n = int(rng.integers(1, 3))
        h, w = (int(v) for v in rng.integers(2, 6 if not transpose else 4, size=2))
        try:
            if transpose:
                out_shape = (n, spec.out_channels, *spec.transpose_output_shape(h, w))
            else:
                out_shape = (n, spec.out_channels, *spec.output_shape(h, w))
        except K.ShapeError:
            continue
        return spec, (n, spec.in_channels, h, w), out_shape


def _check_layer(forward, backward, x, weights, bias, spec, cotangent):
    gx, gw, gb = backward(x, weights, spec, cotangent)
    errors = [
        relative_error(gx, finite_difference_grad(lambda v: np.sum(cotangent * forward(v, weights, bias, spec)), x, FD_STEP)),
        relative_error(gw, finite_difference_grad(lambda v: np.sum(cotangent * forward(x, v, bias, spec)), weights, FD_STEP)),
    ]
    if bias is not None:
        errors.append(relative_error(gb, finite_difference_grad(
            lambda v: np.sum(cotangent * forward(x, weights, v, spec)), bias, FD_STEP)))
    return max(errors)


def check_conv2d(rng, cases):
    worst = 0.0
    for _ in range(cases):
        spec, in_shape, out_shape = _random_conv_case(rng)
        x = rng.standard_normal(in_shape)
        w = rng.standard_normal((spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w))
        b = rng.standard_normal(spec.out_channels) if spec.has_bias else None
        cot = rng.standard_normal(out_shape)
        worst = max(worst, _check_layer(
            lambda *a: K.conv2d_forward(*a), lambda *a: K.conv2d_backward(*a), x, w, b, spec, cot))
    return worst


def check_convtranspose2d(rng, cases):
    worst = 0.0
    for _ in range(cases):
        spec, in_shape, out_shape = _random_conv_case(rng, transpose=True)
        x = rng.standard_normal(in_shape)
        w = rng.standard_normal((spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w))
        b = rng.standard_normal(spec.out_channels) if spec.has_bias else None
        cot = rng.standard_normal(out_shape)
        worst = max(worst, _check_layer(
            lambda *a: K.convtranspose2d_forward(*a), lambda *a: K.convtranspose2d_backward(*a),
            x, w, b, spec, cot))
    return worst


def kink_free_values(rng, shape, margin=KINK_MARGIN):
    """Random mixed-sign values with magnitude at least ``margin``."""
    magnitude = rng.uniform(margin, 2.0, size=shape)
    return np.where(rng.integers(0, 2, size=shape) == 1, magnitude, -magnitude)


def check_prelu(rng, cases):
    worst = 0.0
    for _ in range(cases):
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), *(int(v) for v in rng.integers(1, 5, size=2)))
        x = kink_free_values(rng, shape)
        slope = rng.uniform(-0.5, 1.0, size=shape[1])
        cot = rng.standard_normal(shape)
        gx, gs = K.prelu_backward(x, slope, cot)
        worst = max(
            worst,
            relative_error(gx, finite_difference_grad(lambda v: np.sum(cot * K.prelu_forward(v, slope)), x, FD_STEP)),
            relative_error(gs, finite_difference_grad(lambda v: np.sum(cot * K.prelu_forward(x, v)), slope, FD_STEP)),
        )
    return worst


def check_mse(rng, cases):
    worst = 0.0
    for _ in range(cases):
        shape = (int(rng.integers(1, 4)), 1, *(int(v) for v in rng.integers(1, 5, size=2)))
        pred, target = rng.standard_normal(shape), rng.standard_normal(shape)
        _, grad = K.mse_loss(pred, target)
        fd = finite_difference_grad(lambda v: K.mse_loss(v, target)[0], pred, FD_STEP)
        worst = max(worst, relative_error(grad, fd))
    return worst


def _preactivation_margin(model, images):
    if model.method != "full":
        return np.inf
    _, cache = model.reconstruction.forward(model.measure(images))
    _, _, a, _, us, _ = cache
    return min(float(np.min(np.abs(t))) for t in [a, *us])


def tiny_problem(rng, method, config=TINY_MODEL, image_size=8, batch=1):
    """A float64 tiny model and input whose PReLU pre-activations all sit at
    least ``KINK_MARGIN`` away from zero (redrawn until they do)."""
    while True:
        model = CSModel.create(config, method, seed=int(rng.integers(0, 2**31)), dtype=np.float64)
        for name, p in model.parameters().items():
            if name.endswith(".bias"):
                p[...] = rng.uniform(-0.1, 0.1, size=p.shape)
        images = rng.uniform(-1.0, 1.0, size=(batch, 1, image_size, image_size))
        if _preactivation_margin(model, images) >= KINK_MARGIN:
            return model, images


def model_gradient_error(model, images):
    _, grads = model.loss_and_grads(images)
    worst = 0.0
    for name, p in model.parameters().items():
        def loss_at(v, p=p):
            saved = p.copy()
            p[...] = v
            try:
                return model.loss_and_grads(images)[0]
            finally:
                p[...] = saved
        worst = max(worst, relative_error(grads[name], finite_difference_grad(loss_at, p.copy(), FD_STEP)))
    return worst


def check_model(rng, cases, method):
    worst = 0.0
    for _ in range(cases):
        model, images = tiny_problem(rng, method)
        worst = max(worst, model_gradient_error(model, images))
    return worst


CHECKS = {
    "conv2d": check_conv2d,
    "convtranspose2d": check_convtranspose2d,
    "prelu": check_prelu,
    "mse_loss": check_mse,
    "model_full": lambda rng, cases: check_model(rng, cases, "full"),
    "model_baseline": lambda rng, cases: check_model(rng, cases, "baseline"),
}


def run_gradcheck(cases=5, seed=0, ops=None):
    results = []
    for op in ops or CHECKS:
        rng = np.random.default_rng([seed, list(CHECKS).index(op)])
        results.append(CheckResult(op, float(CHECKS[op](rng, cases)), cases))
    return results
