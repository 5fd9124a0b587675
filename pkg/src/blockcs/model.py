"""Block measurement operator and the two reconstruction models.

``ReconstructionNet`` recovers the whole image from all of its block
measurements at once: a stride-B transposed convolution gives the initial
estimate, then a 3x3 channel lift, residual blocks and a 3x3 output head
refine it, so neighbouring blocks influence each other.  ``BaselineBlockNet``
maps each block's measurement vector to its pixels independently, which is
the block-by-block scheme whose seams the full model is meant to remove.
"""
import math
from dataclasses import dataclass

import numpy as np

from blockcs import kernels as K
from blockcs.kernels import ConvSpec, ShapeError
from blockcs.rng import Xoshiro256

METHODS = ("full", "baseline")


class DivisibilityError(ShapeError):
    """Image extents are not multiples of the block size."""


def measurement_count(block_size, rate):
    """``max(1, round(rate * B**2))`` with halves rounded up."""
    return max(1, math.floor(rate * block_size * block_size + 0.5))


@dataclass(frozen=True)
class ModelConfig:
    block_size: int = 16
    measurement_rate: float = 0.25
    lift_channels: int = 32
    residual_blocks: int = 5

    def __post_init__(self):
        if int(self.block_size) != self.block_size or self.block_size < 2:
            raise ValueError(f"block_size must be an integer >= 2, got {self.block_size!r}")
        if not 0.0 < self.measurement_rate <= 1.0:
            raise ValueError(f"measurement_rate must be in (0, 1], got {self.measurement_rate!r}")
        if int(self.lift_channels) != self.lift_channels or self.lift_channels < 1:
            raise ValueError(f"lift_channels must be an integer >= 1, got {self.lift_channels!r}")
        if int(self.residual_blocks) != self.residual_blocks or self.residual_blocks < 1:
            raise ValueError(f"residual_blocks must be an integer >= 1, got {self.residual_blocks!r}")

    @property
    def measurement_count(self):
        return measurement_count(self.block_size, self.measurement_rate)


def _he_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(2.0 / fan_in) * math.sqrt(3.0)
    return rng.uniform(shape, -bound, bound, dtype)


def _block_grid(shape, block_size):
    if len(shape) != 4 or shape[1] != 1:
        raise ShapeError(f"image must be N x 1 x H x W, got shape {shape}")
    _, _, H, W = shape
    if H % block_size or W % block_size:
        raise DivisibilityError(
            f"image extents {H}x{W} are not divisible by block size {block_size}"
        )
    return H // block_size, W // block_size


class MeasurementOp:
    """M learned B x B kernels applied at stride B (no overlap, no bias)."""

    def __init__(self, weights):
        if weights.ndim != 4 or weights.shape[1] != 1 or weights.shape[2] != weights.shape[3]:
            raise ShapeError(f"measurement weights must be M x 1 x B x B, got {weights.shape}")
        self.weights = weights

    @property
    def block_size(self):
        return self.weights.shape[2]

    @property
    def measurement_count(self):
        return self.weights.shape[0]

    @property
    def spec(self):
        B = self.block_size
        return ConvSpec(1, self.measurement_count, B, B, B, B, 0, 0, has_bias=False)

    def parameters(self):
        return {"measure.weight": self.weights}

    def measure(self, image):
        _block_grid(image.shape, self.block_size)
        return K.conv2d_forward(image, self.weights, None, self.spec)

    def backward(self, image, grad_measurements):
        """Gradient of the measurement weights; the image is not a parameter."""
        _, grad_w, _ = K.conv2d_backward(image, self.weights, self.spec, grad_measurements)
        return {"measure.weight": grad_w}

    def matrix(self):
        """The M x B^2 measurement matrix, one flattened kernel per row."""
        return self.weights.reshape(self.measurement_count, -1).copy()


class ReconstructionNet:
    def __init__(self, params, block_size, residual_blocks):
        self.params = params
        self.block_size = block_size
        self.residual_blocks = residual_blocks
        M = params["initial.weight"].shape[0]
        c = params["lift.weight"].shape[0]
        B = block_size
        self.measurement_count = M
        self.lift_channels = c
        self.initial_spec = ConvSpec(M, 1, B, B, B, B, 0, 0, has_bias=False)
        self.lift_spec = ConvSpec(1, c, 3, 3, 1, 1, 1, 1)
        self.block_spec = ConvSpec(c, c, 3, 3, 1, 1, 1, 1)
        self.head_spec = ConvSpec(c, 1, 3, 3, 1, 1, 1, 1)

    @staticmethod
    def parameter_shapes(config):
        B, M, c = config.block_size, config.measurement_count, config.lift_channels
        shapes = {
            "initial.weight": (M, 1, B, B),
            "lift.weight": (c, 1, 3, 3),
            "lift.bias": (c,),
            "lift.slope": (c,),
        }
        for k in range(config.residual_blocks):
            shapes[f"block{k}.conv1.weight"] = (c, c, 3, 3)
            shapes[f"block{k}.conv1.bias"] = (c,)
            shapes[f"block{k}.slope"] = (c,)
            shapes[f"block{k}.conv2.weight"] = (c, c, 3, 3)
            shapes[f"block{k}.conv2.bias"] = (c,)
        shapes["head.weight"] = (1, c, 3, 3)
        shapes["head.bias"] = (1,)
        return shapes

    def parameters(self):
        return self.params

    def forward(self, measurements):
        """Returns ``(image, cache)``; the cache feeds ``backward``."""
        p = self.params
        if measurements.ndim != 4 or measurements.shape[1] != self.measurement_count:
            raise ShapeError(
                f"measurements must be N x {self.measurement_count} x h x w, got {measurements.shape}"
            )
        z0 = K.convtranspose2d_forward(measurements, p["initial.weight"], None, self.initial_spec)
        a = K.conv2d_forward(z0, p["lift.weight"], p["lift.bias"], self.lift_spec)
        h = K.prelu_forward(a, p["lift.slope"])
        hs, us, vs = [h], [], []
        for k in range(self.residual_blocks):
            u = K.conv2d_forward(h, p[f"block{k}.conv1.weight"], p[f"block{k}.conv1.bias"], self.block_spec)
            v = K.prelu_forward(u, p[f"block{k}.slope"])
            r = K.conv2d_forward(v, p[f"block{k}.conv2.weight"], p[f"block{k}.conv2.bias"], self.block_spec)
            h = h + r
            us.append(u)
            vs.append(v)
            hs.append(h)
        out = K.conv2d_forward(h, p["head.weight"], p["head.bias"], self.head_spec)
        return out, (measurements, z0, a, hs, us, vs)

    def backward(self, cache, grad_output):
        """Returns ``(grad_measurements, grads)`` for a forward cache."""
        p = self.params
        measurements, z0, a, hs, us, vs = cache
        grads = {}
        g, grads["head.weight"], grads["head.bias"] = K.conv2d_backward(
            hs[-1], p["head.weight"], self.head_spec, grad_output
        )
        for k in reversed(range(self.residual_blocks)):
            gv, grads[f"block{k}.conv2.weight"], grads[f"block{k}.conv2.bias"] = K.conv2d_backward(
                vs[k], p[f"block{k}.conv2.weight"], self.block_spec, g
            )
            gu, grads[f"block{k}.slope"] = K.prelu_backward(us[k], p[f"block{k}.slope"], gv)
            gh, grads[f"block{k}.conv1.weight"], grads[f"block{k}.conv1.bias"] = K.conv2d_backward(
                hs[k], p[f"block{k}.conv1.weight"], self.block_spec, gu
            )
            g = g + gh
        ga, grads["lift.slope"] = K.prelu_backward(a, p["lift.slope"], g)
        gz0, grads["lift.weight"], grads["lift.bias"] = K.conv2d_backward(
            z0, p["lift.weight"], self.lift_spec, ga
        )
        gm, grads["initial.weight"], _ = K.convtranspose2d_backward(
            measurements, p["initial.weight"], self.initial_spec, gz0
        )
        return gm, grads


class BaselineBlockNet:
    """Per-block affine map ``x_block = W y_block + b`` tiled back into an image."""

    def __init__(self, params, block_size):
        self.params = params
        self.block_size = block_size
        weight = params["baseline.weight"]
        if weight.shape[0] != block_size * block_size:
            raise ShapeError(f"baseline weight must have {block_size**2} rows, got {weight.shape}")
        self.measurement_count = weight.shape[1]

    @staticmethod
    def parameter_shapes(config):
        B2 = config.block_size ** 2
        return {"baseline.weight": (B2, config.measurement_count), "baseline.bias": (B2,)}

    def parameters(self):
        return self.params

    def forward(self, measurements):
        if measurements.ndim != 4 or measurements.shape[1] != self.measurement_count:
            raise ShapeError(
                f"measurements must be N x {self.measurement_count} x h x w, got {measurements.shape}"
            )
        N, M, h, w = measurements.shape
        B = self.block_size
        y = measurements.reshape(N, M, h * w)
        z = np.matmul(self.params["baseline.weight"], y) + self.params["baseline.bias"][None, :, None]
        out = z.reshape(N, B, B, h, w).transpose(0, 3, 1, 4, 2).reshape(N, 1, h * B, w * B)
        return out, measurements

    def backward(self, measurements, grad_output):
        N, M, h, w = measurements.shape
        B = self.block_size
        g = grad_output.reshape(N, h, B, w, B).transpose(0, 2, 4, 1, 3).reshape(N, B * B, h * w)
        y = measurements.reshape(N, M, h * w)
        grads = {
            "baseline.weight": K._batched_outer(g, y),
            "baseline.bias": g.sum(axis=(0, 2)),
        }
        gm = np.matmul(self.params["baseline.weight"].T, g).reshape(measurements.shape)
        return gm, grads


def parameter_shapes(config, method):
    B, M = config.block_size, config.measurement_count
    shapes = {"measure.weight": (M, 1, B, B)}
    if method == "full":
        shapes.update(ReconstructionNet.parameter_shapes(config))
    elif method == "baseline":
        shapes.update(BaselineBlockNet.parameter_shapes(config))
    else:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    return shapes


def _fan_in(name, shape, config):
    if name in ("initial.weight", "baseline.weight"):
        # Each output pixel of a non-overlapping B-stride scatter sums M terms.
        return config.measurement_count
    return int(np.prod(shape[1:]))


def _init_params(config, seed, method, dtype):
    rng = Xoshiro256(seed)
    params = {}
    for name, shape in parameter_shapes(config, method).items():
        if name.endswith(".weight"):
            params[name] = _he_uniform(rng, shape, _fan_in(name, shape, config), dtype)
        elif name.endswith(".slope"):
            params[name] = np.full(shape, 0.25, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def _split(params, config, method):
    measurement = MeasurementOp(params.pop("measure.weight"))
    if method == "full":
        net = ReconstructionNet(params, config.block_size, config.residual_blocks)
    else:
        net = BaselineBlockNet(params, config.block_size)
    return measurement, net


def init_model(config, seed, dtype=np.float32):
    """Fresh ``(MeasurementOp, ReconstructionNet)``, deterministic in ``seed``."""
    return _split(_init_params(config, seed, "full", dtype), config, "full")


def init_baseline(config, seed, dtype=np.float32):
    """Fresh ``(MeasurementOp, BaselineBlockNet)``, deterministic in ``seed``."""
    return _split(_init_params(config, seed, "baseline", dtype), config, "baseline")


def measure(op, image):
    return op.measure(image)


def reconstruct_full(net, measurements):
    return net.forward(measurements)[0]


def reconstruct_baseline(net, measurements):
    return net.forward(measurements)[0]


class CSModel:
    """Measurement operator plus reconstruction network, trained jointly."""

    def __init__(self, config, method, measurement, reconstruction):
        self.config = config
        self.method = method
        self.measurement = measurement
        self.reconstruction = reconstruction

    @classmethod
    def create(cls, config, method="full", seed=0, dtype=np.float32):
        if method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {method!r}")
        make = init_model if method == "full" else init_baseline
        return cls(config, method, *make(config, seed, dtype))

    @classmethod
    def from_parameters(cls, config, method, params):
        expected = parameter_shapes(config, method)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ShapeError(f"parameter names do not match config: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")
        ordered = {name: params[name] for name in expected}
        return cls(config, method, *_split(ordered, config, method))

    def parameters(self):
        params = dict(self.measurement.parameters())
        params.update(self.reconstruction.parameters())
        return params

    def astype(self, dtype):
        params = {k: v.astype(dtype) for k, v in self.parameters().items()}
        return CSModel.from_parameters(self.config, self.method, params)

    def measure(self, images):
        return self.measurement.measure(images)

    def reconstruct(self, measurements):
        return self.reconstruction.forward(measurements)[0]

    def __call__(self, images):
        return self.reconstruct(self.measure(images))

    def loss_and_grads(self, images, targets=None):
        """Batch MSE loss of ``model(images)`` against ``targets`` (default: the
        images themselves) and the gradient for every parameter."""
        if targets is None:
            targets = images
        y = self.measurement.measure(images)
        out, cache = self.reconstruction.forward(y)
        loss, g_out = K.mse_loss(out, targets)
        g_y, grads = self.reconstruction.backward(cache, g_out)
        grads.update(self.measurement.backward(images, g_y))
        return loss, {name: grads[name] for name in self.parameters()}


def model_backward(model, images):
    """Loss and parameter gradients of the full pipeline on ``images``."""
    return model.loss_and_grads(images)
