"""Layer vocabulary: 1-D (transposed) convolution along time, GRU,
weight/batch normalization, and parameter initialization.

Convolutions are fused tape operations (im2col + BLAS matmul with a
hand-written backward rule); the GRU is composed from core tensor ops so
backpropagation through time falls out of the tape. All layers accept
``(C, T)`` or batched ``(B, C, T)`` inputs and preserve the input rank.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    accumulate_grad,
    add,
    astensor,
    get_default_dtype,
    matmul,
    mul,
    record_op,
    reshape,
    sigmoid,
    slice_axis,
    stack,
    sub,
    tanh,
    transpose,
)

NORM_KINDS = ("weight_norm", "batch_norm", "none")


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) in the engine dtype."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


# ---------------------------------------------------------------------------
# Functional convolution ops


def _lift(x):
    x = astensor(x)
    if x.data.ndim == 2:
        return reshape(x, (1,) + x.data.shape), True
    if x.data.ndim == 3:
        return x, False
    raise ShapeError(f"expected (C, T) or (B, C, T) input, got shape {x.data.shape}")


def _windows(arr: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    # (B, C, T) -> contiguous (B, T_out, C, K) view copy.
    b, c, t = arr.shape
    t_out = (t - kernel) // stride + 1
    s0, s1, s2 = arr.strides
    view = np.lib.stride_tricks.as_strided(
        arr, shape=(b, t_out, c, kernel), strides=(s0, s2 * stride, s1, s2))
    return np.ascontiguousarray(view)


def conv1d(x, weight: Tensor, bias: Tensor, stride: int = 1, padding: tuple[int, int] = (0, 0)) -> Tensor:
    """Valid cross-correlation along time with optional zero padding.

    ``weight`` has shape (out_channels, in_channels, kernel); output time
    extent is floor((T + pad - K) / stride) + 1.
    """
    x, unbatch = _lift(x)
    xb = x.data
    c_out, c_in, kernel = weight.data.shape
    if xb.shape[1] != c_in:
        raise ShapeError(f"conv1d: input has {xb.shape[1]} channels, weight expects {c_in}")
    pl, pr = padding
    padded = np.pad(xb, ((0, 0), (0, 0), (pl, pr))) if (pl or pr) else xb
    if padded.shape[2] < kernel:
        raise ShapeError(f"conv1d: time extent {padded.shape[2]} shorter than kernel {kernel}")

    b, _, t_pad = padded.shape
    t_out = (t_pad - kernel) // stride + 1
    cols = _windows(padded, kernel, stride).reshape(b * t_out, c_in * kernel)
    w2 = weight.data.reshape(c_out, c_in * kernel)
    out2 = cols @ w2.T + bias.data
    out_data = out2.reshape(b, t_out, c_out).transpose(0, 2, 1)
    out = Tensor._wrap(np.ascontiguousarray(out_data))

    def backward_rule(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(b * t_out, c_out)
        accumulate_grad(weight, (g2.T @ cols).reshape(c_out, c_in, kernel))
        accumulate_grad(bias, g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(b, t_out, c_in, kernel)
            dpad = np.zeros_like(padded)
            for k in range(kernel):
                dpad[:, :, k:k + t_out * stride:stride] += dcols[:, :, :, k].transpose(0, 2, 1)
            accumulate_grad(x, dpad[:, :, pl:t_pad - pr] if (pl or pr) else dpad)

    out = record_op(out, (x, weight, bias), backward_rule)
    return reshape(out, out.data.shape[1:]) if unbatch else out


def conv_transpose1d(x, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Gradient-of-convolution semantics: output time = (T - 1) * stride + K,
    with overlapping contributions summed."""
    x, unbatch = _lift(x)
    xb = x.data
    c_out, c_in, kernel = weight.data.shape
    if xb.shape[1] != c_in:
        raise ShapeError(f"conv_transpose1d: input has {xb.shape[1]} channels, weight expects {c_in}")
    b, _, t = xb.shape
    t_out = (t - 1) * stride + kernel

    x2 = np.ascontiguousarray(xb.transpose(0, 2, 1)).reshape(b * t, c_in)
    w2 = np.ascontiguousarray(weight.data.transpose(1, 0, 2)).reshape(c_in, c_out * kernel)
    prod = (x2 @ w2).reshape(b, t, c_out, kernel)
    out_data = np.zeros((b, c_out, t_out), dtype=xb.dtype)
    for k in range(kernel):
        out_data[:, :, k:k + t * stride:stride] += prod[:, :, :, k].transpose(0, 2, 1)
    out_data += bias.data[:, None]
    out = Tensor._wrap(out_data)

    def backward_rule(g):
        gw = _windows(g, kernel, stride)  # (B, T, C_out, K); window t covers t*stride + k
        gw2 = gw.reshape(b * t, c_out * kernel)
        wt = np.ascontiguousarray(weight.data.transpose(0, 2, 1)).reshape(c_out * kernel, c_in)
        if x.requires_grad:
            dx = (gw2 @ wt).reshape(b, t, c_in).transpose(0, 2, 1)
            accumulate_grad(x, np.ascontiguousarray(dx))
        dw = (gw2.T @ x2).reshape(c_out, kernel, c_in).transpose(0, 2, 1)
        accumulate_grad(weight, np.ascontiguousarray(dw))
        accumulate_grad(bias, g.sum(axis=(0, 2)))

    out = record_op(out, (x, weight, bias), backward_rule)
    return reshape(out, out.data.shape[1:]) if unbatch else out


def weight_normalized(v: Tensor, g: Tensor) -> Tensor:
    """Effective weight g * v / ||v||, norm taken per output channel."""
    flat = v.data.reshape(v.data.shape[0], -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    if np.any(norms == 0.0):
        raise ShapeError("weight_normalized: zero-norm direction tensor")
    scale = (g.data / norms).reshape((-1,) + (1,) * (v.data.ndim - 1))
    out = Tensor._wrap(v.data * scale)

    def backward_rule(grad):
        grad_flat = grad.reshape(grad.shape[0], -1)
        dots = (grad_flat * flat).sum(axis=1)
        accumulate_grad(g, dots / norms)
        if v.requires_grad:
            coef = (g.data * dots / norms**3).reshape(scale.shape)
            accumulate_grad(v, scale * grad - coef * v.data)

    return record_op(out, (v, g), backward_rule)


# ---------------------------------------------------------------------------
# Batch normalization


class BatchNorm1d:
    """Per-channel normalization over (batch, time) with running statistics.

    Train mode normalizes with batch moments and updates the running
    estimates; eval mode normalizes with the running estimates and fails
    if none were ever recorded. Population (biased) variance throughout.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        dt = get_default_dtype()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dt), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dt), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)
        self.batches_tracked = 0

    def __call__(self, x, training: bool) -> Tensor:
        x = astensor(x)
        if x.data.ndim != 3 or x.data.shape[1] != self.channels:
            raise ShapeError(f"batch norm expects (B, {self.channels}, T), got {x.data.shape}")
        if training:
            mean = x.data.mean(axis=(0, 2))
            var = x.data.var(axis=(0, 2))
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean
            self.running_var = (1 - m) * self.running_var + m * var
            self.batches_tracked += 1
        else:
            if self.batches_tracked == 0:
                raise RuntimeError("batch norm eval mode before any running statistics were recorded")
            mean = self.running_mean
            var = self.running_var

        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x.data - mean[:, None]) * inv_std[:, None]
        out = Tensor._wrap(self.gamma.data[:, None] * xhat + self.beta.data[:, None])
        gamma, beta = self.gamma, self.beta
        n = x.data.shape[0] * x.data.shape[2]

        def backward_rule(g):
            accumulate_grad(beta, g.sum(axis=(0, 2)))
            accumulate_grad(gamma, (g * xhat).sum(axis=(0, 2)))
            if x.requires_grad:
                coef = (gamma.data * inv_std)[:, None]
                if training:
                    g_mean = g.mean(axis=(0, 2))[:, None]
                    gx_mean = (g * xhat).mean(axis=(0, 2))[:, None]
                    accumulate_grad(x, coef * (g - g_mean - xhat * gx_mean))
                else:
                    accumulate_grad(x, coef * g)

        return record_op(out, (x, gamma, beta), backward_rule)

    def named_parameters(self, prefix: str):
        yield prefix + "gamma", self.gamma
        yield prefix + "beta", self.beta

    def named_buffers(self, prefix: str):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var

    def load_buffer(self, name: str, value: np.ndarray) -> None:
        if name.endswith("running_mean"):
            self.running_mean = value.copy()
        elif name.endswith("running_var"):
            self.running_var = value.copy()
        else:
            raise KeyError(name)
        self.batches_tracked = max(self.batches_tracked, 1)


# ---------------------------------------------------------------------------
# Convolution layer


class Conv1d:
    """Convolution (or transposed convolution) layer with selectable
    normalization. Activation is applied by the model, not here."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, *,
                 stride: int = 1, padding: tuple[int, int] = (0, 0),
                 transposed: bool = False, norm: str = "weight_norm",
                 rng: np.random.Generator | None = None):
        if kernel_size < 1 or stride < 1:
            raise ConfigError(f"kernel_size and stride must be >= 1, got {kernel_size}, {stride}")
        if norm not in NORM_KINDS:
            raise ConfigError(f"unknown norm kind {norm!r}; expected one of {NORM_KINDS}")
        rng = rng or np.random.default_rng()
        dt = get_default_dtype()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.transposed = transposed
        self.norm = norm

        w0 = uniform_init(rng, (out_channels, in_channels, kernel_size), in_channels * kernel_size)
        self.weight = Tensor(w0, requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dt), requires_grad=True)
        self.weight_g = None
        self.bn = None
        if norm == "weight_norm":
            norms = np.sqrt((w0.reshape(out_channels, -1) ** 2).sum(axis=1))
            self.weight_g = Tensor(norms, requires_grad=True)
        elif norm == "batch_norm":
            self.bn = BatchNorm1d(out_channels)

    def effective_weight(self) -> Tensor:
        if self.norm == "weight_norm":
            return weight_normalized(self.weight, self.weight_g)
        return self.weight

    def __call__(self, x, training: bool = False) -> Tensor:
        w = self.effective_weight()
        if self.transposed:
            out = conv_transpose1d(x, w, self.bias, stride=self.stride)
        else:
            out = conv1d(x, w, self.bias, stride=self.stride, padding=self.padding)
        if self.bn is not None:
            squeeze = out.data.ndim == 2
            if squeeze:
                out = reshape(out, (1,) + out.data.shape)
            out = self.bn(out, training)
            if squeeze:
                out = reshape(out, out.data.shape[1:])
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters(""))

    def named_parameters(self, prefix: str):
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias
        if self.weight_g is not None:
            yield prefix + "weight_g", self.weight_g
        if self.bn is not None:
            yield from self.bn.named_parameters(prefix + "bn.")

    def named_buffers(self, prefix: str):
        if self.bn is not None:
            yield from self.bn.named_buffers(prefix + "bn.")


# ---------------------------------------------------------------------------
# GRU


class GRU:
    """Unidirectional gated recurrent unit over the time axis.

    Per frame: z = sigmoid(Wz x + Uz h + bz), r = sigmoid(Wr x + Ur h + br),
    hcand = tanh(Wh x + Uh (r * h) + bh), h' = (1 - z) * h + z * hcand.
    Input projections for the whole sequence are batched into three
    matmuls; only the recurrent half runs step by step.
    """

    GATES = ("z", "r", "h")

    def __init__(self, input_size: int, hidden_size: int,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng()
        dt = get_default_dtype()
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.w = {}
        self.u = {}
        self.b = {}
        for gate in self.GATES:
            self.w[gate] = Tensor(uniform_init(rng, (hidden_size, input_size), input_size),
                                  requires_grad=True)
            self.u[gate] = Tensor(uniform_init(rng, (hidden_size, hidden_size), hidden_size),
                                  requires_grad=True)
            self.b[gate] = Tensor(np.zeros(hidden_size, dtype=dt), requires_grad=True)

    def __call__(self, x, h0: np.ndarray | None = None) -> Tensor:
        x, unbatch = _lift(x)
        b, c, t = x.data.shape
        if c != self.input_size:
            raise ShapeError(f"gru: input has {c} channels, expected {self.input_size}")
        hsize = self.hidden_size

        flat = reshape(transpose(x, (0, 2, 1)), (b * t, c))
        proj = {}
        for gate in self.GATES:
            p = add(matmul(flat, transpose(self.w[gate])), self.b[gate])
            proj[gate] = reshape(p, (b, t, hsize))
        u_t = {gate: transpose(self.u[gate]) for gate in self.GATES}

        if h0 is None:
            h = astensor(np.zeros((b, hsize), dtype=x.data.dtype))
        else:
            h0 = np.asarray(h0, dtype=x.data.dtype)
            if h0.shape != (hsize,):
                raise ShapeError(f"gru: h0 has shape {h0.shape}, expected ({hsize},)")
            h = astensor(np.broadcast_to(h0, (b, hsize)).copy())

        steps = []
        for i in range(t):
            xg = {gate: reshape(slice_axis(proj[gate], 1, i, i + 1), (b, hsize))
                  for gate in self.GATES}
            z = sigmoid(add(xg["z"], matmul(h, u_t["z"])))
            r = sigmoid(add(xg["r"], matmul(h, u_t["r"])))
            hcand = tanh(add(xg["h"], matmul(mul(r, h), u_t["h"])))
            h = add(mul(sub(1.0, z), h), mul(z, hcand))
            steps.append(h)

        out = transpose(stack(steps, axis=1), (0, 2, 1))
        return reshape(out, out.data.shape[1:]) if unbatch else out

    def parameter_count(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters(""))

    def named_parameters(self, prefix: str):
        for gate in self.GATES:
            yield prefix + f"w_{gate}", self.w[gate]
            yield prefix + f"u_{gate}", self.u[gate]
            yield prefix + f"b_{gate}", self.b[gate]

    def named_buffers(self, prefix: str):
        return iter(())
