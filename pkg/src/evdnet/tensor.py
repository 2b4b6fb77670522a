"""Rank-4 tensor primitives with explicit backward passes.

Tensors are plain ``numpy.ndarray`` objects of shape ``(n, c, h, w)``.
Every layer is a stride-1, zero "same"-padded convolution, so spatial size
is preserved end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels

DTYPES = {"f64": np.float64, "f32": np.float32}


class ContractError(ValueError):
    """An operation was called with arguments violating its contract."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by :func:`sgd_step` when a gradient holds NaN or Inf."""

    def __init__(self, name, max_abs):
        self.name = name
        self.max_abs = max_abs
        super().__init__(f"non-finite gradient in {name!r} (max |grad| = {max_abs})")


def resolve_dtype(precision):
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ContractError(f"precision must be one of {sorted(DTYPES)}, got {precision!r}")
    return np.dtype(precision)


def _check4(x, what):
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ContractError(f"{what} must be a rank-4 array, got shape {np.shape(x)}")


@dataclass
class ConvLayer:
    """Same-padded 2-D convolution with odd square kernel.

    ``bias`` may be ``None`` for a bias-free layer.
    """

    weight: np.ndarray
    bias: np.ndarray | None

    def __post_init__(self):
        _check4(self.weight, "weight")
        o, _, k, k2 = self.weight.shape
        if k != k2 or k not in (1, 3, 5, 7):
            raise ContractError(f"kernel must be square with k in (1,3,5,7), got {k}x{k2}")
        if self.bias is not None and self.bias.shape != (o,):
            raise ContractError(f"bias shape {self.bias.shape} does not match out_c={o}")

    @classmethod
    def init(cls, in_c, out_c, k, rng, dtype=np.float64, bias=True):
        """Uniform init in +-sqrt(1/(in_c*k*k)); bias starts at zero."""
        bound = np.sqrt(1.0 / (in_c * k * k))
        w = rng.uniform(-bound, bound, size=(out_c, in_c, k, k)).astype(dtype)
        b = np.zeros(out_c, dtype=dtype) if bias else None
        return cls(w, b)

    @property
    def out_c(self):
        return self.weight.shape[0]

    @property
    def in_c(self):
        return self.weight.shape[1]

    @property
    def k(self):
        return self.weight.shape[2]

    @property
    def pad(self):
        return (self.k - 1) // 2

    def n_params(self):
        return self.weight.size + (0 if self.bias is None else self.bias.size)


def _padded(x, p):
    if p == 0:
        return np.ascontiguousarray(x)
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + h, p:p + w] = x
    return xp


def conv2d_forward(x, layer):
    _check4(x, "input")
    if x.shape[1] != layer.in_c:
        raise ContractError(
            f"conv input shape {x.shape} incompatible with weight shape {layer.weight.shape}"
        )
    n, _, h, w = x.shape
    out = np.empty((n, layer.out_c, h, w), dtype=x.dtype)
    bias = layer.bias if layer.bias is not None else np.zeros(layer.out_c, dtype=x.dtype)
    _kernels.conv_forward(_padded(x, layer.pad), layer.weight, bias, out)
    return out


def conv2d_backward(x, layer, grad_out, need_input_grad=True):
    """Gradients of ``sum(grad_out * conv2d_forward(x, layer))``.

    Returns ``(grad_input, grad_weight, grad_bias)``; ``grad_input`` is
    ``None`` when ``need_input_grad`` is false and ``grad_bias`` is ``None``
    for bias-free layers.
    """
    _check4(x, "input")
    _check4(grad_out, "grad_out")
    n, _, h, w = x.shape
    if x.shape[1] != layer.in_c or grad_out.shape != (n, layer.out_c, h, w):
        raise ContractError(
            f"conv backward: input {x.shape}, weight {layer.weight.shape}, grad_out {grad_out.shape}"
        )
    g = np.ascontiguousarray(grad_out)
    p = layer.pad
    gw = np.empty_like(layer.weight)
    _kernels.conv_grad_weight(_padded(x, p), g, gw)
    gb = None if layer.bias is None else g.sum(axis=(0, 2, 3))
    gx = None
    if need_input_grad:
        # correlation with the spatially flipped, channel-transposed kernel
        wt = np.ascontiguousarray(layer.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = np.empty_like(x)
        _kernels.conv_forward(_padded(g, p), wt, np.zeros(layer.in_c, dtype=x.dtype), gx)
    return gx, gw, gb


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    """Pass ``grad_out`` where ``x > 0``; the subgradient at 0 is 0."""
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def concat_channels(parts):
    if not parts:
        raise ContractError("concat_channels needs at least one part")
    for p in parts:
        _check4(p, "concat part")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ContractError(f"concat parts disagree: {parts[0].shape} vs {p.shape}")
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=1)


def split_channels(grad, sizes):
    if sum(sizes) != grad.shape[1]:
        raise ContractError(f"split sizes {list(sizes)} do not sum to {grad.shape[1]} channels")
    out, start = [], 0
    for s in sizes:
        out.append(grad[:, start:start + s])
        start += s
    return out


def mse_loss(pred, target):
    if pred.shape != target.shape:
        raise ContractError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    with np.errstate(over="ignore", invalid="ignore"):  # callers check finiteness
        loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


class MomentumState(dict):
    """Velocity buffers keyed by parameter name, created lazily as zeros."""

    def velocity(self, name, like):
        v = self.get(name)
        if v is None:
            v = self[name] = np.zeros_like(like)
        elif v.shape != like.shape:
            raise ContractError(f"velocity {name!r} has shape {v.shape}, parameter has {like.shape}")
        return v


def sgd_step(params, grads, state, lr, momentum=0.9, weight_decay=1e-4):
    """In-place SGD with momentum.

    ``v <- momentum * v + grad + weight_decay * param``;
    ``param <- param - lr * v``. Parameters without a gradient entry are
    left untouched (frozen). All gradients are checked for finiteness before
    anything is modified.
    """
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ContractError(f"gradient {name!r} shape {g.shape} != parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            with np.errstate(invalid="ignore"):
                raise NonFiniteGradientError(name, float(np.nanmax(np.abs(g))) if g.size else 0.0)
    for name, g in grads.items():
        p = params[name]
        v = state.velocity(name, p)
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
