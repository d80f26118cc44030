"""Numpy building blocks for the hybrid classifier.

Arrays are float64. Public image stacks are ``(N, C, H, W)``, where
``H`` is the radial (segment) axis and ``W`` the azimuthal (track) axis.
Every layer is a pair of pure functions: ``*_forward`` returns the output
and a cache, ``*_backward`` maps the upstream gradient through the cache.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

BCE_CLAMP = 1e-7


# ---------------------------------------------------------------- padding


def pad2d(x: np.ndarray, pad_h: tuple[int, int], pad_w: tuple[int, int]) -> np.ndarray:
    """Pad the last two axes: replicate along H, wrap around along W."""
    (h0, h1), (w0, w1) = pad_h, pad_w
    if min(h0, h1, w0, w1) < 0:
        raise ConfigError("padding must be non-negative")
    width = x.shape[-1]
    if max(w0, w1) > width:
        raise ConfigError(f"azimuthal pad {max(w0, w1)} exceeds width {width}")
    parts = []
    if w0:
        parts.append(x[..., width - w0:])
    parts.append(x)
    if w1:
        parts.append(x[..., :w1])
    if len(parts) > 1:
        x = np.concatenate(parts, axis=-1)
    if h0 or h1:
        top = np.repeat(x[..., :1, :], h0, axis=-2)
        bottom = np.repeat(x[..., -1:, :], h1, axis=-2)
        x = np.concatenate([top, x, bottom], axis=-2)
    return x


def pad2d_backward(g: np.ndarray, pad_h: tuple[int, int], pad_w: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`pad2d`: fold padded gradients back onto the source."""
    (h0, h1), (w0, w1) = pad_h, pad_w
    height = g.shape[-2] - h0 - h1
    width = g.shape[-1] - w0 - w1
    g = g.copy()
    if h0:
        g[..., h0, :] += g[..., :h0, :].sum(axis=-2)
    if h1:
        g[..., h0 + height - 1, :] += g[..., h0 + height:, :].sum(axis=-2)
    g = g[..., h0:h0 + height, :]
    core = g[..., w0:w0 + width].copy()
    if w0:
        core[..., width - w0:] += g[..., :w0]
    if w1:
        core[..., :w1] += g[..., w0 + width:]
    return core


def circular_pad(x: np.ndarray, pad: int) -> np.ndarray:
    """Symmetric pad by ``pad`` cells: circular in azimuth, edge-replicate in radius.

    >>> circular_pad(np.array([[[1., 2., 3.]]]), 1)[0, 1]
    array([3., 1., 2., 3., 1.])
    """
    if pad < 0:
        raise ConfigError("pad must be >= 0")
    return pad2d(x, (pad, pad), (pad, pad))


def same_padding(kernel: int) -> tuple[int, int]:
    before = (kernel - 1) // 2
    return before, kernel - 1 - before


# ---------------------------------------------------------------- conv
#
# The training path keeps activations channels-last, ``(N, H, W, C)``, so
# im2col and the pooling reshapes need no transposes. ``conv2d`` below is the
# channels-first convenience wrapper.


def _conv_pads(kernel_hw, pad_mode):
    kh, kw = kernel_hw
    if pad_mode == "circular":
        return same_padding(kh), same_padding(kw)
    if pad_mode == "valid":
        return (0, 0), (0, 0)
    raise ConfigError(f"unknown pad_mode {pad_mode!r}")


def _pad_nhwc(x, pad_h, pad_w):
    (h0, h1), (w0, w1) = pad_h, pad_w
    width = x.shape[2]
    if max(w0, w1) > width:
        raise ConfigError(f"azimuthal pad {max(w0, w1)} exceeds width {width}")
    if w0 or w1:
        x = np.concatenate([x[:, :, width - w0:], x, x[:, :, :w1]], axis=2)
    if h0 or h1:
        x = np.concatenate(
            [np.repeat(x[:, :1], h0, axis=1), x, np.repeat(x[:, -1:], h1, axis=1)], axis=1
        )
    return x


def _unpad_nhwc(g, pad_h, pad_w):
    (h0, h1), (w0, w1) = pad_h, pad_w
    height = g.shape[1] - h0 - h1
    width = g.shape[2] - w0 - w1
    if h0 or h1:
        g = g.copy()
        if h0:
            g[:, h0] += g[:, :h0].sum(axis=1)
        if h1:
            g[:, h0 + height - 1] += g[:, h0 + height:].sum(axis=1)
        g = g[:, h0:h0 + height]
    core = g[:, :, w0:w0 + width].copy()
    if w0:
        core[:, :, width - w0:] += g[:, :, :w0]
    if w1:
        core[:, :, :w1] += g[:, :, w0 + width:]
    return core


def conv2d_forward(x, weight, bias, pad_mode="circular"):
    """Stride-1 cross-correlation on a channels-last batch ``(N, H, W, C)``.

    ``weight`` is ``(O, C, kh, kw)``. ``pad_mode="circular"`` keeps the
    spatial size (wrap in W, replicate in H; an even kernel's extra cell
    goes after); ``"valid"`` does not pad.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigError("conv2d expects (N,H,W,C) input and (O,C,kh,kw) kernel")
    n, _, _, c = x.shape
    o, c_w, kh, kw = weight.shape
    if c != c_w:
        raise ConfigError(f"input has {c} channels, kernel expects {c_w}")
    if bias is not None and np.shape(bias) != (o,):
        raise ConfigError(f"bias shape {np.shape(bias)} != ({o},)")
    pads = _conv_pads((kh, kw), pad_mode)
    xp = _pad_nhwc(x, *pads)
    ho = xp.shape[1] - kh + 1
    wo = xp.shape[2] - kw + 1
    if ho < 1 or wo < 1:
        raise ConfigError("kernel larger than padded input")
    cols = np.empty((n, ho, wo, kh * kw * c), dtype=np.result_type(xp, weight))
    for i in range(kh):
        for j in range(kw):
            k = i * kw + j
            cols[..., k * c:(k + 1) * c] = xp[:, i:i + ho, j:j + wo]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    wmat = weight.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
    out = cols @ wmat
    if bias is not None:
        out += bias
    cache = (cols, weight, pads, xp.shape, bias is not None)
    return out.reshape(n, ho, wo, o), cache


def conv2d_backward(g, cache, need_dx=True):
    """Returns ``(dx, dweight, dbias)`` for :func:`conv2d_forward`.

    ``dx`` is ``None`` when ``need_dx`` is false (first layer of a network).
    """
    cols, weight, pads, xp_shape, has_bias = cache
    n, ho, wo, o = g.shape
    _, c, kh, kw = weight.shape
    gm = g.reshape(n * ho * wo, o)
    dweight = (cols.T @ gm).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
    dbias = np.ones(gm.shape[0]) @ gm if has_bias else None
    if not need_dx:
        return None, np.ascontiguousarray(dweight), dbias
    wmat = weight.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
    dcols = (gm @ wmat.T).reshape(n, ho, wo, kh * kw, c)
    dxp = np.zeros(xp_shape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + ho, j:j + wo] += dcols[:, :, :, i * kw + j]
    return _unpad_nhwc(dxp, *pads), np.ascontiguousarray(dweight), dbias


def conv2d(x, kernel, bias=None, pad_mode="circular"):
    """Channels-first convolution of ``(C, H, W)`` or ``(N, C, H, W)`` input."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    out, _ = conv2d_forward(np.moveaxis(x, 1, -1), kernel, bias, pad_mode)
    out = np.moveaxis(out, -1, 1)
    return out[0] if squeeze else out


# ---------------------------------------------------------------- misc layers


def meanpool2_forward(x):
    """2x2 mean-pool of a channels-last batch."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"2x2 mean-pool needs even spatial dims, got {h}x{w}")
    out = x[:, 0::2, 0::2] + x[:, 1::2, 0::2]
    out += x[:, 0::2, 1::2]
    out += x[:, 1::2, 1::2]
    out *= 0.25
    return out, x.shape


def meanpool2_backward(g, shape):
    n, h, w, c = shape
    g = 0.25 * g
    return np.broadcast_to(g[:, :, None, :, None, :], (n, h // 2, 2, w // 2, 2, c)).reshape(shape)


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(g, mask):
    return g * mask


def dense_forward(x, weight, bias):
    return x @ weight + bias, x


def dense_backward(g, x, weight):
    return g @ weight.T, x.T @ g, g.sum(axis=0)


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(pred, label):
    """Mean binary cross-entropy with the prediction clamped to [1e-7, 1-1e-7]."""
    p = np.clip(np.asarray(pred, dtype=float), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(label, dtype=float)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def bce_grad(pred, label):
    """d(mean BCE)/d(pred); zero where the clamp is active."""
    p = np.asarray(pred, dtype=float)
    y = np.asarray(label, dtype=float)
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    g = (-y / pc + (1.0 - y) / (1.0 - pc)) / p.size
    return np.where((p < BCE_CLAMP) | (p > 1.0 - BCE_CLAMP), 0.0, g)


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr=8e-5, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. ``params`` is updated in place and returned."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state
