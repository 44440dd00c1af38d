"""Differentiable layers built on :mod:`tensor`. All accept a leading batch axis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    make_node,
    matmul,
    mean,
    sigmoid,
    square,
    tanh,
)


def _batched(x: Tensor, spatial_ndim: int):
    """Return (data with batch axis, whether a batch axis was added)."""
    if x.ndim == spatial_ndim + 1:
        return x.data[None], True
    if x.ndim == spatial_ndim + 2:
        return x.data, False
    raise ShapeError(f"expected {spatial_ndim + 1}D or {spatial_ndim + 2}D input, got {x.shape}")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation. ``x``: (B, Ci, H, W) or (Ci, H, W); ``weight``: (Co, Ci, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    xd, squeeze = _batched(x, 2)
    co, ci, kh, kw = weight.shape
    if xd.shape[1] != ci:
        raise ShapeError(f"conv2d input channels {xd.shape[1]} != weight in-channels {ci}")
    if kh > xd.shape[2] + 2 * padding or kw > xd.shape[3] + 2 * padding:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} larger than padded input {xd.shape[2]}x{xd.shape[3]}"
            f" (padding {padding})"
        )
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (co,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({co},)")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, ho, wo = xd.shape[0], win.shape[2], win.shape[3]
    # im2col: one (B*Ho*Wo, Ci*k*k) copy shared by forward and weight gradient
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, ci * kh * kw)
    wmat = weight.data.reshape(co, -1)
    out = (cols @ wmat.T).reshape(b, ho, wo, co).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    if squeeze:
        out = out[0]

    def back(g):
        gd = g[None] if squeeze else g
        gflat = gd.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (gflat.T @ cols).reshape(weight.shape)
        # (kh, kw, B, Ci, Ho, Wo) so each kernel offset is one contiguous block
        gcols = np.ascontiguousarray(
            (gflat @ wmat).reshape(b, ho, wo, ci, kh, kw).transpose(4, 5, 0, 3, 1, 2))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[i, j]
        gx = gxp[:, :, padding:padding + xd.shape[2], padding:padding + xd.shape[3]]
        if squeeze:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gd.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, back)


class BatchNormState:
    """Running statistics for :func:`batch_norm`."""

    def __init__(self, channels: int):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool = True,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over every axis except 1 (channels)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2:
        raise ShapeError(f"batch_norm needs (B, C, ...) input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},)")
    if x.size == 0:
        raise ShapeError("batch_norm on an empty batch")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    n = x.size // c
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.running_mean = (1 - momentum) * state.running_mean + momentum * mu
        unbiased = var * n / (n - 1) if n > 1 else var
        state.running_var = (1 - momentum) * state.running_var + momentum * unbiased
    else:
        mu, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def back(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            dx = (inv.reshape(bshape) / n) * (
                n * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv.reshape(bshape)
        return dx, dgamma, dbeta

    return make_node(out, (x, gamma, beta), back)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def pool2d(x, kind: str = "max", k: int = 2, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    stride = k if stride is None else stride
    xd, squeeze = _batched(x, 2)
    if k > xd.shape[2] or k > xd.shape[3]:
        raise ShapeError(f"pool window {k} larger than input {xd.shape[2]}x{xd.shape[3]}")
    win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(win.shape[:4] + (k * k,))
    if kind == "max":
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    elif kind == "avg":
        out = flat.mean(axis=-1)
    else:
        raise ValueError(f"unknown pool kind {kind!r}")

    def back(g):
        gd = g[None] if squeeze else g
        gx = np.zeros_like(xd)
        for i in range(k):
            for j in range(k):
                if kind == "max":
                    part = gd * (arg == i * k + j)
                else:
                    part = gd / (k * k)
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += part
        return (gx[0] if squeeze else gx,)

    return make_node(out[0] if squeeze else out, (x,), back)


def interpolation_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    """``(n_out, n_in)`` resampling matrix; bilinear uses half-pixel centers
    (corner alignment off)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    dst = np.arange(n_out)
    if mode == "nearest":
        src = np.minimum(np.floor(dst * scale).astype(int), n_in - 1)
        m[dst, src] = 1.0
    elif mode == "bilinear":
        src = np.maximum((dst + 0.5) * scale - 0.5, 0.0)
        i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        lam = src - i0
        np.add.at(m, (dst, i0), 1.0 - lam)
        np.add.at(m, (dst, i1), lam)
    else:
        raise ValueError(f"unknown upsample mode {mode!r}")
    return m


def upsample(x, target_h: int, target_w: int, mode: str = "bilinear") -> Tensor:
    x = as_tensor(x)
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"upsample target must be >= 1, got {target_h}x{target_w}")
    uh = interpolation_matrix(x.shape[-2], target_h, mode)
    uw = interpolation_matrix(x.shape[-1], target_w, mode)
    out = np.einsum("ih,...hw,jw->...ij", uh, x.data, uw)
    return make_node(out, (x,), lambda g: (np.einsum("ih,...ij,jw->...hw", uh, g, uw),))


def dense(x, weight, bias=None) -> Tensor:
    """``W x + b`` with ``W`` of shape (out, in); ``x`` may be batched (B, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"dense input size {x.shape[-1]} != weight in-size {weight.shape[1]}")
    out = matmul(x, weight.T)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"dense bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias
    return out


def flatten(x, start_dim: int = 0) -> Tensor:
    x = as_tensor(x)
    return x.reshape(x.shape[:start_dim] + (-1,))


def dropout(x, rate: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    rng = np.random.default_rng(rng)
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_node(x.data * mask, (x,), lambda g: (g * mask,))


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes {pred.shape} vs {target.shape}")
    return mean(square(pred - target))


# ---- parameter initialization ----

def uniform_param(rng, shape, bound: float, name: str) -> Parameter:
    return Parameter(rng.uniform(-bound, bound, shape), name)


def dense_params(rng, n_in: int, n_out: int, prefix: str):
    bound = 1.0 / np.sqrt(n_in)
    return (uniform_param(rng, (n_out, n_in), bound, f"{prefix}.weight"),
            uniform_param(rng, (n_out,), bound, f"{prefix}.bias"))


def conv_params(rng, c_in: int, c_out: int, k: int, prefix: str):
    bound = 1.0 / np.sqrt(c_in * k * k)
    return (uniform_param(rng, (c_out, c_in, k, k), bound, f"{prefix}.weight"),
            uniform_param(rng, (c_out,), bound, f"{prefix}.bias"))


# ---- recurrent ----

@dataclass
class LSTMCell:
    """Gate weights stacked in (forget, input, cell, output) order.

    ``w_x`` couples the input, ``w_h`` the previous hidden state.
    """

    w_x: Parameter  # (4h, n_in)
    w_h: Parameter  # (4h, h)
    b: Parameter  # (4h,)

    @property
    def hidden(self) -> int:
        return self.w_h.shape[1]

    @property
    def n_in(self) -> int:
        return self.w_x.shape[1]

    def parameters(self):
        return [self.w_x, self.w_h, self.b]

    @classmethod
    def init(cls, rng, n_in: int, hidden: int, prefix: str, forget_bias: float = 1.0):
        bound = 1.0 / np.sqrt(hidden)
        b = rng.uniform(-bound, bound, 4 * hidden)
        b[:hidden] = forget_bias
        return cls(
            uniform_param(rng, (4 * hidden, n_in), bound, f"{prefix}.w_x"),
            uniform_param(rng, (4 * hidden, hidden), bound, f"{prefix}.w_h"),
            Parameter(b, f"{prefix}.b"),
        )


def lstm_step(x_t, prev, cell: LSTMCell):
    """One LSTM time step. ``prev`` is ``(hidden, cell_state)``.

    Returns ``(output, (hidden, cell_state))`` where output is the new hidden state.
    """
    x_t = as_tensor(x_t)
    h_prev, c_prev = (as_tensor(v) for v in prev)
    if x_t.shape[-1] != cell.n_in or h_prev.shape[-1] != cell.hidden:
        raise ShapeError(
            f"lstm_step input {x_t.shape[-1]}/hidden {h_prev.shape[-1]} vs cell "
            f"{cell.n_in}/{cell.hidden}"
        )
    n = cell.hidden
    z = matmul(x_t, cell.w_x.T) + matmul(h_prev, cell.w_h.T) + cell.b
    f = sigmoid(z[..., 0:n])
    i = sigmoid(z[..., n:2 * n])
    g = tanh(z[..., 2 * n:3 * n])
    o = sigmoid(z[..., 3 * n:4 * n])
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, (h, c)


def zero_state(batch_shape, hidden: int):
    shape = tuple(batch_shape) + (hidden,)
    return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))


def lstm_unroll(sequence, cell: LSTMCell, reverse: bool = False, state=None):
    """Run ``cell`` over a list of inputs. Outputs are returned in the original
    time order even when ``reverse`` is set; also returns the final state."""
    if not sequence:
        raise ShapeError("lstm over an empty sequence")
    state = state or zero_state(sequence[0].shape[:-1], cell.hidden)
    order = range(len(sequence) - 1, -1, -1) if reverse else range(len(sequence))
    outputs = [None] * len(sequence)
    for t in order:
        outputs[t], state = lstm_step(sequence[t], state, cell)
    return outputs, state


def bilstm_forward(sequence, fwd: LSTMCell, bwd: LSTMCell):
    """Bidirectional layer: ``output[k] = [fwd_hidden[k], bwd_hidden[k]]``.

    Returns ``(outputs, fwd_final_state, bwd_final_state)``; the backward
    final state is the one reached at the first time step.
    """
    sequence = [as_tensor(s) for s in sequence]
    f_out, f_state = lstm_unroll(sequence, fwd)
    b_out, b_state = lstm_unroll(sequence, bwd, reverse=True)
    outputs = [concat([a, b], axis=-1) for a, b in zip(f_out, b_out)]
    return outputs, f_state, b_state
