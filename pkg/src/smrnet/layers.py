"""Neural network building blocks on top of :mod:`smrnet.tensor`."""

from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import DEFAULT_DTYPE, ShapeError, Tensor, make_result, max_axes, mean_axes


class Module:
    """Parameter container with train/eval mode.

    Parameters are attributes holding a ``Tensor`` with ``requires_grad``;
    sub-modules may be plain attributes or lists. Non-trainable state lives
    in ``self.buffers`` (name -> ndarray). Iteration order is attribute
    definition order, which keeps checkpoint tables stable.
    """

    def __init__(self):
        self.training = True
        self.buffers: Dict[str, np.ndarray] = {}

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self.buffers.items():
            yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def state(self) -> Dict[str, np.ndarray]:
        """Every parameter and buffer by dotted name."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        owners = {}
        for m_name, m in self._named_modules():
            for b in m.buffers:
                owners[m_name + b] = (m, b)
        expected = set(params) | set(owners)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name in params:
                p = params[name]
                if p.shape != arr.shape:
                    raise ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
                p.data = np.array(arr, dtype=p.dtype)
            else:
                m, b = owners[name]
                m.buffers[b] = np.array(arr, dtype=m.buffers[b].dtype)

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, child in self._children():
            yield from child._named_modules(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        for m in self.modules():
            for name, value in vars(m).items():
                if isinstance(value, Tensor) and value.requires_grad:
                    value.data = value.data.astype(dtype)
            for b in m.buffers:
                m.buffers[b] = m.buffers[b].astype(dtype)
        return self


def _param(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------- convolution

def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _pad(x: np.ndarray, p: int, value: float = 0.0) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int):
    """Strided view of shape [N, C, kh, kw, ho, wo]."""
    sn, sc, sh, sw = xp.strides
    n, c = xp.shape[:2]
    return as_strided(xp, shape=(n, c, kh, kw, ho, wo),
                      strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
                      writeable=False)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, dilation: int = 1, method: str = "im2col") -> Tensor:
    """2-D cross-correlation with zero padding, stride and dilation.

    ``method`` selects im2col+matmul or a direct sum over kernel taps; both
    produce the same result and share one backward.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent {ho}x{wo} is degenerate for input {h}x{w}")
    xp = _pad(x.data, padding)
    wmat = weight.data.reshape(cout, -1)
    if method == "im2col":
        cols = _windows(xp, kh, kw, stride, dilation, ho, wo).transpose(1, 2, 3, 0, 4, 5)
        cols = cols.reshape(cin * kh * kw, n * ho * wo)
        y = (wmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    elif method == "direct":
        cols = None
        y = np.zeros((n, cout, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i * dilation:i * dilation + stride * (ho - 1) + 1:stride,
                           j * dilation:j * dilation + stride * (wo - 1) + 1:stride]
                y += np.einsum("oc,nchw->nohw", weight.data[:, :, i, j], patch)
    else:
        raise ValueError(f"unknown conv method '{method}'")
    if bias is not None:
        y = y + bias.data.reshape(1, cout, 1, 1)
    y = np.ascontiguousarray(y, dtype=x.dtype)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        if cols is not None:
            c = cols
        else:
            c = _windows(xp, kh, kw, stride, dilation, ho, wo).transpose(1, 2, 3, 0, 4, 5)
            c = c.reshape(cin * kh * kw, n * ho * wo)
        gw = (g2 @ c.T).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(cin, kh, kw, n, ho, wo)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i * dilation:i * dilation + stride * (ho - 1) + 1:stride,
                        j * dilation:j * dilation + stride * (wo - 1) + 1:stride] += \
                        dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(y, parents, bw, "conv2d")


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: int = 0,
                 dilation: int = 1, bias: bool = True):
        super().__init__()
        if min(cin, cout, kernel, stride, dilation) < 1 or padding < 0:
            raise ValueError("conv hyperparameters must be positive")
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self.weight = _param((cout, cin, kernel, kernel))
        self.bias = _param((cout,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


# ---------------------------------------------------------------- pooling

def pool2d(kind: str, x: Tensor, window: int, stride: Optional[int] = None,
           padding: int = 0) -> Tensor:
    """Max or average pooling over square windows.

    Max pooling pads with -inf and sends gradient to the first maximal
    element in row-major order; average pooling counts padded zeros.
    """
    stride = stride or window
    n, c, h, w = x.shape
    if window > h + 2 * padding or window > w + 2 * padding:
        raise ShapeError(f"pool window {window} exceeds spatial extent {h}x{w}")
    ho = conv_output_size(h, window, stride, padding, 1)
    wo = conv_output_size(w, window, stride, padding, 1)
    fill = -np.inf if kind == "max" else 0.0
    xp = _pad(x.data, padding, fill)
    win = _windows(xp, window, window, stride, 1, ho, wo)
    flat = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c, ho, wo, window * window)
    if kind == "max":
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    elif kind == "avg":
        arg = None
        out = flat.mean(axis=-1)
    else:
        raise ValueError(f"unknown pool kind '{kind}'")
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(window):
            for j in range(window):
                sl = (slice(None), slice(None),
                      slice(i, i + stride * (ho - 1) + 1, stride),
                      slice(j, j + stride * (wo - 1) + 1, stride))
                if kind == "max":
                    gxp[sl] += g * (arg == i * window + j)
                else:
                    gxp[sl] += g / (window * window)
        return (gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp,)

    return make_result(out, (x,), bw, f"{kind}_pool2d")


def global_pool(kind: str, x: Tensor) -> Tensor:
    if kind == "avg":
        return mean_axes(x, (2, 3))
    if kind == "max":
        return max_axes(x, (2, 3))
    raise ValueError(f"unknown pool kind '{kind}'")


# ---------------------------------------------------------------- normalisation

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation over (N, H, W); updates running stats in place."""
    c = x.shape[1]
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if x.shape[0] < 2:
            raise ShapeError("batchnorm in train mode needs a batch of at least 2")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        mean, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    y = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(1, c, 1, 1)
        if training:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            gx = (inv.reshape(1, c, 1, 1) / m) * (
                m * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gxhat * inv.reshape(1, c, 1, 1)
        return gx.astype(x.dtype), gg, gb

    return make_result(y.astype(x.dtype), (x, gamma, beta), bw, "batchnorm")


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = _param((channels,))
        self.beta = _param((channels,))
        self.gamma.data[:] = 1.0
        self.buffers["running_mean"] = np.zeros(channels, dtype=DEFAULT_DTYPE)
        self.buffers["running_var"] = np.ones(channels, dtype=DEFAULT_DTYPE)

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.buffers["running_mean"],
                         self.buffers["running_var"], self.training, self.momentum, self.eps)


# ---------------------------------------------------------------- dense layers

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(y.astype(x.dtype), parents, bw, "linear")


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, bias: bool = True):
        super().__init__()
        self.weight = _param((n_out, n_in))
        self.bias = _param((n_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


# ---------------------------------------------------------------- resampling

def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result(y, (x,), bw, "upsample_nearest")


# ---------------------------------------------------------------- initialisation

def init_params(module: Module, rng: np.random.Generator) -> None:
    """He-normal weights for conv/linear layers, zero biases, unit BN scale."""
    for m in module.modules():
        if isinstance(m, Conv2d):
            fan_in = m.cin * m.kernel * m.kernel
            m.weight.data = (rng.standard_normal(m.weight.shape) * np.sqrt(2.0 / fan_in)).astype(
                m.weight.dtype)
            if m.bias is not None:
                m.bias.data[:] = 0
        elif isinstance(m, Linear):
            fan_in = m.weight.shape[1]
            m.weight.data = (rng.standard_normal(m.weight.shape) * np.sqrt(2.0 / fan_in)).astype(
                m.weight.dtype)
            if m.bias is not None:
                m.bias.data[:] = 0
        elif isinstance(m, BatchNorm2d):
            m.gamma.data[:] = 1
            m.beta.data[:] = 0


def zero_params(module: Module) -> None:
    for p in module.parameters():
        p.data[:] = 0
