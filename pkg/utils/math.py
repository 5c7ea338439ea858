import logging
from typing import Callable, Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from utils.autodiff import Tensor, ArrayLike, as_tensor, record

logging.basicConfig()
logger = logging.getLogger(__name__)
logger.setLevel(logging.DEBUG)

LAYER_NORM_EPS = 1e-5


# ------------------
#   Fourier transforms
# ------------------

def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_radix2(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    lead = x.shape[:-1]
    y = x[..., _bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = y.reshape(lead + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * twiddle
        y = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        size *= 2
    return y


def direct_dft(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """O(N^2) transform along the last axis. Also the reference for :func:`fft`."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n == 0:
        raise ValueError("DFT of an empty sequence")
    k = np.arange(n)
    sign = 1.0 if inverse else -1.0
    w = np.exp(sign * 2j * np.pi * (np.outer(k, k) % n) / n)
    out = x @ w
    return out / n if inverse else out


def fft(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Transform along the last axis: radix-2 for powers of two, direct otherwise.

    The forward transform is unnormalized; the inverse carries the 1/N.
    """
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n == 0:
        raise ValueError("DFT of an empty sequence")
    if inverse:
        return np.conj(fft(np.conj(x))) / n
    if n & (n - 1) == 0:
        return _fft_radix2(x)
    return direct_dft(x)


def dft(x: Union[Tensor, np.ndarray, "ComplexSignal"]) -> Union[Tensor, np.ndarray]:
    """Discrete Fourier transform.

    Tensors are differentiable: ``[..., N, 2]`` is read as I/Q pairs,
    ``[..., N, 1]`` and rank-1 ``[N]`` as real sequences, and the result is
    always ``[..., N, 2]``. Anything else (complex arrays, objects with an
    ``iq`` attribute) is transformed along its last axis and returned as a
    complex ndarray.
    """
    if not isinstance(x, Tensor):
        return fft(np.asarray(getattr(x, "iq", x)))

    if x.ndim == 1:
        z = x.data.astype(np.complex128)
    elif x.shape[-1] == 2:
        z = x.data[..., 0] + 1j * x.data[..., 1]
    elif x.shape[-1] == 1:
        z = x.data[..., 0].astype(np.complex128)
    else:
        raise ValueError(f"dft expects [..., N, 2], [..., N, 1] or [N], got {x.shape}")
    n = z.shape[-1]
    if n == 0:
        raise ValueError("DFT of an empty sequence")

    spectrum = fft(z)

    def _backward(g):
        gz = n * fft(g[..., 0] + 1j * g[..., 1], inverse=True)
        if x.ndim == 1:
            return (gz.real,)
        if x.shape[-1] == 1:
            return (gz.real[..., None],)
        return (np.stack([gz.real, gz.imag], axis=-1),)

    return record(np.stack([spectrum.real, spectrum.imag], axis=-1), (x,), _backward)


def idft(x: Union[Tensor, np.ndarray]) -> Union[Tensor, np.ndarray]:
    """Inverse of :func:`dft` (``[..., N, 2]`` tensors or complex arrays)."""
    if not isinstance(x, Tensor):
        return fft(np.asarray(getattr(x, "iq", x)), inverse=True)
    if x.ndim < 2 or x.shape[-1] != 2:
        raise ValueError(f"idft expects [..., N, 2], got {x.shape}")
    n = x.shape[-2]
    signal = fft(x.data[..., 0] + 1j * x.data[..., 1], inverse=True)

    def _backward(g):
        gz = fft(g[..., 0] + 1j * g[..., 1]) / n
        return (np.stack([gz.real, gz.imag], axis=-1),)

    return record(np.stack([signal.real, signal.imag], axis=-1), (x,), _backward)


def magnitude(x: ArrayLike) -> Tensor:
    """|re + j·im| of ``[..., 2]`` pairs; zero-magnitude entries get zero gradient."""
    x = as_tensor(x)
    if x.shape[-1] != 2:
        raise ValueError(f"magnitude expects a trailing I/Q axis, got {x.shape}")
    out = np.sqrt(x.data[..., 0] ** 2 + x.data[..., 1] ** 2)

    def _backward(g):
        scale = np.where(out > 0, g / np.where(out > 0, out, 1.0), 0.0)
        return (x.data * scale[..., None],)

    return record(out, (x,), _backward)


# ------------------
#   Activations
# ------------------

def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return record(s, (x,), lambda g: (g * s * (1.0 - s),))


def swish(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return record(x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))


def softmax_rows(x: ArrayLike) -> Tensor:
    """Softmax over the trailing axis, stabilized by subtracting the row max."""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise ValueError("softmax_rows received NaN input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return record(out, (x,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


# ------------------
#   Normalization & convolution
# ------------------

def layer_norm(x: ArrayLike, gain: ArrayLike, shift: ArrayLike, eps: float = LAYER_NORM_EPS) -> Tensor:
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    channels = x.shape[-1]
    if channels < 1 or gain.shape != (channels,) or shift.shape != (channels,):
        raise ValueError(f"layer_norm: gain {gain.shape} / shift {shift.shape} do not match {x.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")

    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std

    def _backward(g):
        g_hat = g * gain.data
        gx = inv_std * (
                g_hat
                - g_hat.mean(axis=-1, keepdims=True)
                - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        g_gain = (g * x_hat).reshape(-1, channels).sum(axis=0)
        g_shift = g.reshape(-1, channels).sum(axis=0)
        return gx, g_gain, g_shift

    return record(x_hat * gain.data + shift.data, (x, gain, shift), _backward)


def conv1d(
        x: ArrayLike,
        kernel: ArrayLike,
        bias: Optional[ArrayLike] = None,
        groups: int = 1,
        padding: str = "same"
) -> Tensor:
    """Cross-correlation along axis -2 of ``x [..., len, C_in]``.

    ``kernel`` is ``[k, C_in / groups, C_out]``; output channel ``o`` of group
    ``o // (C_out / groups)`` only sees that group's input channels.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim < 2 or kernel.ndim != 3:
        raise ValueError(f"conv1d expects x [..., len, C_in] and kernel [k, C_in/groups, C_out], got {x.shape}, {kernel.shape}")
    length, c_in = x.shape[-2:]
    k, cin_g, c_out = kernel.shape
    if groups < 1 or c_in % groups or c_out % groups or cin_g != c_in // groups:
        raise ValueError(f"conv1d: {c_in} input / {c_out} output channels incompatible with kernel {kernel.shape}, groups={groups}")
    if padding == "same":
        if k % 2 == 0:
            raise ValueError("same padding needs an odd kernel")
        pad = (k - 1) // 2
    elif padding == "valid":
        pad = 0
        if length < k:
            raise ValueError(f"valid conv1d: signal length {length} shorter than kernel {k}")
    else:
        raise ValueError(f"unknown padding {padding}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ValueError(f"conv1d bias {bias.shape} does not match {c_out} output channels")

    cout_g = c_out // groups
    batch_shape = x.shape[:-2]
    xb = x.data.reshape((-1, length, c_in))
    n_batch = xb.shape[0]
    xp = np.pad(xb, ((0, 0), (pad, pad), (0, 0)))
    out_len = length + 2 * pad - k + 1
    windows = sliding_window_view(xp, k, axis=1).reshape(n_batch, out_len, groups, cin_g, k)
    w_g = kernel.data.reshape(k, cin_g, groups, cout_g)

    out = np.einsum("blgck,kcgo->blgo", windows, w_g, optimize=True).reshape(n_batch, out_len, c_out)
    if bias is not None:
        out = out + bias.data
    out = out.reshape(batch_shape + (out_len, c_out))

    def _backward(g):
        go = g.reshape(n_batch, out_len, groups, cout_g)
        g_kernel = np.einsum("blgck,blgo->kcgo", windows, go, optimize=True).reshape(k, cin_g, c_out)
        g_windows = np.einsum("blgo,kcgo->blgck", go, w_g, optimize=True).reshape(n_batch, out_len, c_in, k)
        g_padded = np.zeros_like(xp)
        for tap in range(k):
            g_padded[:, tap:tap + out_len, :] += g_windows[..., tap]
        gx = g_padded[:, pad:pad + length, :].reshape(x.shape)
        if bias is None:
            return gx, g_kernel
        return gx, g_kernel, g.reshape(-1, c_out).sum(axis=0)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record(out, inputs, _backward)


# ------------------
#   Verification
# ------------------

def _as_float(value) -> float:
    return float(value.data) if isinstance(value, Tensor) else float(value)


def finite_diff_gradient(f: Callable[[Tensor], Union[Tensor, float]], x: ArrayLike, h: float = 1e-5) -> Tensor:
    """Central differences (f(x + h·e_i) - f(x - h·e_i)) / 2h for every element of x."""
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    base = as_tensor(x).data.copy()
    grad = np.zeros_like(base)
    for i in np.ndindex(base.shape):
        plus = base.copy()
        plus[i] += h
        minus = base.copy()
        minus[i] -= h
        grad[i] = (_as_float(f(Tensor(plus))) - _as_float(f(Tensor(minus)))) / (2.0 * h)
    return Tensor(grad)


__all__ = [
    "fft", "direct_dft", "dft", "idft", "magnitude",
    "sigmoid", "swish", "softmax_rows", "layer_norm", "conv1d",
    "finite_diff_gradient", "LAYER_NORM_EPS",
]
