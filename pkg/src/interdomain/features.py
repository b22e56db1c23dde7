"""Token-level preprocessing: feature maps, short causal conv, RoPE, RMSNorm.

Feature maps turn query/key vectors into the nonnegative-free feature space
in which attention becomes an inner product: K(q, k) ~= features(q) @
features(k).  Three kinds are supported:

* ``rff``      random Fourier features [cos(w@x), sin(w@x)] / sqrt(S) for a
               shift-invariant kernel; output width 2S.
* ``silu_l2``  SiLU followed by l2 normalization (optionally preceded by a
               short causal conv when used standalone); width preserved.
* ``identity`` pass-through, useful for exact-path checks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# floor used when l2-normalizing feature vectors; its exact value is pinned
# by tests, so the guarded norm stays 1 whenever the raw norm clears it
L2_EPS = 1e-6
# stability constant inside the RMS denominator; also pinned by tests
RMS_EPS = 1e-6
ROPE_BASE = 10000.0

CONV_TAPS = 4


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch exponentiates a large positive number
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_deriv(x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def rff_features(x: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Random Fourier features of ``x`` for frequency matrix ``omega`` (S, d).

    The 1/sqrt(S) scaling is folded in, so features(x) @ features(x) == 1
    and features(x) @ features(y) is a Monte-Carlo estimate of the kernel.
    Accepts a single vector or a stack of rows.
    """
    omega = np.asarray(omega, dtype=float)
    proj = np.asarray(x, dtype=float) @ omega.T
    scale = 1.0 / np.sqrt(omega.shape[0])
    return np.concatenate([np.cos(proj), np.sin(proj)], axis=-1) * scale


def l2_normalize(v: np.ndarray, eps: float = L2_EPS) -> np.ndarray:
    """Normalize rows to unit length; vectors below ``eps`` are scaled by 1/eps.

    The max() guard keeps the output norm exactly 1 whenever the raw norm
    clears the floor, and maps the zero vector to the zero vector.
    """
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norm, eps)


def silu_l2_normalize(x: np.ndarray, eps: float = L2_EPS) -> np.ndarray:
    return l2_normalize(silu(np.asarray(x, dtype=float)), eps)


def short_conv(x_seq: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Causal depthwise conv: y[t, c] = sum_tau kernel[tau, c] * x[t - tau, c].

    ``kernel`` has one column per channel and exactly CONV_TAPS rows; the
    left edge is zero-padded so the output has the input's length.
    """
    x_seq = np.asarray(x_seq, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    if kernel.shape != (CONV_TAPS, x_seq.shape[-1]):
        raise ValueError(
            f"conv kernel must have shape ({CONV_TAPS}, {x_seq.shape[-1]}), got {kernel.shape}"
        )
    out = kernel[0] * x_seq
    for tau in range(1, CONV_TAPS):
        out[tau:] += kernel[tau] * x_seq[:-tau]
    return out


def short_conv_with_tail(
    x_seq: np.ndarray, kernel: np.ndarray, tail: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray]:
    """Conv a block that continues an earlier stream.

    ``tail`` holds the CONV_TAPS - 1 raw inputs preceding the block (zeros at
    a stream's start).  Returns the conv output for the block and the new
    tail.  Splitting a stream into blocks this way reproduces ``short_conv``
    on the concatenation exactly.
    """
    x_seq = np.asarray(x_seq, dtype=float)
    if tail is None:
        tail = np.zeros((CONV_TAPS - 1, x_seq.shape[-1]))
    ext = np.concatenate([tail, x_seq], axis=0)
    kernel = np.asarray(kernel, dtype=float)
    n = x_seq.shape[0]
    out = np.zeros_like(x_seq)
    for tau in range(CONV_TAPS):
        # ext index of x[t - tau] is t + (CONV_TAPS - 1) - tau
        start = CONV_TAPS - 1 - tau
        out += kernel[tau] * ext[start:start + n]
    return out, ext[-(CONV_TAPS - 1):].copy()


def silu_l2_features(
    x_seq: np.ndarray, conv_kernel: np.ndarray, eps: float = L2_EPS
) -> np.ndarray:
    """Short causal conv, SiLU, then l2 normalization per position."""
    return silu_l2_normalize(short_conv(x_seq, conv_kernel), eps)


def rope_frequencies(width: int, base: float = ROPE_BASE) -> np.ndarray:
    if width % 2 != 0:
        raise ValueError(f"rotary width must be even, got {width}")
    return base ** (-2.0 * np.arange(width // 2) / width)


def rope_apply(
    x: np.ndarray,
    positions: int | np.ndarray,
    base: float = ROPE_BASE,
    inverse: bool = False,
) -> np.ndarray:
    """Rotate consecutive pairs of the last axis by position-dependent angles.

    Pair j of a width-w vector at position i is rotated by i * base^(-2j/w).
    ``positions`` is a scalar for a single item or an (N,) vector matched to
    the leading axis of ``x``.  ``inverse=True`` applies the transpose
    rotation, which undoes the forward one exactly; the map is orthogonal,
    so norms are preserved.
    """
    x = np.asarray(x, dtype=float)
    freqs = rope_frequencies(x.shape[-1], base)
    ang = np.multiply.outer(np.asarray(positions, dtype=float), freqs)
    # broadcast angles over any axes between the position axis and the pairs
    ang = ang.reshape(ang.shape[:1] + (1,) * (x.ndim - ang.ndim) + ang.shape[1:]) \
        if np.ndim(positions) else ang
    if inverse:
        ang = -ang
    cos, sin = np.cos(ang), np.sin(ang)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


@dataclass(frozen=True)
class NormBias:
    """RMSNorm with learnable gain and additive bias."""

    gain: np.ndarray
    bias: np.ndarray
    eps: float = RMS_EPS


def rmsnorm_bias(x: np.ndarray, params: NormBias) -> np.ndarray:
    """gain * x / sqrt(mean(x^2) + eps) + bias over the channel axis."""
    x = np.asarray(x, dtype=float)
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + params.eps)
    return params.gain * (x / rms) + params.bias


def rmsnorm_bias_backward(
    x: np.ndarray, params: NormBias, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of rmsnorm_bias w.r.t. (x, gain, bias); axes before the last
    are batch axes and get summed for the parameter gradients."""
    x = np.asarray(x, dtype=float)
    width = x.shape[-1]
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + params.eps)
    xhat = x / rms
    grad_gain = np.sum(grad_out * xhat, axis=tuple(range(x.ndim - 1)))
    grad_bias = np.sum(grad_out, axis=tuple(range(x.ndim - 1)))
    g = params.gain * grad_out
    grad_x = g / rms - x * np.sum(g * x, axis=-1, keepdims=True) / (width * rms ** 3)
    return grad_x, grad_gain, grad_bias


@dataclass(frozen=True)
class FeatureMap:
    """A query/key feature map.

    ``omega`` is the (S, d) frequency matrix for ``rff``.  ``conv_kernel``
    is only meaningful for standalone ``silu_l2`` use; inside the mixer the
    conv is applied to the full projected stream before the head split, so
    per-head maps carry ``conv_kernel=None``.
    """

    kind: str  # "rff" | "silu_l2" | "identity"
    omega: np.ndarray | None = None
    conv_kernel: np.ndarray | None = None
    eps: float = L2_EPS


def make_rff(input_dim: int, n_freqs: int, rng: np.random.Generator,
             bandwidth: float = 1.0) -> FeatureMap:
    """RFF map for the Gaussian kernel exp(-|x-y|^2 / (2 bandwidth^2))."""
    omega = rng.standard_normal((n_freqs, input_dim)) / bandwidth
    return FeatureMap(kind="rff", omega=omega)


def make_silu_l2(conv_kernel: np.ndarray | None = None, eps: float = L2_EPS) -> FeatureMap:
    return FeatureMap(kind="silu_l2", conv_kernel=conv_kernel, eps=eps)


def make_identity() -> FeatureMap:
    return FeatureMap(kind="identity")


def feature_width(fmap: FeatureMap, input_dim: int) -> int:
    if fmap.kind == "rff":
        return 2 * fmap.omega.shape[0]
    return input_dim


def apply_feature_map(fmap: FeatureMap, x: np.ndarray) -> np.ndarray:
    """Apply a feature map to a vector or a stack of rows.

    For ``silu_l2`` with a conv kernel the input must be a full sequence
    (rows ordered by time); without one the map is positionwise.
    """
    if fmap.kind == "identity":
        return np.asarray(x, dtype=float)
    if fmap.kind == "rff":
        return rff_features(x, fmap.omega)
    if fmap.kind == "silu_l2":
        if fmap.conv_kernel is not None:
            return silu_l2_features(x, fmap.conv_kernel, fmap.eps)
        return silu_l2_normalize(x, fmap.eps)
    raise ValueError(f"unknown feature map kind {fmap.kind!r}")


def feature_map_backward(
    fmap: FeatureMap, x: np.ndarray, grad_out: np.ndarray
) -> np.ndarray:
    """Gradient of ``apply_feature_map`` w.r.t. its input (conv-free maps).

    The mixer applies its conv at the stream level, so only the positionwise
    portion needs a backward here.
    """
    if fmap.kind == "identity":
        return np.asarray(grad_out, dtype=float)
    if fmap.kind == "rff":
        proj = np.asarray(x, dtype=float) @ fmap.omega.T
        scale = 1.0 / np.sqrt(fmap.omega.shape[0])
        half = proj.shape[-1]
        g_cos = grad_out[..., :half] * scale
        g_sin = grad_out[..., half:] * scale
        g_proj = -np.sin(proj) * g_cos + np.cos(proj) * g_sin
        return g_proj @ fmap.omega
    if fmap.kind == "silu_l2":
        if fmap.conv_kernel is not None:
            raise ValueError("conv-bearing silu_l2 maps are differentiated at the stream level")
        v = silu(np.asarray(x, dtype=float))
        norm = np.linalg.norm(v, axis=-1, keepdims=True)
        guarded = np.maximum(norm, fmap.eps)
        y = v / guarded
        # below the floor the scale is the constant 1/eps
        inner = np.sum(y * grad_out, axis=-1, keepdims=True)
        grad_v = np.where(norm > fmap.eps, (grad_out - y * inner) / guarded, grad_out / guarded)
        return grad_v * silu_deriv(x)
    raise ValueError(f"unknown feature map kind {fmap.kind!r}")
