"""Differentiable primitives.

Each op computes its forward value with numpy and, when an operand is
attached to a tape, records a closure that accumulates the adjoints of its
inputs.  Layout convention for the 4-D ops: (batch, channel, time, joint).

Only double precision is supported; gradient-check fidelity outweighs speed
at this data scale.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericalError, ValidationError
from .tensor import Tensor, accumulate, active_tape

# Test hook: flips the sign of the relu adjoint so a deliberately corrupted
# build is catchable by grad_check. Never set outside negative tests.
_corrupt_relu_adjoint = False


def ensure_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to the given shape, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def add(a, b) -> Tensor:
    """Elementwise sum with broadcasting."""
    ad, bd = _as_array(a), _as_array(b)
    tape = active_tape(a, b)
    out = Tensor(ad + bd, tape)
    if tape is not None:
        def backward():
            g = out.grad
            ga = _unbroadcast(g, ad.shape) if isinstance(a, Tensor) else None
            gb = _unbroadcast(g, bd.shape) if isinstance(b, Tensor) else None
            if ga is not None and ga is gb:
                gb = gb.copy()  # never hand one buffer to two accumulators
            if ga is not None:
                accumulate(a, ga)
            if gb is not None:
                accumulate(b, gb)
        tape.record(backward, out, [t for t in (a, b) if isinstance(t, Tensor)])
    return out


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting."""
    ad, bd = _as_array(a), _as_array(b)
    tape = active_tape(a, b)
    out = Tensor(ad * bd, tape)
    if tape is not None:
        def backward():
            g = out.grad
            if isinstance(a, Tensor):
                accumulate(a, _unbroadcast(g * bd, ad.shape))
            if isinstance(b, Tensor):
                accumulate(b, _unbroadcast(g * ad, bd.shape))
        tape.record(backward, out, [t for t in (a, b) if isinstance(t, Tensor)])
    return out


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    tape = active_tape(x)
    out = Tensor(x.data * s, tape)
    if tape is not None:
        tape.record(lambda: accumulate(x, out.grad * s), out, [x])
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product; adjoints da = g.bT, db = aT.g."""
    ad, bd = _as_array(a), _as_array(b)
    if ad.ndim != 2 or bd.ndim != 2:
        raise ValidationError(f"matmul needs 2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[1] != bd.shape[0]:
        raise ValidationError(f"matmul inner extents disagree: {ad.shape} x {bd.shape}")
    tape = active_tape(a, b)
    out = Tensor(ad @ bd, tape)
    if tape is not None:
        def backward():
            g = out.grad
            if isinstance(a, Tensor):
                accumulate(a, g @ bd.T)
            if isinstance(b, Tensor):
                accumulate(b, ad.T @ g)
        tape.record(backward, out, [t for t in (a, b) if isinstance(t, Tensor)])
    return out


def relu(x: Tensor) -> Tensor:
    tape = active_tape(x)
    out = Tensor(np.maximum(x.data, 0.0), tape)
    if tape is not None:
        mask = out.data > 0.0
        sign = -1.0 if _corrupt_relu_adjoint else 1.0
        tape.record(lambda: accumulate(x, sign * out.grad * mask), out, [x])
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    tape = active_tape(x)
    out = Tensor(x.data.reshape(shape), tape)
    if tape is not None:
        tape.record(lambda: accumulate(x, out.grad.reshape(x.shape)), out, [x])
    return out


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    tape = active_tape(x)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)), tape)
    if tape is not None:
        inverse = tuple(np.argsort(axes))
        tape.record(lambda: accumulate(x, out.grad.transpose(inverse)), out, [x])
    return out


def mean(x: Tensor, axis: tuple[int, ...], keepdims: bool = False) -> Tensor:
    axis = tuple(axis)
    tape = active_tape(x)
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims), tape)
    if tape is not None:
        count = 1
        for ax in axis:
            count *= x.shape[ax]

        def backward():
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axis)
            accumulate(x, np.broadcast_to(g / count, x.shape))
        tape.record(backward, out, [x])
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over the time and joint axes of a (N, C, T, V) tensor."""
    if x.ndim != 4:
        raise ValidationError(f"global_avg_pool expects a 4-D tensor, got shape {x.shape}")
    return mean(x, axis=(2, 3))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias along axis 1 of a >=2-D tensor."""
    if b.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ValidationError(f"bias shape {b.shape} does not match channel extent {x.shape[1]}")
    bshape = (1, b.shape[0]) + (1,) * (x.ndim - 2)
    tape = active_tape(x, b)
    out = Tensor(x.data + b.data.reshape(bshape), tape)
    if tape is not None:
        reduce_axes = tuple(i for i in range(x.ndim) if i != 1)

        def backward():
            g = out.grad
            accumulate(x, g)
            accumulate(b, g.sum(axis=reduce_axes))
        tape.record(backward, out, [x, b])
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w + b for a (N, F) input."""
    return add(matmul(x, w), b)


def partition_mix(x: Tensor, adj: np.ndarray, w: Tensor) -> Tensor:
    """Partition-wise spatial graph convolution.

    For each partition k the joint axis is aggregated with the (V, V)
    matrix adj[k] (out joint i sums adj[k][i, j] * x[..., j]) and the channel
    axis is mixed with w[k] of shape (out_channels, in_channels); the K
    partial results are summed.

    x: (N, C, T, V); adj: constant (K, V, V); w: (K, O, C).
    """
    adj = np.asarray(adj, dtype=np.float64)
    if adj.ndim != 3 or adj.shape[1] != adj.shape[2]:
        raise ValidationError(f"adjacency stack must be (K, V, V), got {adj.shape}")
    if x.ndim != 4 or x.shape[3] != adj.shape[1]:
        raise ValidationError(
            f"joint extent mismatch: input {x.shape} vs adjacency {adj.shape}")
    if w.ndim != 3 or w.shape[0] != adj.shape[0] or w.shape[2] != x.shape[1]:
        raise ValidationError(
            f"partition weights must be (K={adj.shape[0]}, out, in={x.shape[1]}), got {w.shape}")
    K = adj.shape[0]
    xd, wd = x.data, w.data
    n, c, t, v = xd.shape
    o = wd.shape[1]
    # aggregate joints per partition, then do one (O, K*C) x (K*C, N*T*V)
    # product instead of K small ones
    xa = np.tensordot(xd, adj, axes=([3], [2]))              # (N, C, T, K, Vi)
    xa2 = np.ascontiguousarray(xa.transpose(3, 1, 0, 2, 4)).reshape(K * c, n * t * v)
    w2 = np.ascontiguousarray(wd.transpose(1, 0, 2)).reshape(o, K * c)
    out_data = np.ascontiguousarray(
        (w2 @ xa2).reshape(o, n, t, v).transpose(1, 0, 2, 3))
    tape = active_tape(x, w)
    out = Tensor(out_data, tape)
    if tape is not None:
        def backward():
            g2 = np.ascontiguousarray(out.grad.transpose(1, 0, 2, 3)).reshape(o, -1)
            if w.tape is not None:
                dw2 = g2 @ xa2.T                             # (O, K*C)
                accumulate(w, dw2.reshape(o, K, c).transpose(1, 0, 2))
            if x.tape is not None:
                dxa = (w2.T @ g2).reshape(K, c, n, t, v).transpose(2, 1, 3, 0, 4)
                accumulate(x, np.tensordot(dxa, adj, axes=([3, 4], [0, 1])))
        tape.record(backward, out, [x, w])
    return out


def temporal_conv(x: Tensor, w: Tensor, stride: int = 1, pad: int | None = None) -> Tensor:
    """Convolution over the time axis, independent per joint column.

    x: (N, C, T, V); w: (O, C, Kt, 1) with odd Kt. ``pad`` defaults to
    (Kt - 1) / 2 which preserves T at stride 1. Output length is
    floor((T + 2 pad - Kt) / stride) + 1.
    """
    if x.ndim != 4:
        raise ValidationError(f"temporal_conv expects a 4-D input, got shape {x.shape}")
    if w.ndim != 4 or w.shape[3] != 1:
        raise ValidationError(f"temporal kernel must be (O, C, Kt, 1), got {w.shape}")
    O, C, Kt, _ = w.shape
    if Kt % 2 == 0:
        raise ValidationError(f"temporal kernel size must be odd, got {Kt}")
    if C != x.shape[1]:
        raise ValidationError(f"channel mismatch: input {x.shape[1]} vs kernel {C}")
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if pad is None:
        pad = (Kt - 1) // 2
    N, _, T, V = x.shape
    t_out = (T + 2 * pad - Kt) // stride + 1
    if t_out < 1:
        raise ValidationError(
            f"temporal_conv output length would be {t_out} for T={T}, Kt={Kt}, "
            f"stride={stride}, pad={pad}")
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (0, 0))) if pad else xd
    # im2col over the time axis: one (O, C*Kt) x (C*Kt, N*T'*V) product
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(N, C, t_out, Kt, V),
        strides=(s0, s1, s2 * stride, s2, s3), writeable=False)
    cols = np.ascontiguousarray(windows.transpose(1, 3, 0, 2, 4)).reshape(
        C * Kt, N * t_out * V)
    w2 = w.data.reshape(O, C * Kt)
    out_data = np.ascontiguousarray(
        (w2 @ cols).reshape(O, N, t_out, V).transpose(1, 0, 2, 3))
    tape = active_tape(x, w)
    out = Tensor(out_data, tape)
    if tape is not None:
        def backward():
            g2 = np.ascontiguousarray(out.grad.transpose(1, 0, 2, 3)).reshape(O, -1)
            if w.tape is not None:
                accumulate(w, (g2 @ cols.T).reshape(O, C, Kt, 1))
            if x.tape is not None:
                # backward data as a correlation of the (zero-stuffed)
                # output gradient with the time-flipped kernel: one GEMM
                t_up = stride * (t_out - 1) + 1
                g_pad = np.zeros((N, O, t_up + 2 * (Kt - 1), V))
                g_pad[:, :, Kt - 1: Kt - 1 + t_up: stride, :] = out.grad
                z0, z1, z2, z3 = g_pad.strides
                gwin = np.lib.stride_tricks.as_strided(
                    g_pad, shape=(N, O, t_up + Kt - 1, Kt, V),
                    strides=(z0, z1, z2, z2, z3), writeable=False)
                gcols = np.ascontiguousarray(gwin.transpose(1, 3, 0, 2, 4)).reshape(
                    O * Kt, -1)
                wf = np.ascontiguousarray(
                    w.data[:, :, ::-1, 0].transpose(1, 0, 2)).reshape(C, O * Kt)
                valid = t_up + Kt - 1
                dxp_v = (wf @ gcols).reshape(C, N, valid, V).transpose(1, 0, 2, 3)
                t_padded = T + 2 * pad
                if valid < t_padded:
                    dxp = np.zeros((N, C, t_padded, V))
                    dxp[:, :, :valid, :] = dxp_v
                else:
                    dxp = dxp_v
                dx = dxp[:, :, pad: pad + T, :] if pad else dxp
                accumulate(x, np.ascontiguousarray(dx) if pad else dx)
        tape.record(backward, out, [x, w])
    return out


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over all axes but axis 1 of a 4-D tensor.

    Train mode normalizes with batch statistics and updates the running
    buffers in place (factor ``momentum`` toward the batch value, unbiased
    variance).  Eval mode normalizes with the running buffers.  ``eps``
    keeps zero-variance channels finite.
    """
    if x.ndim != 4:
        raise ValidationError(f"batch_norm expects a 4-D tensor, got shape {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValidationError(
            f"gamma/beta must have shape ({C},), got {gamma.shape} and {beta.shape}")
    bshape = (1, C, 1, 1)
    xd = x.data
    axes = (0, 2, 3)
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        nred = xd.size // C
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * nred / (nred - 1) if nred > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    out_data = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    tape = active_tape(x, gamma, beta)
    out = Tensor(out_data, tape)
    if tape is not None:
        def backward():
            g = out.grad
            accumulate(beta, g.sum(axis=axes))
            accumulate(gamma, (g * xhat).sum(axis=axes))
            if x.tape is not None:
                dxhat = g * gamma.data.reshape(bshape)
                if training:
                    n = xd.size // C
                    s1 = dxhat.sum(axis=axes, keepdims=True)
                    s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                    dx = (inv.reshape(bshape) / n) * (n * dxhat - s1 - xhat * s2)
                else:
                    dx = dxhat * inv.reshape(bshape)
                accumulate(x, dx)
        tape.record(backward, out, [x, gamma, beta])
    return out


def dropout(x: Tensor, keep_prob: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: train mode keeps units with probability keep_prob
    and divides survivors by it; eval mode is the identity."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValidationError(f"keep probability must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x
    if rng is None:
        raise ValidationError("train-mode dropout needs a seeded random source")
    mask = (rng.random(x.shape) < keep_prob) / keep_prob
    tape = active_tape(x)
    out = Tensor(x.data * mask, tape)
    if tape is not None:
        tape.record(lambda: accumulate(x, out.grad * mask), out, [x])
    return out


def softmax(logits) -> np.ndarray:
    """Row-wise softmax of a (N, K) array; a plain value, never taped."""
    z = _as_array(logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under row-wise softmax.

    The recorded adjoint of the logits is (softmax - onehot) / batch.
    """
    y = np.asarray(labels)
    if logits.ndim != 2:
        raise ValidationError(f"logits must be (N, K), got shape {logits.shape}")
    n, k = logits.shape
    if y.shape != (n,) or not np.issubdtype(y.dtype, np.integer):
        raise ValidationError(f"labels must be {n} integers, got {y.shape} {y.dtype}")
    if y.min(initial=0) < 0 or y.max(initial=-1) >= k:
        bad = y[(y < 0) | (y >= k)][0]
        raise ValidationError(f"label index {bad} outside the {k}-class range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), y].mean()
    tape = active_tape(logits)
    out = Tensor(loss, tape)
    if tape is not None:
        probs = np.exp(logp)

        def backward():
            d = probs.copy()
            d[np.arange(n), y] -= 1.0
            accumulate(logits, float(out.grad) * d / n)
        tape.record(backward, out, [logits])
    return out
