"""Differentiable operator set with analytic gradients.

Every op takes the tape first (None = forward only), Vars for
differentiable inputs and plain ndarrays for constants, and returns a Var.
Backward closures read the output gradient lazily, so un-needed branches
cost nothing.
"""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError, EmptyInputError, ShapeError, ValidationError
from ..sparsegrid import KernelMap
from .tape import Tape, Var

LOG_CLAMP = 1e-12
BN_EPS = 1e-5
LN_EPS = 1e-5
LEAKY_SLOPE = 0.01


def _same_shape(a: Var, b: Var, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


# -- arithmetic primitives ---------------------------------------------------

def add(tape: Tape | None, a: Var, b: Var) -> Var:
    _same_shape(a, b, "add")
    out = Var(a.value + b.value)
    if tape is not None:
        def step():
            if out.grad is None:
                return
            a.accumulate(out.grad)
            b.accumulate(out.grad)
        tape.record(step)
    return out


def scale(tape: Tape | None, a: Var, s: float) -> Var:
    out = Var(a.value * s)
    if tape is not None:
        def step():
            if out.grad is not None:
                a.accumulate(out.grad * s)
        tape.record(step)
    return out


def mul_const(tape: Tape | None, a: Var, m: np.ndarray) -> Var:
    """Elementwise product with a constant array (masking, sign flips)."""
    m = np.asarray(m, dtype=np.float64)
    out = Var(a.value * m)
    if tape is not None:
        def step():
            if out.grad is not None:
                a.accumulate(out.grad * m)
        tape.record(step)
    return out


def shift_const(tape: Tape | None, a: Var, c) -> Var:
    out = Var(a.value + np.asarray(c, dtype=np.float64))
    if tape is not None:
        def step():
            if out.grad is not None:
                a.accumulate(out.grad)
        tape.record(step)
    return out


def abs_(tape: Tape | None, a: Var) -> Var:
    """|a| with the subgradient sign(a) (0 at 0)."""
    out = Var(np.abs(a.value))
    if tape is not None:
        sign = np.sign(a.value)
        def step():
            if out.grad is not None:
                a.accumulate(out.grad * sign)
        tape.record(step)
    return out


def sum_all(tape: Tape | None, a: Var) -> Var:
    out = Var(a.value.sum())
    if tape is not None:
        def step():
            if out.grad is not None:
                a.accumulate(np.full_like(a.value, float(out.grad)))
        tape.record(step)
    return out


def sum_axis(tape: Tape | None, a: Var, axis: int) -> Var:
    out = Var(a.value.sum(axis=axis))
    if tape is not None:
        def step():
            if out.grad is not None:
                a.accumulate(np.expand_dims(out.grad, axis) * np.ones_like(a.value))
        tape.record(step)
    return out


def gather_rows(tape: Tape | None, a: Var, idx: np.ndarray) -> Var:
    idx = np.asarray(idx, dtype=np.int64)
    out = Var(a.value[idx])
    if tape is not None:
        def step():
            if out.grad is None:
                return
            g = np.zeros_like(a.value)
            np.add.at(g, idx, out.grad)  # idx may repeat
            a.accumulate(g)
        tape.record(step)
    return out


def stack_rows(tape: Tape | None, parts: list[Var]) -> Var:
    """Stack 1D Vars into a matrix; backward slices the gradient back."""
    out = Var(np.stack([p.value for p in parts], axis=0))
    if tape is not None:
        def step():
            if out.grad is None:
                return
            for i, p in enumerate(parts):
                p.accumulate(out.grad[i])
        tape.record(step)
    return out


def _concat(tape: Tape | None, parts: list[Var], axis: int) -> Var:
    out = Var(np.concatenate([p.value for p in parts], axis=axis))
    if tape is not None:
        sizes = [p.value.shape[axis] for p in parts]
        bounds = np.cumsum([0] + sizes)
        def step():
            if out.grad is None:
                return
            for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(lo, hi)
                p.accumulate(out.grad[tuple(sl)])
        tape.record(step)
    return out


def concat_rows(tape: Tape | None, parts: list[Var]) -> Var:
    return _concat(tape, parts, axis=0)


def concat_cols(tape: Tape | None, parts: list[Var]) -> Var:
    return _concat(tape, parts, axis=1)


def slice_cols(tape: Tape | None, a: Var, lo: int, hi: int) -> Var:
    if a.value.ndim != 2 or not (0 <= lo <= hi <= a.value.shape[1]):
        raise ShapeError(f"slice_cols: [{lo}:{hi}] invalid for shape {a.value.shape}")
    out = Var(a.value[:, lo:hi])
    if tape is not None:
        def step():
            if out.grad is not None:
                g = np.zeros_like(a.value)
                g[:, lo:hi] = out.grad
                a.accumulate(g)
        tape.record(step)
    return out


def reshape(tape: Tape | None, a: Var, shape) -> Var:
    out = Var(a.value.reshape(shape))
    if tape is not None:
        def step():
            if out.grad is not None:
                a.accumulate(out.grad.reshape(a.value.shape))
        tape.record(step)
    return out


def transpose(tape: Tape | None, a: Var, axes) -> Var:
    out = Var(a.value.transpose(axes))
    if tape is not None:
        inv = np.argsort(axes)
        def step():
            if out.grad is not None:
                a.accumulate(out.grad.transpose(inv))
        tape.record(step)
    return out


def matmul(tape: Tape | None, a: Var, b: Var) -> Var:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.value.shape} @ {b.value.shape}")
    out = Var(a.value @ b.value)
    if tape is not None:
        def step():
            if out.grad is None:
                return
            a.accumulate(out.grad @ b.value.T)
            b.accumulate(a.value.T @ out.grad)
        tape.record(step)
    return out


def bmm(tape: Tape | None, a: Var, b: Var) -> Var:
    if a.value.ndim != 3 or b.value.ndim != 3 or a.value.shape[2] != b.value.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.value.shape} @ {b.value.shape}")
    out = Var(a.value @ b.value)
    if tape is not None:
        def step():
            if out.grad is None:
                return
            a.accumulate(out.grad @ b.value.transpose(0, 2, 1))
            b.accumulate(a.value.transpose(0, 2, 1) @ out.grad)
        tape.record(step)
    return out


# -- activations and normalizations ------------------------------------------

def relu(tape: Tape | None, x: Var) -> Var:
    out = Var(np.maximum(x.value, 0.0))
    if tape is not None:
        mask = x.value > 0
        def step():
            if out.grad is not None:
                x.accumulate(out.grad * mask)
        tape.record(step)
    return out


def leaky_relu(tape: Tape | None, x: Var, slope: float = LEAKY_SLOPE) -> Var:
    out = Var(np.where(x.value > 0, x.value, slope * x.value))
    if tape is not None:
        factor = np.where(x.value > 0, 1.0, slope)
        def step():
            if out.grad is not None:
                x.accumulate(out.grad * factor)
        tape.record(step)
    return out


def softmax(tape: Tape | None, x: Var, axis: int = -1) -> Var:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Var(y)
    if tape is not None:
        def step():
            if out.grad is None:
                return
            dot = (out.grad * y).sum(axis=axis, keepdims=True)
            x.accumulate(y * (out.grad - dot))
        tape.record(step)
    return out


def linear(tape: Tape | None, x: Var, w: Var, b: Var | None = None) -> Var:
    if x.value.ndim != 2:
        raise ShapeError(f"linear: expected 2D input, got {x.value.shape}")
    if x.value.shape[1] != w.value.shape[0]:
        raise ShapeError(f"linear: input width {x.value.shape[1]} vs weight {w.value.shape}")
    y = x.value @ w.value
    if b is not None:
        y = y + b.value
    out = Var(y)
    if tape is not None:
        def step():
            if out.grad is None:
                return
            x.accumulate(out.grad @ w.value.T)
            w.accumulate(x.value.T @ out.grad)
            if b is not None:
                b.accumulate(out.grad.sum(axis=0))
        tape.record(step)
    return out


def layer_norm(tape: Tape | None, x: Var, gain: Var, bias: Var, eps: float = LN_EPS) -> Var:
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xh = xc * inv
    out = Var(gain.value * xh + bias.value)
    if tape is not None:
        def step():
            if out.grad is None:
                return
            lead = tuple(range(out.grad.ndim - 1))
            gain.accumulate((out.grad * xh).sum(axis=lead))
            bias.accumulate(out.grad.sum(axis=lead))
            gg = out.grad * gain.value
            x.accumulate(inv * (gg - gg.mean(axis=-1, keepdims=True)
                                - xh * (gg * xh).mean(axis=-1, keepdims=True)))
        tape.record(step)
    return out


def batch_norm(
    tape: Tape | None,
    x: Var,
    gain: Var,
    bias: Var,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    train: bool,
    momentum: float = 0.1,
    eps: float = BN_EPS,
) -> Var:
    """Batch normalization over rows; eval path whenever the batch has < 2 rows.

    ``running_mean``/``running_var`` are plain buffers updated in place in
    train mode (unbiased variance for the running estimate).
    """
    if x.value.ndim != 2:
        raise ShapeError(f"batch_norm: expected 2D input, got {x.value.shape}")
    n = x.value.shape[0]
    if train and n >= 2:
        mu = x.value.mean(axis=0)
        xc = x.value - mu
        var = (xc * xc).mean(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xh = xc * inv
        running_mean[:] = (1.0 - momentum) * running_mean + momentum * mu
        running_var[:] = (1.0 - momentum) * running_var + momentum * var * n / (n - 1)
        out = Var(gain.value * xh + bias.value)
        if tape is not None:
            def step():
                if out.grad is None:
                    return
                gain.accumulate((out.grad * xh).sum(axis=0))
                bias.accumulate(out.grad.sum(axis=0))
                gg = out.grad * gain.value
                x.accumulate(inv * (gg - gg.mean(axis=0)
                                    - xh * (gg * xh).mean(axis=0)))
            tape.record(step)
        return out
    # eval path: snapshot the buffers, later forwards may mutate them
    rm = running_mean.copy()
    inv = 1.0 / np.sqrt(running_var + eps)
    xh = (x.value - rm) * inv
    out = Var(gain.value * xh + bias.value)
    if tape is not None:
        def step():
            if out.grad is None:
                return
            gain.accumulate((out.grad * xh).sum(axis=0))
            bias.accumulate(out.grad.sum(axis=0))
            x.accumulate(out.grad * gain.value * inv)
        tape.record(step)
    return out


# -- sparse-tensor ops --------------------------------------------------------

def sparse_conv(tape: Tape | None, x: Var, w: Var, kmap: KernelMap) -> Var:
    """Sparse 3D convolution via a gathered column matrix and one matmul.

    ``w`` has shape (K^3, C_in, C_out); absent neighbors contribute zero.
    """
    k3, c_in, c_out = w.value.shape
    if k3 != kmap.offsets.shape[0]:
        raise ShapeError(f"sparse_conv: weight kernel size {k3} vs map {kmap.offsets.shape[0]}")
    if x.value.shape[1] != c_in:
        raise ShapeError(f"sparse_conv: input channels {x.value.shape[1]} vs weight {c_in}")
    n_out = kmap.n_out
    col = np.zeros((n_out, k3, c_in))
    for o, (out_rows, in_rows) in enumerate(kmap.pairs):
        col[out_rows, o] = x.value[in_rows]
    out = Var(col.reshape(n_out, k3 * c_in) @ w.value.reshape(k3 * c_in, c_out))
    if tape is not None:
        def step():
            if out.grad is None:
                return
            w.accumulate((col.reshape(n_out, k3 * c_in).T @ out.grad).reshape(w.value.shape))
            dcol = (out.grad @ w.value.reshape(k3 * c_in, c_out).T).reshape(n_out, k3, c_in)
            gx = np.zeros_like(x.value)
            for o, (out_rows, in_rows) in enumerate(kmap.pairs):
                gx[in_rows] += dcol[out_rows, o]  # in_rows unique per offset
            x.accumulate(gx)
        tape.record(step)
    return out


def global_avg_pool(tape: Tape | None, x: Var) -> Var:
    """Mean over all rows -> one feature vector."""
    if x.value.shape[0] == 0:
        raise EmptyInputError("global_avg_pool needs at least one row")
    n = x.value.shape[0]
    out = Var(x.value.mean(axis=0))
    if tape is not None:
        def step():
            if out.grad is not None:
                x.accumulate(np.tile(out.grad / n, (n, 1)))
        tape.record(step)
    return out


def segment_mean(tape: Tape | None, x: Var, starts: np.ndarray, counts: np.ndarray) -> Var:
    """Per-segment row means for contiguous segments (batched pooling)."""
    starts = np.asarray(starts, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size and counts.min() < 1:
        raise EmptyInputError("segment_mean: empty segment")
    out = Var(np.add.reduceat(x.value, starts, axis=0) / counts[:, None])
    if tape is not None:
        def step():
            if out.grad is not None:
                x.accumulate(np.repeat(out.grad / counts[:, None], counts, axis=0))
        tape.record(step)
    return out


# -- attention ----------------------------------------------------------------

def mhsa_encoder_layer(tape: Tape | None, x: Var, p: dict, heads: int) -> Var:
    """Post-norm transformer encoder layer.

    Multi-head self-attention (scale 1/sqrt(d_head)) + residual + layer norm,
    then a two-layer ReLU feedforward + residual + layer norm.
    """
    t, dim = x.value.shape
    if dim % heads != 0:
        raise ConfigError(f"token dim {dim} not divisible by heads {heads}")
    dh = dim // heads

    def split_heads(v: Var) -> Var:
        return transpose(tape, reshape(tape, v, (t, heads, dh)), (1, 0, 2))

    q = split_heads(linear(tape, x, p["wq"], p["bq"]))
    k = split_heads(linear(tape, x, p["wk"], p["bk"]))
    v = split_heads(linear(tape, x, p["wv"], p["bv"]))
    scores = scale(tape, bmm(tape, q, transpose(tape, k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    attn = softmax(tape, scores, axis=-1)
    ctx = reshape(tape, transpose(tape, bmm(tape, attn, v), (1, 0, 2)), (t, dim))
    h1 = layer_norm(tape, add(tape, x, linear(tape, ctx, p["wo"], p["bo"])),
                    p["ln1.gain"], p["ln1.bias"])
    ff = linear(tape, relu(tape, linear(tape, h1, p["ff1.w"], p["ff1.b"])),
                p["ff2.w"], p["ff2.b"])
    return layer_norm(tape, add(tape, h1, ff), p["ln2.gain"], p["ln2.bias"])


# -- losses -------------------------------------------------------------------

def _as_rows(value: np.ndarray) -> np.ndarray:
    return value.reshape(1, -1) if value.ndim == 1 else value


def cross_entropy(
    tape: Tape | None,
    pred: Var,
    target: np.ndarray,
    *,
    from_logits: bool = False,
    reduction: str = "mean",
) -> Var:
    """-sum(target * log pred) per row, reduced over rows.

    ``pred`` holds probabilities by default (log clamped at 1e-12) or raw
    logits with ``from_logits=True``.
    """
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"unknown reduction {reduction!r}")
    target = _as_rows(np.asarray(target, dtype=np.float64))
    rows = _as_rows(pred.value)
    if rows.shape != target.shape:
        raise ShapeError(f"cross_entropy: pred {rows.shape} vs target {target.shape}")
    if target.size and target.min() < 0:
        raise ValidationError("cross_entropy: target has negative mass")
    if target.size and np.abs(target.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValidationError("cross_entropy: target rows must sum to 1")
    n = rows.shape[0]
    w = 1.0 / n if reduction == "mean" else 1.0
    if from_logits:
        m = rows.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(rows - m).sum(axis=1, keepdims=True))
        out = Var(float((-(target * (rows - lse)).sum()) * w))
        if tape is not None:
            probs = np.exp(rows - lse)
            def step():
                if out.grad is not None:
                    pred.accumulate((float(out.grad) * w * (probs - target)).reshape(pred.value.shape))
            tape.record(step)
        return out
    clamped = np.maximum(rows, LOG_CLAMP)
    out = Var(float((-(target * np.log(clamped)).sum()) * w))
    if tape is not None:
        live = rows > LOG_CLAMP  # below the clamp the loss is flat
        def step():
            if out.grad is not None:
                g = float(out.grad) * w * (-(target / clamped) * live)
                pred.accumulate(g.reshape(pred.value.shape))
        tape.record(step)
    return out


def _lovasz_grad(fg_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Jaccard-loss Lovasz extension for sorted binary gt."""
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    if fg_sorted.size > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(tape: Tape | None, probs: Var, labels: np.ndarray) -> Var:
    """Lovasz-softmax loss, averaged over the classes present in ``labels``."""
    p = probs.value
    if p.ndim != 2:
        raise ShapeError(f"lovasz_softmax: expected (N, C) probabilities, got {p.shape}")
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.shape[0] != p.shape[0]:
        raise ShapeError("lovasz_softmax: labels length mismatch")
    if labels.size == 0:
        raise EmptyInputError("lovasz_softmax needs at least one point")
    if labels.min() < 0 or labels.max() >= p.shape[1]:
        raise ValidationError("lovasz_softmax: label outside class range")
    if np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValidationError("lovasz_softmax: probability rows must sum to 1")
    present = np.unique(labels)
    total = 0.0
    cache = []
    for c in present:
        fg = (labels == c).astype(np.float64)
        errors = np.where(fg > 0, 1.0 - p[:, c], p[:, c])
        order = np.argsort(-errors, kind="stable")
        grad_vec = _lovasz_grad(fg[order])
        total += float(errors[order] @ grad_vec)
        cache.append((int(c), fg, order, grad_vec))
    out = Var(total / present.size)
    if tape is not None:
        k = present.size
        def step():
            if out.grad is None:
                return
            g = np.zeros_like(p)
            for c, fg, order, grad_vec in cache:
                dm = np.empty_like(grad_vec)
                dm[order] = grad_vec
                g[:, c] += (float(out.grad) / k) * dm * np.where(fg > 0, -1.0, 1.0)
            probs.accumulate(g)
        tape.record(step)
    return out
