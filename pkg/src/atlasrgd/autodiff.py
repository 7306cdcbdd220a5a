"""Minimal reverse-mode differentiation engine on dense float64 numpy arrays.

The primitive set is fixed and small: affine maps, elementwise nonlinearities,
slicing/concatenation, reductions, 2D convolution and a few shape
rearrangements.  Recording happens on an explicit :class:`Tape`; the backward
pass walks the tape in exact reverse creation order.  A lightweight
forward-sensitivity channel (``tan``) rides along with the values so that
Jacobian-vector products of a recorded function come out of the same code
path that computes the values.
"""

from __future__ import annotations

import numpy as np
from scipy import signal


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.nodes = []        # (out Var, parents tuple, vjp callable)
        self.output = None

    def __len__(self):
        return len(self.nodes)


_ACTIVE_TAPE: Tape | None = None


class recording:
    """Context manager activating a tape for primitive recording."""

    def __init__(self, tape: Tape):
        self.tape = tape

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self.tape
        return self.tape

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False


class Var:
    """A dense float64 array with an optional gradient and tangent buffer.

    ``tan``, when present, has shape ``(T,) + value.shape`` and carries T
    directional derivatives propagated forward alongside the value.
    """

    __slots__ = ("value", "grad", "tan")

    def __init__(self, value, tan=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.tan = tan

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


def constant(x) -> Var:
    return _wrap(x)


def _emit(value, parents, vjp, tan=None) -> Var:
    out = Var(value, tan)
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.nodes.append((out, parents, vjp))
    return out


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------

def add(a: Var, b: Var) -> Var:
    val = a.value + b.value
    tan = None
    if a.tan is not None or b.tan is not None:
        ta = a.tan if a.tan is not None else 0.0
        tb = b.tan if b.tan is not None else 0.0
        tan = ta + tb

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return _emit(val, (a, b), vjp, tan)


def sub(a: Var, b: Var) -> Var:
    val = a.value - b.value
    tan = None
    if a.tan is not None or b.tan is not None:
        ta = a.tan if a.tan is not None else 0.0
        tb = b.tan if b.tan is not None else 0.0
        tan = ta - tb

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return _emit(val, (a, b), vjp, tan)


def mul(a: Var, b: Var) -> Var:
    val = a.value * b.value
    tan = None
    if a.tan is not None or b.tan is not None:
        tan = 0.0
        if a.tan is not None:
            tan = a.tan * b.value
        if b.tan is not None:
            tan = tan + a.value * b.tan

    def vjp(g):
        return (_unbroadcast(g * b.value, a.value.shape),
                _unbroadcast(g * a.value, b.value.shape))

    return _emit(val, (a, b), vjp, tan)


def matmul(a: Var, b: Var) -> Var:
    if a.value.shape[-1] != b.value.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")
    val = a.value @ b.value
    tan = None
    if a.tan is not None or b.tan is not None:
        tan = 0.0
        if a.tan is not None:
            tan = a.tan @ b.value
        if b.tan is not None:
            tan = tan + a.value @ b.tan

    def vjp(g):
        ga = g @ b.value.T
        gb = a.value.T @ g if a.value.ndim > 1 else np.outer(a.value, g)
        return ga.reshape(a.value.shape), gb.reshape(b.value.shape)

    return _emit(val, (a, b), vjp, tan)


def exp(a: Var) -> Var:
    val = np.exp(a.value)
    tan = a.tan * val if a.tan is not None else None

    def vjp(g):
        return (g * val,)

    return _emit(val, (a,), vjp, tan)


def log(a: Var) -> Var:
    val = np.log(a.value)
    tan = a.tan / a.value if a.tan is not None else None

    def vjp(g):
        return (g / a.value,)

    return _emit(val, (a,), vjp, tan)


def tanh(a: Var) -> Var:
    val = np.tanh(a.value)
    d = 1.0 - val * val
    tan = a.tan * d if a.tan is not None else None

    def vjp(g):
        return (g * d,)

    return _emit(val, (a,), vjp, tan)


def leaky_relu(a: Var, slope: float = 0.01) -> Var:
    d = np.where(a.value > 0.0, 1.0, slope)
    val = a.value * d
    tan = a.tan * d if a.tan is not None else None

    def vjp(g):
        return (g * d,)

    return _emit(val, (a,), vjp, tan)


def square(a: Var) -> Var:
    val = a.value * a.value
    tan = 2.0 * a.value * a.tan if a.tan is not None else None

    def vjp(g):
        return (2.0 * g * a.value,)

    return _emit(val, (a,), vjp, tan)


def vsum(a: Var, axis=None) -> Var:
    val = a.value.sum(axis=axis)
    tan = a.tan.sum(axis=_shift_axis(axis)) if a.tan is not None else None

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy(),)

    return _emit(val, (a,), vjp, tan)


def _shift_axis(axis):
    if axis is None:
        return None
    if isinstance(axis, int):
        return axis + 1 if axis >= 0 else axis
    return tuple(ax + 1 if ax >= 0 else ax for ax in axis)


def vmean(a: Var, axis=None) -> Var:
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(vsum(a, axis=axis), _wrap(1.0 / n))


def concat(parts, axis=-1) -> Var:
    parts = [_wrap(p) for p in parts]
    val = np.concatenate([p.value for p in parts], axis=axis)
    tan = None
    if any(p.tan is not None for p in parts):
        T = next(p.tan.shape[0] for p in parts if p.tan is not None)
        blocks = [p.tan if p.tan is not None
                  else np.zeros((T,) + p.value.shape) for p in parts]
        tan = np.concatenate(blocks, axis=_shift_axis(axis))
    sizes = [p.value.shape[axis] for p in parts]
    idx = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, idx, axis=axis))

    return _emit(val, tuple(parts), vjp, tan)


def split(a: Var, sizes, axis=-1):
    """Split along ``axis`` into chunks of the given sizes."""
    if sum(sizes) != a.value.shape[axis]:
        raise ValueError(
            f"split sizes {sizes} do not cover axis {axis} of {a.value.shape}")
    idx = np.cumsum(sizes)[:-1]
    vals = np.split(a.value, idx, axis=axis)
    tans = ([None] * len(sizes) if a.tan is None
            else np.split(a.tan, idx, axis=_shift_axis(axis)))
    outs = []
    for i, v in enumerate(vals):
        def vjp(g, i=i, v=v):
            full = [np.zeros_like(w) for w in vals]
            full[i] = g
            return (np.concatenate(full, axis=axis),)
        outs.append(_emit(v, (a,), vjp, tans[i]))
    return tuple(outs)


def reshape(a: Var, shape) -> Var:
    val = a.value.reshape(shape)
    tan = a.tan.reshape((a.tan.shape[0],) + val.shape) if a.tan is not None else None

    def vjp(g):
        return (g.reshape(a.value.shape),)

    return _emit(val, (a,), vjp, tan)


def zero_pad_cols(a: Var, n: int) -> Var:
    """Append zero columns on the last axis up to width ``n``."""
    d = a.value.shape[-1]
    if n < d:
        raise ValueError(f"cannot pad {a.value.shape} down to width {n}")
    pad = [(0, 0)] * (a.value.ndim - 1) + [(0, n - d)]
    val = np.pad(a.value, pad)
    tan = np.pad(a.tan, [(0, 0)] + pad) if a.tan is not None else None

    def vjp(g):
        return (g[..., :d],)

    return _emit(val, (a,), vjp, tan)


def take_cols(a: Var, n: int) -> Var:
    """Keep the first ``n`` columns of the last axis (adjoint of zero_pad_cols)."""
    val = a.value[..., :n]
    tan = a.tan[..., :n] if a.tan is not None else None

    def vjp(g):
        pad = [(0, 0)] * (a.value.ndim - 1) + [(0, a.value.shape[-1] - n)]
        return (np.pad(g, pad),)

    return _emit(val, (a,), vjp, tan)


# ---------------------------------------------------------------------------
# image primitives: convolution, channel ops, space/depth rearrangement
# all image tensors are (B, H, W, C)
# ---------------------------------------------------------------------------

def _conv_same(x, w):
    """Correlate (B,H,W,Cin) with (kh,kw,Cin,Cout), zero 'same' padding."""
    B, H, W, Cin = x.shape
    kh, kw, _, Cout = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # windows: (B, H, W, Cin, kh, kw)
    return np.einsum("bhwcij,ijco->bhwo", windows, w, optimize=True)


def conv2d(x: Var, w: Var, b: Var | None = None) -> Var:
    """'Same' 2D convolution (cross-correlation) with learnable kernel.

    x: (B,H,W,Cin), w: (kh,kw,Cin,Cout), b: (Cout,) optional.
    """
    if x.value.shape[-1] != w.value.shape[2]:
        raise ValueError(
            f"conv2d channel mismatch: input {x.value.shape} kernel {w.value.shape}")
    val = _conv_same(x.value, w.value)
    if b is not None:
        val = val + b.value
    tan = None
    if x.tan is not None:
        T = x.tan.shape[0]
        flat = x.tan.reshape((-1,) + x.value.shape[1:])
        tan = _conv_same(flat, w.value).reshape((T,) + val.shape)

    kh, kw, Cin, Cout = w.value.shape

    def vjp(g):
        # grad wrt input: correlate g with spatially flipped kernel, swapped io
        wf = w.value[::-1, ::-1].transpose(0, 1, 3, 2)
        gx = _conv_same(g, wf)
        # grad wrt kernel
        B, H, W, _ = x.value.shape
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x.value, ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0)))
        windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        gw = np.einsum("bhwcij,bhwo->ijco", windows, g, optimize=True)
        if b is not None:
            gb = g.sum(axis=(0, 1, 2))
            return gx, gw, gb
        return gx, gw

    parents = (x, w) if b is None else (x, w, b)
    return _emit(val, parents, vjp, tan)


def blur2d(x: Var, kernel: np.ndarray, pad_value: float) -> Var:
    """Fixed-kernel 'same' convolution with constant padding.

    x: (B,H,W) single-channel images; kernel: (kh,kw) constant array.
    The padding constant contributes an additive offset; the homogeneous
    (linear) part has the zero-padded correlation as its exact adjoint.
    """
    val = _blur_forward(x.value, kernel, pad_value)
    tan = None
    if x.tan is not None:
        T = x.tan.shape[0]
        flat = x.tan.reshape((-1,) + x.value.shape[1:])
        tan = _blur_forward(flat, kernel, 0.0).reshape((T,) + val.shape)

    def vjp(g):
        return (_blur_adjoint(g, kernel),)

    return _emit(val, (x,), vjp, tan)


def _blur_forward(x, kernel, pad_value):
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    pads = ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw))
    xp = np.pad(x, pads, constant_values=pad_value)
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        out[i] = signal.fftconvolve(xp[i], kernel[::-1, ::-1], mode="valid")
    return out


def _blur_adjoint(g, kernel):
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    # adjoint of crop-after-pad correlation: zero-pad g on the opposite sides
    pads = ((0, 0), (kh - 1 - ph, ph), (kw - 1 - pw, pw))
    gp = np.pad(g, pads)
    out = np.empty_like(g)
    for i in range(g.shape[0]):
        out[i] = signal.fftconvolve(gp[i], kernel, mode="valid")
    return out


def repeat_channels(x: Var, r: int) -> Var:
    """Replicate each channel r times: (B,H,W,C) -> (B,H,W,C*r)."""
    val = np.repeat(x.value, r, axis=-1)
    tan = np.repeat(x.tan, r, axis=-1) if x.tan is not None else None
    C = x.value.shape[-1]

    def vjp(g):
        return (g.reshape(g.shape[:-1] + (C, r)).sum(axis=-1),)

    return _emit(val, (x,), vjp, tan)


def channel_mean(x: Var, r: int) -> Var:
    """Mean over groups of r channels: (B,H,W,C*r) -> (B,H,W,C)."""
    C = x.value.shape[-1] // r
    val = x.value.reshape(x.value.shape[:-1] + (C, r)).mean(axis=-1)
    tan = None
    if x.tan is not None:
        tan = x.tan.reshape(x.tan.shape[:-1] + (C, r)).mean(axis=-1)

    def vjp(g):
        return (np.repeat(g, r, axis=-1) / r,)

    return _emit(val, (x,), vjp, tan)


def space_to_depth(x: Var, block: int = 2) -> Var:
    """(B,H,W,C) -> (B,H/b,W/b,C*b*b), a pure index permutation."""
    val = _s2d(x.value, block)
    tan = None
    if x.tan is not None:
        T = x.tan.shape[0]
        flat = x.tan.reshape((-1,) + x.value.shape[1:])
        tan = _s2d(flat, block).reshape((T,) + val.shape)

    def vjp(g):
        return (_d2s(g, block),)

    return _emit(val, (x,), vjp, tan)


def depth_to_space(x: Var, block: int = 2) -> Var:
    """(B,H,W,C*b*b) -> (B,H*b,W*b,C), inverse of space_to_depth."""
    val = _d2s(x.value, block)
    tan = None
    if x.tan is not None:
        T = x.tan.shape[0]
        flat = x.tan.reshape((-1,) + x.value.shape[1:])
        tan = _d2s(flat, block).reshape((T,) + val.shape)

    def vjp(g):
        return (_s2d(g, block),)

    return _emit(val, (x,), vjp, tan)


def _s2d(x, b):
    B, H, W, C = x.shape
    x = x.reshape(B, H // b, b, W // b, b, C)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(B, H // b, W // b, b * b * C)


def _d2s(x, b):
    B, H, W, C = x.shape
    c = C // (b * b)
    x = x.reshape(B, H, W, b, b, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(B, H * b, W * b, c)


# ---------------------------------------------------------------------------
# latent density primitive
# ---------------------------------------------------------------------------

# piecewise density q (unnormalized): plateau 1 on |t|<0.8, linear ramp
# 4.8-4.75|t| on 0.8<=|t|<=1, tail 0.05*exp(-100(|t|-1)) beyond
Q_NORMALIZER = 2.0 * (0.8 + 0.105 + 0.0005)


def q_unnorm(t):
    """Unnormalized latent density, elementwise on plain arrays."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    return np.where(t < 0.8, 1.0,
                    np.where(t <= 1.0, 4.8 - 4.75 * t,
                             0.05 * np.exp(-100.0 * (t - 1.0))))


def log_q(a: Var) -> Var:
    """Elementwise log of the unnormalized latent density.

    Kinks at |t|=0.8 and |t|=1 take the left-branch subgradient.
    """
    t = np.abs(a.value)
    s = np.sign(a.value)
    ramp = np.clip(4.8 - 4.75 * t, 1e-300, None)
    val = np.where(t < 0.8, 0.0,
                   np.where(t <= 1.0, np.log(ramp),
                            np.log(0.05) - 100.0 * (t - 1.0)))
    d = np.where(t < 0.8, 0.0,
                 np.where(t <= 1.0, -4.75 / ramp, -100.0)) * s
    tan = a.tan * d if a.tan is not None else None

    def vjp(g):
        return (g * d,)

    return _emit(val, (a,), vjp, tan)


# ---------------------------------------------------------------------------
# record / backward
# ---------------------------------------------------------------------------

def forward_record(builder, *inputs):
    """Record ``builder(*vars)`` on a fresh tape.

    Returns ``(output, tape, input_vars)``.  ``builder`` receives one Var per
    input array and must build its result from the primitives above.
    """
    ins = []
    for x in inputs:
        v = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ValueError("forward_record: non-finite input")
        ins.append(Var(v))
    tape = Tape()
    with recording(tape):
        out = builder(*ins)
    if not np.all(np.isfinite(out.value)):
        raise FloatingPointError("forward_record produced non-finite output")
    tape.output = out
    return out, tape, ins


def backward(tape: Tape, seed=None):
    """Reverse sweep over ``tape`` accumulating gradients into leaf Vars."""
    out = tape.output
    if out is None:
        if not tape.nodes:
            return
        out = tape.nodes[-1][0]
    if seed is None:
        if out.value.ndim != 0 and out.value.size != 1:
            raise ValueError(
                f"backward on non-scalar output of shape {out.value.shape} "
                "requires an explicit seed")
        seed = np.ones_like(out.value)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != out.value.shape:
            raise ValueError(
                f"seed shape {seed.shape} does not match output {out.value.shape}")
    out.accumulate(seed)
    for node_out, parents, vjp in reversed(tape.nodes):
        if node_out.grad is None:
            continue
        grads = vjp(node_out.grad)
        for p, g in zip(parents, grads):
            if g is not None:
                p.accumulate(g)
