"""Invertible coupling networks with exact inverses and log-determinants.

The same blocks serve as the inner invertible maps of the injective decoders
and as the latent normalizing flow.  Scale outputs pass through a soft clamp
before exponentiation so inverses can never overflow.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .optim import ParamStore

CLAMP = 3.0
LEAKY_SLOPE = 0.01


def soft_clamp(s: Var) -> Var:
    # s -> 2*tanh(s/2)*CLAMP, bounded in (-2*CLAMP, 2*CLAMP), identity-ish at 0
    return ad.tanh(s * 0.5) * (2.0 * CLAMP)


class DenseSubnet:
    """MLP with leaky-rectifier hidden layers; final layer zero-initialized.

    An input dimension of zero is allowed: the subnet then degenerates to a
    learned constant vector, which keeps coupling blocks well-defined down to
    one-dimensional inputs.
    """

    def __init__(self, store: ParamStore, prefix: str, in_dim: int,
                 out_dim: int, hidden: int, n_hidden: int, rng):
        self.layers = []
        dims = [in_dim] + [hidden] * n_hidden + [out_dim]
        for i in range(len(dims) - 1):
            din, dout = dims[i], dims[i + 1]
            last = i == len(dims) - 2
            if last:
                w = np.zeros((din, dout))
            else:
                w = rng.normal(0.0, math.sqrt(2.0 / max(din, 1)), (din, dout))
            W = store.create(f"{prefix}/W{i}", w)
            b = store.create(f"{prefix}/b{i}", np.zeros(dout))
            self.layers.append((W, b, last))

    def __call__(self, x: Var) -> Var:
        h = x
        for W, b, last in self.layers:
            h = ad.matmul(h, W) + b
            if not last:
                h = ad.leaky_relu(h, LEAKY_SLOPE)
        return h


class ConvSubnet:
    """Convolutional subnet: 3x3 conv, leaky rectifier, 3x3 conv (zero-init)."""

    def __init__(self, store: ParamStore, prefix: str, in_ch: int,
                 out_ch: int, hidden_ch: int, rng):
        fan = 9 * max(in_ch, 1)
        self.W1 = store.create(f"{prefix}/K0",
                               rng.normal(0.0, math.sqrt(2.0 / fan),
                                          (3, 3, in_ch, hidden_ch)))
        self.b1 = store.create(f"{prefix}/c0", np.zeros(hidden_ch))
        self.W2 = store.create(f"{prefix}/K1", np.zeros((3, 3, hidden_ch, out_ch)))
        self.b2 = store.create(f"{prefix}/c1", np.zeros(out_ch))

    def __call__(self, x: Var) -> Var:
        h = ad.leaky_relu(ad.conv2d(x, self.W1, self.b1), LEAKY_SLOPE)
        return ad.conv2d(h, self.W2, self.b2)


class CouplingBlock:
    """Affine coupling layer updating both halves of its input.

    Forward, with input split z = (za, zb):
        xa = za * exp(s2(zb)) + t2(zb)
        xb = zb * exp(s1(xa)) + t1(xa)
    The inverse is algebraic; the log-determinant is the sum of the (clamped)
    scale outputs.  ``flip`` swaps the two halves, so stacking blocks with
    alternating flips lets every coordinate be transformed by every block.
    """

    def __init__(self, store: ParamStore, prefix: str, dim, *, conv=False,
                 hidden=64, n_hidden=2, flip=False, rng=None):
        self.conv = conv
        self.flip = flip
        if conv:
            C = dim  # channel count
            self.da = (C + 1) // 2
            self.db = C - self.da
            mk = lambda name, cin, cout: ConvSubnet(store, f"{prefix}/{name}",
                                                    cin, cout, hidden, rng)
        else:
            self.da = (dim + 1) // 2
            self.db = dim - self.da
            mk = lambda name, din, dout: DenseSubnet(store, f"{prefix}/{name}",
                                                     din, dout, hidden,
                                                     n_hidden, rng)
        if flip:
            self.da, self.db = self.db, self.da
        self.s1 = mk("s1", self.da, self.db)
        self.t1 = mk("t1", self.da, self.db)
        self.s2 = mk("s2", self.db, self.da)
        self.t2 = mk("t2", self.db, self.da)

    def _split(self, z: Var):
        if self.flip:
            zb, za = ad.split(z, [self.db, self.da], axis=-1)
        else:
            za, zb = ad.split(z, [self.da, self.db], axis=-1)
        return za, zb

    def _join(self, xa: Var, xb: Var) -> Var:
        parts = [xb, xa] if self.flip else [xa, xb]
        return ad.concat(parts, axis=-1)

    def _sum_feats(self, v: Var) -> Var:
        # per-sample sum over all non-batch axes
        axes = tuple(range(1, len(v.shape)))
        return ad.vsum(v, axis=axes) if axes else v

    def forward(self, z: Var, with_logdet=False):
        za, zb = self._split(z)
        s2 = soft_clamp(self.s2(zb))
        xa = za * ad.exp(s2) + self.t2(zb)
        s1 = soft_clamp(self.s1(xa))
        xb = zb * ad.exp(s1) + self.t1(xa)
        x = self._join(xa, xb)
        if with_logdet:
            return x, self._sum_feats(s1) + self._sum_feats(s2)
        return x

    def inverse(self, x: Var, with_logdet=False):
        xa, xb = self._split(x)
        s1 = soft_clamp(self.s1(xa))
        zb = (xb - self.t1(xa)) * ad.exp(-s1)
        s2 = soft_clamp(self.s2(zb))
        za = (xa - self.t2(zb)) * ad.exp(-s2)
        z = self._join(za, zb)
        if with_logdet:
            return z, -(self._sum_feats(s1) + self._sum_feats(s2))
        return z


class InvertibleNet:
    """A stack of coupling blocks, optionally followed by depth-to-space.

    The trailing rearrangement is a pure index permutation (volume
    preserving), used as the invertible upsampling of the image stages.
    """

    def __init__(self, store: ParamStore, prefix: str, dim, n_blocks, *,
                 conv=False, hidden=64, n_hidden=2, upsample=False, rng=None):
        self.blocks = [
            CouplingBlock(store, f"{prefix}/block{i}", dim, conv=conv,
                          hidden=hidden, n_hidden=n_hidden,
                          flip=bool(i % 2), rng=rng)
            for i in range(n_blocks)
        ]
        self.upsample = upsample

    def forward(self, z: Var, with_logdet=False):
        logdet = None
        x = z
        for blk in self.blocks:
            if with_logdet:
                x, ld = blk.forward(x, with_logdet=True)
                logdet = ld if logdet is None else logdet + ld
            else:
                x = blk.forward(x)
        if self.upsample:
            x = ad.depth_to_space(x, 2)
        if with_logdet:
            if logdet is None:
                logdet = ad.constant(np.zeros(x.shape[0]))
            return x, logdet
        return x

    def inverse(self, x: Var, with_logdet=False):
        if self.upsample:
            x = ad.space_to_depth(x, 2)
        logdet = None
        z = x
        for i, blk in enumerate(reversed(self.blocks)):
            if with_logdet:
                z, ld = blk.inverse(z, with_logdet=True)
                logdet = ld if logdet is None else logdet + ld
            else:
                z = blk.inverse(z)
            if not np.all(np.isfinite(z.value)):
                raise FloatingPointError(
                    f"coupling inverse overflow in block {len(self.blocks) - 1 - i}")
        if with_logdet:
            if logdet is None:
                logdet = ad.constant(np.zeros(z.shape[0]))
            return z, logdet
        return z
