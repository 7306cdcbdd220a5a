"""One chart of the atlas: injective decoder, analytic encoder, latent
density and per-chart evidence bounds.

A chart is the triple (decoder stack D, latent flow T, noise scales).  The
full inverse chart is D∘T; the chart map itself is T^{-1}∘E where the encoder
E is the algebraic left inverse of D.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .flows import InvertibleNet
from .optim import ParamStore

# -- latent density ---------------------------------------------------------

# per-dimension normalizer of the piecewise density: plateau + ramp + tail
# masses are 0.8, 0.105 and 0.0005 on each side
Z_Q = 2.0 * (0.8 + 0.105 + 0.0005)
LOG_Z_Q = math.log(Z_Q)

q_unnorm = ad.q_unnorm


def log_p_latent(z) -> np.ndarray:
    """Log density of the factorized latent distribution, per row."""
    z = np.asarray(z, dtype=np.float64)
    lq = np.log(q_unnorm(z))
    return lq.sum(axis=-1) - z.shape[-1] * LOG_Z_Q


def latent_ppf(u):
    """Inverse CDF of the per-coordinate latent density."""
    u = np.asarray(u, dtype=np.float64)
    a = 2.0 * u - 1.0
    sign = np.sign(a)
    m = np.abs(a) * (Z_Q / 2.0)
    # ramp piece: solve 2.375 t^2 - 4.8 t + (1.52 + m) = 0, root in [0.8, 1]
    disc = np.maximum(4.8 ** 2 - 4.0 * 2.375 * (1.52 + np.minimum(m, 0.905)), 0.0)
    t_ramp = (4.8 - np.sqrt(disc)) / (2.0 * 2.375)
    # tail piece
    m3 = np.clip(m - 0.905, 0.0, 0.0005 * (1.0 - 1e-15))
    t_tail = 1.0 - np.log1p(-m3 / 0.0005) / 100.0
    t = np.select([m <= 0.8, m <= 0.905], [m, t_ramp], default=t_tail)
    return sign * t


def sample_latent(rng: np.random.Generator, size) -> np.ndarray:
    return latent_ppf(rng.random(size))


# -- injective stages -------------------------------------------------------

class DenseStage:
    """Zero-padding injection followed by a dense invertible net.

    The pseudo-inverse of the zero-padding is exact coordinate truncation,
    so A†A = Id holds to machine precision.
    """

    def __init__(self, store, prefix, in_dim, out_dim, n_blocks, *,
                 hidden=64, n_hidden=2, rng=None):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.net = InvertibleNet(store, f"{prefix}/T", out_dim, n_blocks,
                                 hidden=hidden, n_hidden=n_hidden, rng=rng)

    def forward(self, h: Var) -> Var:
        if self.in_dim < self.out_dim:
            h = ad.zero_pad_cols(h, self.out_dim)
        return self.net.forward(h)

    def inverse(self, h: Var) -> Var:
        if len(h.shape) > 2:  # image coming down from a conv stage
            h = ad.reshape(h, (h.shape[0], self.out_dim))
        h = self.net.inverse(h)
        if self.in_dim < self.out_dim:
            h = ad.take_cols(h, self.in_dim)
        return h


class ConvStage:
    """Channel replication, convolutional coupling blocks, invertible
    upsampling.  Maps (side x side) images to (2*side x 2*side).

    The replication's pseudo-inverse is the mean over the four copies.
    """

    REPL = 4

    def __init__(self, store, prefix, side, n_blocks=3, *, hidden=64, rng=None):
        self.side = side
        self.net = InvertibleNet(store, f"{prefix}/T", self.REPL, n_blocks,
                                 conv=True, hidden=hidden, upsample=True,
                                 rng=rng)

    def forward(self, h: Var) -> Var:
        if len(h.shape) == 2:  # vector from the dense stage below
            h = ad.reshape(h, (h.shape[0], self.side, self.side, 1))
        h = ad.repeat_channels(h, self.REPL)
        return self.net.forward(h)

    def inverse(self, h: Var) -> Var:
        if len(h.shape) == 2:
            s = 2 * self.side
            h = ad.reshape(h, (h.shape[0], s, s, 1))
        h = self.net.inverse(h)
        return ad.channel_mean(h, self.REPL)


class ChartVAE:
    """One (decoder, encoder, latent flow) triple with noise scales."""

    # chart domain half-width in code space: essentially the support of the
    # latent prior (its mass beyond |t|=1 is the 0.05 exponential tail)
    code_domain = 1.0

    def __init__(self, store: ParamStore, prefix: str, d: int, n: int,
                 stages, latent_blocks=3, *, hidden=64, n_hidden=2,
                 sigma_x=0.05, sigma_z=0.01, x_offset=0.0, rng=None):
        self.store = store
        self.d = d
        self.n = n
        self.stages = stages
        self.sigma_x = sigma_x
        self.sigma_z = sigma_z
        # fixed ambient shift: zero-initialized flows start the decoder at
        # the origin, so data living around a constant level (gray image
        # background) is modeled as offset + flow(pad(z))
        self.x_offset = float(x_offset)
        self.latent_flow = InvertibleNet(store, f"{prefix}/latent", d,
                                         latent_blocks, hidden=hidden,
                                         n_hidden=n_hidden, rng=rng)

    # -- graph-level pieces (Var in, Var out) -------------------------------

    def dec_post(self, z: Var) -> Var:
        """D: z-space -> ambient (flattened)."""
        h = z
        for st in self.stages:
            h = st.forward(h)
        if len(h.shape) > 2:
            h = ad.reshape(h, (h.shape[0], self.n))
        if self.x_offset != 0.0:
            h = h + self.x_offset
        return h

    def enc_pre(self, x: Var) -> Var:
        """E = A1† T1^{-1} ... AL† TL^{-1}: ambient -> z-space."""
        h = x - self.x_offset if self.x_offset != 0.0 else x
        for st in reversed(self.stages):
            h = st.inverse(h)
        return h

    def decode_graph(self, code: Var) -> Var:
        return self.dec_post(self.latent_flow.forward(code))

    def encode_graph(self, x: Var) -> Var:
        return self.latent_flow.inverse(self.enc_pre(x))

    # -- numpy convenience ---------------------------------------------------

    def decode(self, code) -> np.ndarray:
        code = np.atleast_2d(np.asarray(code, dtype=np.float64))
        return self.decode_graph(Var(code)).value

    def encode(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self.encode_graph(Var(x)).value

    def project(self, x) -> np.ndarray:
        """pi = D∘E, an idempotent projection onto the chart's range."""
        return self.decode(self.encode(x))

    def membership(self, x) -> np.ndarray:
        """Diagnostic chart-domain score: inf-norm of the latent code."""
        return np.abs(self.encode(x)).max(axis=-1)

    # -- evidence bound ------------------------------------------------------

    def elbo_graph(self, x: Var, rng: np.random.Generator, nsamples=1,
                   scales=(1.0,)):
        """Monte-Carlo evidence bound, one Var of shape (B,) per scale.

        ``scales`` are the factors applied to the latent code inside the
        prior term; scale 1 is the plain bound, larger scales penalize codes
        outside the plateau of the latent density.  All scales share the
        same noise draws, so the scale-1 entry equals the plain bound
        bit-for-bit.
        """
        B = x.shape[0]
        zE = self.enc_pre(x)
        acc = [None] * len(scales)
        for _ in range(nsamples):
            zs = zE
            if self.sigma_z > 0.0:
                xi = rng.standard_normal((B, self.d))
                zs = zE + self.sigma_z * xi
            code, logdet = self.latent_flow.inverse(zs, with_logdet=True)
            recon = self.dec_post(zs)
            res = ad.vsum(ad.square(recon - x), axis=1)
            rec_term = res * (1.0 / (2.0 * self.sigma_x ** 2))
            for j, c in enumerate(scales):
                coded = code if c == 1.0 else code * float(c)
                prior = ad.vsum(ad.log_q(coded), axis=1) - self.d * LOG_Z_Q
                term = prior + logdet - rec_term
                acc[j] = term if acc[j] is None else acc[j] + term
        return [t * (1.0 / nsamples) for t in acc]

    def elbo(self, x, nsamples=8, rng=None, c=1.0) -> np.ndarray:
        """Evidence bound values for a batch (or single point) of inputs."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xv = Var(np.atleast_2d(x))
        if rng is None:
            rng = np.random.default_rng(0)
        vals = self.elbo_graph(xv, rng, nsamples=nsamples, scales=(c,))[0].value
        return float(vals[0]) if single else vals


# -- chart factories --------------------------------------------------------

def make_toy_chart(store, prefix, d, n, rng, *, dec_blocks=5, latent_blocks=3,
                   hidden=64, n_hidden=2, sigma_x=0.05, sigma_z=0.01):
    """L=1 chart for low-dimensional manifolds: zero-pad + dense flow."""
    stages = [DenseStage(store, f"{prefix}/stage0", d, n, dec_blocks,
                         hidden=hidden, n_hidden=n_hidden, rng=rng)]
    return ChartVAE(store, prefix, d, n, stages, latent_blocks,
                    hidden=hidden, n_hidden=n_hidden,
                    sigma_x=sigma_x, sigma_z=sigma_z, rng=rng)


def make_image_chart(store, prefix, d, side, rng, *, dense_blocks=3,
                     conv_blocks=3, latent_blocks=3, hidden=64, n_hidden=2,
                     sigma_x=0.1, sigma_z=0.01, x_offset=0.5, base_side=32):
    """Multiscale injective chart for side in {32, 64, 128}.

    Zero-pad to base_side^2, dense flow, then one convolutional
    stage (replicate channels, conv couplings, invertible upsampling) per
    factor-of-two between base_side and side.  ``x_offset`` centers the
    images at the background gray level so the zero-initialized decoder
    starts near the data.
    """
    if side % base_side != 0 or side // base_side not in (1, 2, 4):
        raise ValueError(f"side {side} must be base_side*(1|2|4)")
    stages = [DenseStage(store, f"{prefix}/stage0", d, base_side ** 2,
                         dense_blocks, hidden=hidden, n_hidden=n_hidden,
                         rng=rng)]
    s = base_side
    i = 1
    while s < side:
        stages.append(ConvStage(store, f"{prefix}/stage{i}", s,
                                n_blocks=conv_blocks, hidden=hidden, rng=rng))
        s *= 2
        i += 1
    return ChartVAE(store, prefix, d, side * side, stages, latent_blocks,
                    hidden=hidden, n_hidden=n_hidden,
                    sigma_x=sigma_x, sigma_z=sigma_z, x_offset=x_offset,
                    rng=rng)
