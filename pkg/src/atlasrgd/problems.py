"""Datasets, objectives and forward operators for the experiments.

Five low-dimensional toy manifolds with their test objectives, the rotated
bright-bar image manifold, and the Gaussian-blur forward operator with its
adjoint-based gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var

# geometry constants (where the source material is silent, values are fixed
# here and validated by the samplers' implicit-equation tests)
TWO_CIRCLE_CENTERS = np.array([[1.5, 0.0], [-1.5, 0.0]])
RING_RADII = (0.7, 1.3)
TORUS_R, TORUS_r = 3.0, 1.0
SWISS_T = (1.5 * np.pi, 4.5 * np.pi)
SWISS_H = (0.0, 4.0)
TOY_NOISE = 0.02

# charts per manifold
TOY_CHART_COUNTS = {"two_circles": 4, "ring": 2, "sphere": 2,
                    "swiss_roll": 4, "torus": 6}
TOY_DIMS = {"two_circles": (1, 2), "ring": (2, 2), "sphere": (2, 3),
            "swiss_roll": (2, 3), "torus": (2, 3)}


@dataclass
class ToyManifoldSpec:
    kind: str
    n_samples: int = 2000
    noise: float = TOY_NOISE

    def __post_init__(self):
        if self.kind not in TOY_CHART_COUNTS:
            raise ValueError(f"unknown toy manifold: {self.kind}")

    @property
    def n_charts(self):
        return TOY_CHART_COUNTS[self.kind]

    @property
    def dims(self):
        return TOY_DIMS[self.kind]


def sample_toy(spec: ToyManifoldSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw on the manifold plus isotropic Gaussian noise."""
    N = spec.n_samples
    k = spec.kind
    if k == "two_circles":
        t = rng.uniform(0.0, 2.0 * np.pi, N)
        which = rng.integers(0, 2, N)
        X = TWO_CIRCLE_CENTERS[which] + np.stack([np.cos(t), np.sin(t)], axis=1)
    elif k == "ring":
        r0, r1 = RING_RADII
        r = np.sqrt(rng.uniform(r0 ** 2, r1 ** 2, N))  # area-uniform
        t = rng.uniform(0.0, 2.0 * np.pi, N)
        X = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
    elif k == "sphere":
        X = rng.normal(0.0, 1.0, (N, 3))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
    elif k == "swiss_roll":
        t = rng.uniform(*SWISS_T, N)
        h = rng.uniform(*SWISS_H, N)
        raw = np.stack([t * np.cos(t), h, t * np.sin(t)], axis=1)
        X = _swiss_scale(raw)
    elif k == "torus":
        # rejection-sample the angle along the tube for surface uniformity
        u = rng.uniform(0.0, 2.0 * np.pi, 2 * N)
        keep = rng.uniform(0.0, 1.0, 2 * N) < (TORUS_R + TORUS_r * np.cos(u)) / (TORUS_R + TORUS_r)
        u = u[keep][:N]
        while u.size < N:
            extra = rng.uniform(0.0, 2.0 * np.pi, N)
            ok = rng.uniform(0.0, 1.0, N) < (TORUS_R + TORUS_r * np.cos(extra)) / (TORUS_R + TORUS_r)
            u = np.concatenate([u, extra[ok]])[:N]
        v = rng.uniform(0.0, 2.0 * np.pi, N)
        X = np.stack([(TORUS_R + TORUS_r * np.cos(u)) * np.cos(v),
                      (TORUS_R + TORUS_r * np.cos(u)) * np.sin(v),
                      TORUS_r * np.sin(u)], axis=1)
    if spec.noise > 0:
        X = X + rng.normal(0.0, spec.noise, X.shape)
    return X


def _swiss_scale(raw):
    # map the raw roll into [-2, 2]^3; the scale is fixed, not data-dependent
    t0, t1 = SWISS_T
    lim = t1  # |t cos t|, |t sin t| <= t1
    out = raw.copy()
    out[:, 0] = raw[:, 0] * (2.0 / lim)
    out[:, 2] = raw[:, 2] * (2.0 / lim)
    out[:, 1] = (raw[:, 1] - 2.0)  # height [0,4] -> [-2,2]
    return out


def toy_objective(kind: str):
    """Objective F, gradient, and the prescribed initial points."""
    if kind == "two_circles":
        F = lambda x: float(x[1])
        gradF = lambda x: np.array([0.0, 1.0])
        inits = []
        for x0 in (np.array([0.2, 1.0]), np.array([-0.2, 1.0])):
            u = x0 / np.linalg.norm(x0)
            inits.append(u + np.array([1.5, 0.0]))
            inits.append(u - np.array([1.5, 0.0]))
        return F, gradF, np.array(inits)
    if kind == "ring":
        c = np.array([-1.0, 0.0])
        F = lambda x: float(np.sum((x - c) ** 2))
        gradF = lambda x: 2.0 * (x - c)
        return F, gradF, np.array([[1.0, 0.4], [1.0, -0.4]])
    if kind == "sphere":
        c = np.array([0.0, 0.0, -2.0])
        F = lambda x: float(np.sum((x - c) ** 2))
        gradF = lambda x: 2.0 * (x - c)
        pts = [np.array([0.3 * np.cos(np.pi * k / 5), 0.3 * np.sin(np.pi * k / 5), 1.0])
               for k in range(10)]
        inits = np.array([p / np.linalg.norm(p) for p in pts])
        return F, gradF, inits
    if kind == "torus":
        c = np.array([-5.0, 0.0, 0.0])
        F = lambda x: float(np.sum((x - c) ** 2))
        gradF = lambda x: 2.0 * (x - c)
        return F, gradF, None  # initial points drawn from the training set
    raise ValueError(f"no objective defined for manifold {kind}")


# -- rotated-bar image manifold ----------------------------------------------

@dataclass
class BarImageSpec:
    side: int = 128
    length_frac: float = 0.6
    width_frac: float = 0.15
    foreground: float = 0.9
    background: float = 0.4
    supersample: int = 4


def render_bar(spec: BarImageSpec, angle: float) -> np.ndarray:
    """Anti-aliased centered bar rotated by ``angle`` (taken mod pi)."""
    s = spec.side
    ss = spec.supersample
    angle = float(angle) % np.pi
    half_len = spec.length_frac * s / 2.0
    half_wid = spec.width_frac * s / 2.0
    # subpixel sample coordinates relative to the image center
    coords = (np.arange(s * ss) + 0.5) / ss - s / 2.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    ca, sa = np.cos(angle), np.sin(angle)
    u = xx * ca + yy * sa      # along the bar
    v = -xx * sa + yy * ca     # across the bar
    inside = (np.abs(u) <= half_len) & (np.abs(v) <= half_wid)
    img = np.where(inside, spec.foreground, spec.background)
    img = img.reshape(s, ss, s, ss).mean(axis=(1, 3))
    return img


def sample_bars(spec: BarImageSpec, n: int, rng: np.random.Generator,
                return_angles=False):
    """n bar images at uniform random angles, flattened rows in [0,1]."""
    angles = rng.uniform(0.0, np.pi, n)
    X = np.stack([render_bar(spec, a).reshape(-1) for a in angles])
    if return_angles:
        return X, angles
    return X


# -- Gaussian blur forward operator --------------------------------------------

def gaussian_kernel(size=30, std=15.0) -> np.ndarray:
    c = (size - 1) / 2.0
    x = np.arange(size) - c
    g = np.exp(-x ** 2 / (2.0 * std ** 2))
    k = np.outer(g, g)
    return k / k.sum()


@dataclass
class BlurOperator:
    """Same-size Gaussian blur with constant padding; linear up to the
    padding offset."""

    side: int
    kernel_size: int = 30
    kernel_std: float = 15.0
    pad_value: float = 0.5
    noise_std: float = 0.1

    def __post_init__(self):
        self.kernel = gaussian_kernel(self.kernel_size, self.kernel_std)

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] == self.side * self.side:
            x = x.reshape(x.shape[:-1] + (self.side, self.side))
        if x.shape[-2:] != (self.side, self.side):
            raise ValueError(
                f"image shape {x.shape} does not match side {self.side}")
        return x

    def apply(self, x) -> np.ndarray:
        """Forward blur; accepts (side, side) or flattened images."""
        x = self._check(x)
        single = x.ndim == 2
        xb = x[None] if single else x
        out = ad.blur2d(Var(xb), self.kernel, self.pad_value).value
        return out[0] if single else out

    def apply_graph(self, x: Var) -> Var:
        return ad.blur2d(x, self.kernel, self.pad_value)

    def adjoint(self, y) -> np.ndarray:
        """Adjoint of the homogeneous (linear) part of the blur."""
        y = self._check(y)
        single = y.ndim == 2
        yb = y[None] if single else y
        out = ad._blur_adjoint(yb, self.kernel)
        return out[0] if single else out

    def observe(self, x, rng: np.random.Generator) -> np.ndarray:
        """Blur plus white Gaussian noise."""
        y = self.apply(x)
        return y + rng.normal(0.0, self.noise_std, y.shape)

    def objective(self, y):
        """Data fidelity F(x) = 0.5 ||G(x) - y||^2 and its gradient G'(Gx - y).

        Both callables accept flattened ambient vectors.
        """
        y = self._check(y)

        def F(x):
            r = self.apply(x) - y
            return 0.5 * float(np.sum(r * r))

        def gradF(x):
            r = self.apply(x) - y
            return self.adjoint(r).reshape(-1)

        return F, gradF


def psnr(x, ref, data_range=1.0) -> float:
    mse = float(np.mean((np.asarray(x) - np.asarray(ref)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(data_range ** 2 / mse)
