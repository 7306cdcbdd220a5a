"""Numeric tour of the differential-geometry layer on analytic charts.

Three short experiments on the unit circle / sphere, no training involved:
1. tangent frames and the first-order retraction property,
2. chart-independence of the Riemannian gradient (two different
   parameterizations of the same circle give the same ambient gradient
   while their latent gradients differ),
3. the accept/halve/grow step-size scheme on a simple objective.
"""

import numpy as np

from atlasrgd.riemann import (TangentFrame, descent_loop, retract_coords,
                              retract_project, riemannian_grad)


class CircleChart:
    """z -> (cos(a z + b), sin(a z + b)); jacobian in closed form."""

    d, n = 1, 2

    def __init__(self, a=1.0, b=0.0):
        self.a, self.b = a, b

    def decode(self, z):
        t = self.a * np.atleast_2d(z)[:, 0] + self.b
        return np.stack([np.cos(t), np.sin(t)], axis=1)

    def encode(self, x):
        x = np.atleast_2d(x)
        return ((np.arctan2(x[:, 1], x[:, 0]) - self.b) / self.a)[:, None]

    def jacobian(self, z):
        t = self.a * float(np.atleast_1d(z)[0]) + self.b
        return self.a * np.array([[-np.sin(t)], [np.cos(t)]])

    def project(self, x):
        return self.decode(self.encode(x))


class StubAtlas:
    def __init__(self, charts):
        self.charts = charts
        self.alpha = np.full(len(charts), 1.0 / len(charts))

    @property
    def K(self):
        return len(self.charts)

    @property
    def n(self):
        return self.charts[0].n

    def elbos(self, x, **kw):
        return np.zeros((np.atleast_2d(x).shape[0], self.K))


def frame_at(chart, x):
    code = chart.encode(x)[0]
    return TangentFrame(x=chart.decode(code[None])[0], chart=0, code=code,
                        J=chart.jacobian(code))


# 1. retraction first-order property: ||(R(t h) - x)/t - h|| shrinks like t
chart = CircleChart()
atlas = StubAtlas([chart])
x = chart.decode(np.array([[0.4]]))[0]
fr = frame_at(chart, x)
h = fr.project(np.array([1.0, 1.0]))
h /= np.linalg.norm(h)
print("retraction first-order errors (should drop ~10x per step):")
for name, retract in (("project", lambda hh: retract_project(atlas, 0, x, hh)),
                      ("coords", lambda hh: retract_coords(atlas, 0, x, hh,
                                                           frame=fr))):
    errs = [np.linalg.norm((retract(t * h) - x) / t - h)
            for t in (1e-1, 1e-2, 1e-3)]
    print(f"  {name:8s} " + "  ".join(f"{e:.2e}" for e in errs))

# 2. chart independence: same circle, different parameterizations
gF = lambda p: np.array([2 * p[0], p[1] - 3.0])  # grad of x^2 + (y-3)^2/2
for a, b in ((1.0, 0.0), (-2.0, 1.0)):
    ch = CircleChart(a, b)
    fr = frame_at(ch, x)
    rg = riemannian_grad(gF(x), fr)
    lat = fr.J.T @ gF(x)
    print(f"chart (a={a:+.0f}, b={b:.0f}): ambient grad {np.round(rg, 6)}, "
          f"latent grad {np.round(lat, 4)}")

# 3. step-size scheme on a linear chart of the x-axis: an oversized first
# step on F(t) = t^2 overshoots, gets halved once, then regrows by 3/2
from atlasrgd import autodiff as ad


class LineChart:
    d, n = 1, 2

    def encode(self, x):
        return np.atleast_2d(x)[:, :1]

    def decode(self, z):
        z = np.atleast_2d(z)
        return np.concatenate([z, np.zeros_like(z)], axis=1)

    def decode_graph(self, z):
        return ad.zero_pad_cols(z, 2)

    def project(self, x):
        return self.decode(self.encode(x))


line = StubAtlas([LineChart()])
F = lambda p: float(p[0] ** 2)
gradF = lambda p: np.array([2.0 * p[0], 0.0])
st = descent_loop(line, F, gradF, np.array([1.0, 0.0]), tau0=1.5,
                  max_iter=25, retraction="project")
taus = [row["tau"] for row in st.trajectory[1:5]]
print(f"descent: x* = {np.round(st.x, 6)}, F = {st.f:.2e}, "
      f"{st.iteration} iters, status {st.status}")
print("accepted step sizes (rejection halves, acceptance regrows):",
      np.round(taus, 4))
