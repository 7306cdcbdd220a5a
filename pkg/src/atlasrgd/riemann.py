"""Riemannian machinery on a learned atlas.

Tangent frames come from the decoder Jacobian; the Riemannian gradient is
the orthogonal projection of the Euclidean gradient onto its span.  Two
retractions are provided (reproject after an ambient step, or step in chart
coordinates), plus the per-chart averaged descent step and the adaptive
step-size loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Var
from .mixture import MixtureAtlas, softmax_rows

RANK_TOL = 1e-10        # smallest/largest singular value of J'J
LOG_BETA_SKIP = 30.0    # charts this far below the max responsibility skip
TAU_FLOOR = 1e-12
MAX_HALVINGS = 20


class SingularFrameError(RuntimeError):
    pass


@dataclass
class TangentFrame:
    """Base point, chart index and the decoder Jacobian at its code."""

    x: np.ndarray
    chart: int
    code: np.ndarray
    J: np.ndarray                      # (n, d)
    U: np.ndarray = field(init=False)  # orthonormal basis of span(J)
    s: np.ndarray = field(init=False)
    Vt: np.ndarray = field(init=False)

    def __post_init__(self):
        U, s, Vt = np.linalg.svd(self.J, full_matrices=False)
        # rank condition on the Gram matrix J'J = V s^2 V'
        if s[-1] ** 2 < RANK_TOL * s[0] ** 2:
            raise SingularFrameError(
                f"rank-deficient tangent frame: singular values {s}")
        self.U, self.s, self.Vt = U, s, Vt

    def project(self, v):
        """Orthogonal projection J (J'J)^{-1} J' v onto the tangent space."""
        return self.U @ (self.U.T @ v)

    def pinv_coords(self, h):
        """Least-squares chart coordinates (J'J)^{-1} J' h of a direction."""
        return self.Vt.T @ ((self.U.T @ h) / self.s)

    @property
    def gram_condition(self):
        return (self.s[0] / self.s[-1]) ** 2


def chart_jacobian(atlas: MixtureAtlas, k: int, z) -> np.ndarray:
    """Jacobian of the k-th inverse chart at code z, by forward sensitivities."""
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    d = z.shape[1]
    tan = np.eye(d).reshape(d, 1, d)
    out = atlas.charts[k].decode_graph(Var(z, tan=tan))
    return out.tan[:, 0, :].T


def tangent_frame(atlas: MixtureAtlas, k: int, x) -> TangentFrame:
    """Frame at the projection of x onto chart k."""
    code = atlas.charts[k].encode(x)[0]
    xk = atlas.charts[k].decode(code[None])[0]
    J = chart_jacobian(atlas, k, code)
    return TangentFrame(x=xk, chart=k, code=code, J=J)


def riemannian_grad(grad_f, frame: TangentFrame) -> np.ndarray:
    """Project the Euclidean gradient onto the tangent space at the frame."""
    return frame.project(np.asarray(grad_f, dtype=np.float64))


def _clip_code(chart, code):
    # learned charts are defined on a bounded cube in code space (the
    # support of the latent prior); decoder extrapolation beyond it is
    # meaningless and lets iterates escape the learned set, so retractions
    # pin codes to the domain when the chart declares one
    dom = getattr(chart, "code_domain", None)
    if dom is None:
        return code
    return np.clip(code, -dom, dom)


def retract_project(atlas: MixtureAtlas, k: int, x, h) -> np.ndarray:
    """R(h) = projection of x + h back onto chart k's range."""
    ch = atlas.charts[k]
    code = _clip_code(ch, ch.encode(np.atleast_2d(np.asarray(x) + np.asarray(h))))
    return ch.decode(code)[0]


def retract_coords(atlas: MixtureAtlas, k: int, x, h,
                   frame: TangentFrame | None = None) -> np.ndarray:
    """R(h) = decode(code(x) + (J'J)^{-1} J' h), the coordinate-step retraction."""
    if frame is None:
        frame = tangent_frame(atlas, k, x)
    ch = atlas.charts[k]
    code = _clip_code(ch, frame.code + frame.pinv_coords(np.asarray(h)))
    return ch.decode(code[None])[0]


@dataclass
class DescentState:
    x: np.ndarray
    tau: float
    f: float
    iteration: int = 0
    status: str = "running"
    trajectory: list = field(default_factory=list)

    def record(self, tau_used):
        self.trajectory.append(
            {"iteration": self.iteration, "tau": tau_used, "f": self.f})


def _prepare_step(atlas, grad_f, x, *, nsamples, seed, iteration):
    """Per-chart responsibilities, projections, frames and gradients at x."""
    E = atlas.elbos(x, nsamples=nsamples, seed=seed,
                    tag=f"descent{iteration}")
    logits = (E + np.log(atlas.alpha))[0]
    if not np.any(np.isfinite(logits)):
        raise ValueError("point unexplainable by atlas: all bounds are -inf")
    beta = softmax_rows(logits[None])[0]
    active = np.where(logits >= logits.max() - LOG_BETA_SKIP)[0]
    branches = []
    for k in active:
        frame = tangent_frame(atlas, int(k), np.atleast_2d(x))
        g = riemannian_grad(grad_f(frame.x), frame)
        branches.append((int(k), beta[k], frame, g))
    return branches


def _apply_step(atlas, branches, tau, retraction):
    x_next = 0.0
    for k, b, frame, g in branches:
        h = -tau * g
        if retraction == "project":
            xk = retract_project(atlas, k, frame.x, h)
        elif retraction == "coords":
            xk = retract_coords(atlas, k, frame.x, h, frame=frame)
        else:
            raise ValueError(f"unknown retraction: {retraction}")
        x_next = x_next + b * xk
    return x_next


def descent_step(atlas: MixtureAtlas, f, grad_f, x, tau, *,
                 retraction="project", nsamples=8, seed=0, iteration=0):
    """One averaged gradient descent step on the learned manifold."""
    branches = _prepare_step(atlas, grad_f, np.asarray(x, dtype=np.float64),
                             nsamples=nsamples, seed=seed, iteration=iteration)
    return _apply_step(atlas, branches, tau, retraction)


def descent_loop(atlas: MixtureAtlas, f, grad_f, x0, tau0, max_iter, *,
                 retraction="coords", adaptive=True, nsamples=8, seed=0,
                 keep_iterates=False) -> DescentState:
    """Iterated descent with (optionally) the halving/growing step scheme.

    With ``adaptive`` the accepted objective sequence is non-increasing: a
    trial step whose objective exceeds the current one halves the step size
    and retries, then the accepted step size grows by 3/2 for the next
    iteration.  A stall (step size underflow) terminates with status
    "stalled".

    The start point is first re-attached to the atlas (a zero step through
    the chosen retraction): descent lives on the learned manifold, and an
    off-manifold ``x0`` would poison the first acceptance comparison with
    an objective value no on-manifold trial can reach.
    """
    x = np.asarray(x0, dtype=np.float64)
    x = _apply_step(atlas, _prepare_step(atlas, grad_f, x, nsamples=nsamples,
                                         seed=seed, iteration="init"),
                    0.0, retraction)
    state = DescentState(x=x, tau=float(tau0), f=float(f(x)))
    state.record(tau_used=np.nan)
    if keep_iterates:
        state.trajectory[0]["x"] = state.x.copy()
    for it in range(max_iter):
        state.iteration = it + 1
        branches = _prepare_step(atlas, grad_f, state.x, nsamples=nsamples,
                                 seed=seed, iteration=it)
        tau = state.tau
        if adaptive:
            accepted = False
            for _ in range(MAX_HALVINGS + 1):
                x_trial = _apply_step(atlas, branches, tau, retraction)
                f_trial = float(f(x_trial))
                if f_trial <= state.f:
                    accepted = True
                    break
                tau *= 0.5
                if tau < TAU_FLOOR:
                    break
            if not accepted:
                state.status = "stalled"
                state.record(tau_used=tau)
                if keep_iterates:
                    state.trajectory[-1]["x"] = state.x.copy()
                return state
            state.x, state.f = x_trial, f_trial
            state.record(tau_used=tau)
            state.tau = 1.5 * tau
        else:
            state.x = _apply_step(atlas, branches, tau, retraction)
            state.f = float(f(state.x))
            state.record(tau_used=tau)
        if keep_iterates:
            state.trajectory[-1]["x"] = state.x.copy()
    state.status = "finished"
    return state
