"""The atlas as a mixture of chart VAEs.

Covers responsibility computation, the mixture likelihood loss, the
Lipschitz warm-up regularizer, the overlap post-processing (scaled evidence
bounds, gamma reassignment, mixing-weight update) and the staged training
loop, plus sampling from the trained mixture.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .checkpoint import load_checkpoint, save_checkpoint
from .chart import ChartVAE, make_image_chart, make_toy_chart, sample_latent
from .optim import ParamStore, adam_step
from .rng import stream

ALPHA_FLOOR = 1e-6
GAMMA_TRAIN_FLOOR = 1e-2   # sub-threshold stale weights are dropped in the
                           # overlap loss; see _loss_overlap


@dataclass
class TrainConfig:
    epochs_reg: int = 50
    epochs_plain: int = 150
    epochs_overlap: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lam: float = 10.0           # weight of the Lipschitz warm-up term
    reg_sigma: float = 0.05     # noise scale inside the warm-up term
    c: float = 1.25             # scale factor of the boundary-penalized bound
    seed: int = 0
    nsamples_train: int = 1
    nsamples_eval: int = 8
    differentiable_resp: bool = False  # gradient through the softmax weights

    def __post_init__(self):
        for name in ("batch_size", "lr", "lam", "reg_sigma", "c"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.c < 1.0:
            raise ValueError("TrainConfig.c must be >= 1")


class MixtureAtlas:
    """K charts plus mixing weights on the probability simplex."""

    def __init__(self, charts: list[ChartVAE], alpha=None,
                 store: ParamStore | None = None, meta: dict | None = None):
        if not charts:
            raise ValueError("atlas needs at least one chart")
        self.charts = charts
        K = len(charts)
        self.alpha = (np.full(K, 1.0 / K) if alpha is None
                      else np.asarray(alpha, dtype=np.float64))
        if abs(self.alpha.sum() - 1.0) > 1e-9 or (self.alpha <= 0).any():
            raise ValueError("mixing weights must be positive and sum to 1")
        self.store = store if store is not None else charts[0].store
        self.meta = meta or {}

    @property
    def K(self):
        return len(self.charts)

    @property
    def d(self):
        return self.charts[0].d

    @property
    def n(self):
        return self.charts[0].n

    # -- evidence bounds -----------------------------------------------------

    def elbos(self, x, nsamples=8, seed=0, scales=(1.0,), tag="eval"):
        """Per-chart bound values, arrays of shape (B, K), one per scale.

        Draws are derived from (seed, tag, chart index) so repeated calls
        are reproducible and charts get independent noise.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = [np.empty((x.shape[0], self.K)) for _ in scales]
        for k, ch in enumerate(self.charts):
            rng = stream(seed, tag, k)
            vals = ch.elbo_graph(Var(x), rng, nsamples=nsamples, scales=scales)
            for j, v in enumerate(vals):
                out[j][:, k] = v.value
        return out if len(scales) > 1 else out[0]

    def responsibilities(self, x, nsamples=8, seed=0):
        """Posterior chart probabilities, log-sum-exp stabilized rows."""
        E = self.elbos(x, nsamples=nsamples, seed=seed)
        return softmax_rows(E + np.log(self.alpha))

    def mixture_loglik(self, x, nsamples=8, seed=0):
        """Responsibility-weighted bound sum per point (weights frozen)."""
        E = self.elbos(x, nsamples=nsamples, seed=seed)
        beta = softmax_rows(E + np.log(self.alpha))
        return (beta * E).sum(axis=1)

    # -- graph losses ---------------------------------------------------------

    def _loss_mixture(self, xb, *, nsamples, rng_label, differentiable=False):
        """Negative mean mixture log-likelihood over a batch (graph Var)."""
        seed, tag, *rest = rng_label
        xv = Var(xb)
        elbo_vars = []
        for k, ch in enumerate(self.charts):
            rng = stream(seed, tag, *rest, k)
            elbo_vars.append(ch.elbo_graph(xv, rng, nsamples=nsamples)[0])
        E = np.stack([e.value for e in elbo_vars], axis=1)
        if differentiable:
            # responsibility softmax inside the graph
            logits = [e + float(np.log(a)) for e, a in zip(elbo_vars, self.alpha)]
            m = ad.constant(E.max(axis=1))
            exps = [ad.exp(lg - m) for lg in logits]
            denom = exps[0]
            for e in exps[1:]:
                denom = denom + e
            ll = None
            for e_k, w_k in zip(elbo_vars, exps):
                term = w_k * e_k
                ll = term if ll is None else ll + term
            ll = mul_inv(ll, denom)
            loss = ad.vmean(ll) * -1.0
            return loss, softmax_rows(E + np.log(self.alpha))
        beta = softmax_rows(E + np.log(self.alpha))
        ll = None
        for k, e_k in enumerate(elbo_vars):
            term = e_k * beta[:, k]
            ll = term if ll is None else ll + term
        loss = ad.vsum(ll) * (-1.0 / xb.shape[0])
        return loss, beta

    def lipschitz_penalty_graph(self, rng, nsamples=64):
        """Smoothness warm-up: mean squared decoder increment under latent
        jitter of scale ``sigma``, divided by sigma^2, summed over charts."""
        sigma = self._reg_sigma
        z = sample_latent(rng, (nsamples, self.d))
        eta = rng.normal(0.0, sigma, (nsamples, self.d))
        total = None
        for ch in self.charts:
            a = ch.decode_graph(Var(z))
            b = ch.decode_graph(Var(z + eta))
            sq = ad.vmean(ad.vsum(ad.square(a - b), axis=1))
            total = sq if total is None else total + sq
        return total * (1.0 / sigma ** 2)

    _reg_sigma = 0.05

    # -- overlap machinery ----------------------------------------------------

    def overlap_gammas(self, x, c, nsamples=8, seed=0):
        """Boundary-aware chart assignments, rows summing to one.

        For each probe chart l the bound of chart l is replaced by its
        scaled variant inside a shared softmax denominator; the final
        assignment takes the elementwise max over probes and renormalizes.
        """
        if c < 1.0:
            raise ValueError("overlap scale c must be >= 1")
        E, Ec = self.elbos(x, nsamples=nsamples, seed=seed, scales=(1.0, c))
        loga = np.log(self.alpha)
        N, K = E.shape
        log_gamma_hat = np.full((N, K), -np.inf)
        base = E + loga                       # (N, K)
        base_c = Ec + loga
        for l in range(K):
            logits = base.copy()
            logits[:, l] = base_c[:, l]       # probe chart uses the scaled bound
            denom = logsumexp_rows(logits)
            log_gamma_hat = np.maximum(log_gamma_hat, logits - denom[:, None])
        return softmax_rows(log_gamma_hat)    # normalizes the max-combined rows

    def update_alpha(self, gamma):
        """Mixing weights as the mean assignment mass per chart."""
        gamma = np.asarray(gamma, dtype=np.float64)
        alpha = gamma.mean(axis=0)
        if (alpha < ALPHA_FLOOR).any():
            import warnings
            warnings.warn("empty chart: flooring mixing weight at "
                          f"{ALPHA_FLOOR}")
            alpha = np.maximum(alpha, ALPHA_FLOOR)
        self.alpha = alpha / alpha.sum()
        return self.alpha

    def _loss_overlap(self, xb, gamma_rows, *, nsamples, rng_label):
        """Negative gamma-weighted bound sum over a batch (gamma frozen).

        Residual assignment mass below GAMMA_TRAIN_FLOOR is dropped (rows
        renormalized): those weights come from charts that do not explain
        the point at all, and since the weights stay frozen while the
        parameters move, a vanishing weight times an unboundedly bad bound
        can otherwise blow up the loss mid-stage.  Genuine boundary
        reassignment puts far more mass than the floor on the target chart.
        """
        g = np.where(gamma_rows < GAMMA_TRAIN_FLOOR, 0.0, gamma_rows)
        g = g / g.sum(axis=1, keepdims=True)
        seed, tag, *rest = rng_label
        xv = Var(xb)
        loss = None
        for k, ch in enumerate(self.charts):
            rng = stream(seed, tag, *rest, k)
            e_k = ch.elbo_graph(xv, rng, nsamples=nsamples)[0]
            term = e_k * g[:, k]
            loss = term if loss is None else loss + term
        return ad.vsum(loss) * (-1.0 / xb.shape[0])

    # -- sampling --------------------------------------------------------------

    def sample(self, m, rng):
        """Draw m ambient points with their chart labels."""
        if m == 0:
            return np.zeros((0, self.n)), np.zeros(0, dtype=int)
        labels = rng.choice(self.K, size=m, p=self.alpha)
        X = np.empty((m, self.n))
        for k in range(self.K):
            idx = np.where(labels == k)[0]
            if idx.size:
                z = sample_latent(rng, (idx.size, self.d))
                X[idx] = self.charts[k].decode(z)
        return X, labels


def lipschitz_penalty(atlas: MixtureAtlas, sigma, rng, nsamples=64) -> float:
    """Monte-Carlo estimate of the decoder smoothness penalty."""
    old = atlas._reg_sigma
    atlas._reg_sigma = float(sigma)
    try:
        return float(atlas.lipschitz_penalty_graph(rng, nsamples=nsamples).value)
    finally:
        atlas._reg_sigma = old


def softmax_rows(logits):
    m = logits.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("point unexplainable by atlas: all bounds are -inf")
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def logsumexp_rows(logits):
    m = logits.max(axis=-1)
    return m + np.log(np.exp(logits - m[:, None]).sum(axis=-1))


def mul_inv(a: Var, b: Var) -> Var:
    """a / b for graph Vars via exp(log) on positive b."""
    return a * ad.exp(-ad.log(b))


# -- training ------------------------------------------------------------------

def train(dataset, config: TrainConfig, atlas: MixtureAtlas,
          log_rows: list | None = None, start_epoch: int = 0,
          progress=None, gamma=None, epoch_hook=None) -> MixtureAtlas:
    """Staged training: warm-up with the Lipschitz term, plain mixture loss,
    then the overlap pass (assignments, mixing weights, weighted loss).

    Mutates ``atlas`` in place and returns it.  ``log_rows``, when given,
    collects one dict per epoch.  ``start_epoch`` skips already-completed
    global epochs (checkpoint resume); randomness per epoch depends only on
    (seed, stage, epoch) so a resumed run matches an uninterrupted one.
    When resuming inside the overlap stage, pass the ``gamma`` matrix saved
    at the stage boundary so assignments are not recomputed from the
    mid-stage parameters.  ``epoch_hook(epoch, stage, gamma)`` runs after
    every completed epoch (checkpointing).
    """
    X = np.asarray(dataset, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("dataset must be a nonempty (N, n) array")
    atlas._reg_sigma = config.reg_sigma
    stages = [("reg", config.epochs_reg), ("plain", config.epochs_plain)]
    gepoch = 0
    for stage, n_epochs in stages:
        for ep in range(n_epochs):
            gepoch += 1
            if gepoch <= start_epoch:
                continue
            loss, beta_mass = _run_epoch(atlas, X, config, stage, gepoch)
            _log(log_rows, progress, gepoch, stage, loss, beta_mass)
            if epoch_hook is not None:
                epoch_hook(gepoch, stage, None)

    # overlap post-processing: assignments and mixing weights computed once
    if config.epochs_overlap > 0:
        if gamma is None:
            gamma = atlas.overlap_gammas(X, config.c,
                                         nsamples=config.nsamples_eval,
                                         seed=config.seed)
            atlas.update_alpha(gamma)
        for ep in range(config.epochs_overlap):
            gepoch += 1
            if gepoch <= start_epoch:
                continue
            loss, beta_mass = _run_epoch(atlas, X, config, "overlap", gepoch,
                                         gamma=gamma)
            _log(log_rows, progress, gepoch, "overlap", loss, beta_mass)
            if epoch_hook is not None:
                epoch_hook(gepoch, "overlap", gamma)
    return atlas


def _run_epoch(atlas, X, config, stage, epoch, gamma=None):
    N = X.shape[0]
    perm = stream(config.seed, "shuffle", epoch).permutation(N)
    losses = []
    beta_acc = np.zeros(atlas.K)
    nb = 0
    for bi, lo in enumerate(range(0, N, config.batch_size)):
        idx = perm[lo:lo + config.batch_size]
        xb = X[idx]
        tape = ad.Tape()
        with ad.recording(tape):
            if stage == "overlap":
                loss = atlas._loss_overlap(
                    xb, gamma[idx], nsamples=config.nsamples_train,
                    rng_label=(config.seed, "mc", epoch, bi))
                beta = gamma[idx]
            else:
                loss, beta = atlas._loss_mixture(
                    xb, nsamples=config.nsamples_train,
                    rng_label=(config.seed, "mc", epoch, bi),
                    differentiable=config.differentiable_resp)
                if stage == "reg":
                    reg = atlas.lipschitz_penalty_graph(
                        stream(config.seed, "reg", epoch, bi),
                        nsamples=min(64, config.batch_size))
                    loss = loss + reg * config.lam
        tape.output = loss
        if not np.isfinite(loss.value):
            raise FloatingPointError(
                f"non-finite loss at stage {stage}, epoch {epoch}, batch {bi}")
        ad.backward(tape)
        adam_step(atlas.store, lr=config.lr, beta1=config.beta1,
                  beta2=config.beta2, eps=config.eps)
        losses.append(float(loss.value))
        beta_acc += beta.mean(axis=0)
        nb += 1
    return float(np.mean(losses)), beta_acc / nb


def _log(rows, progress, epoch, stage, loss, beta_mass):
    row = {"epoch": epoch, "stage": stage, "loss": loss}
    for k, b in enumerate(beta_mass):
        row[f"beta_mass_{k}"] = float(b)
    if rows is not None:
        rows.append(row)
    if progress is not None:
        progress(row)


def build_atlas(kind, K, d, *, seed=0, sigma_x=None, sigma_z=0.01,
                n=None, side=None, hidden=64, dec_blocks=5,
                latent_blocks=3) -> MixtureAtlas:
    """Construct an untrained atlas of K charts for a toy or image manifold.

    ``sigma_x`` defaults to the training-data noise scale of each family:
    0.05 for toy manifolds, 0.1 for images.
    """
    if sigma_x is None:
        sigma_x = 0.05 if kind == "toy" else 0.1
    store = ParamStore()
    charts = []
    for k in range(K):
        rng = stream(seed, "init", k)
        if kind == "toy":
            ch = make_toy_chart(store, f"chart{k}", d, n, rng,
                                dec_blocks=dec_blocks,
                                latent_blocks=latent_blocks, hidden=hidden,
                                sigma_x=sigma_x, sigma_z=sigma_z)
        elif kind == "image":
            ch = make_image_chart(store, f"chart{k}", d, side, rng,
                                  latent_blocks=latent_blocks, hidden=hidden,
                                  sigma_x=sigma_x, sigma_z=sigma_z)
        else:
            raise ValueError(f"unknown atlas kind: {kind}")
        charts.append(ch)
    meta = {"kind": kind, "K": K, "d": d, "n": n if n else side * side,
            "side": side, "sigma_x": sigma_x, "sigma_z": sigma_z,
            "hidden": hidden, "dec_blocks": dec_blocks,
            "latent_blocks": latent_blocks, "seed": seed}
    return MixtureAtlas(charts, store=store, meta=meta)


# -- persistence ----------------------------------------------------------------

def save_atlas(path, atlas: MixtureAtlas, extra_meta: dict | None = None):
    """Write atlas parameters, optimizer moments and mixing weights."""
    arrays = dict(atlas.store.state_arrays())
    for name in atlas.store.params:
        arrays["adam_m/" + name] = atlas.store.m[name]
        arrays["adam_v/" + name] = atlas.store.v[name]
    arrays["__alpha__"] = atlas.alpha
    meta = dict(atlas.meta)
    meta["adam_step_count"] = atlas.store.step_count
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, arrays, meta)


def load_atlas(path) -> MixtureAtlas:
    """Rebuild an atlas from a checkpoint written by ``save_atlas``."""
    arrays, meta = load_checkpoint(path)
    atlas = build_atlas(meta["kind"], meta["K"], meta["d"], seed=meta["seed"],
                        sigma_x=meta["sigma_x"], sigma_z=meta["sigma_z"],
                        n=meta["n"] if meta["kind"] == "toy" else None,
                        side=meta["side"], hidden=meta["hidden"],
                        dec_blocks=meta["dec_blocks"],
                        latent_blocks=meta["latent_blocks"])
    atlas.store.load_arrays(
        {k: v for k, v in arrays.items() if not k.startswith(("adam_", "__"))})
    for name in atlas.store.params:
        atlas.store.m[name] = np.asarray(arrays["adam_m/" + name])
        atlas.store.v[name] = np.asarray(arrays["adam_v/" + name])
    atlas.store._flat = None
    atlas.store.step_count = int(meta.get("adam_step_count", 0))
    atlas.alpha = np.asarray(arrays["__alpha__"])
    atlas.meta = meta
    return atlas
