"""Named parameter store with a bias-corrected Adam step."""

from __future__ import annotations

import warnings

import numpy as np

from .autodiff import Var


class ParamStore:
    """Named parameter tensors plus per-parameter Adam moment buffers.

    For update speed the tensors can be re-viewed into one flat buffer per
    kind (values, first and second moments); the views are rebuilt whenever
    parameters are created or loaded.
    """

    def __init__(self):
        self.params: dict[str, Var] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0
        self._flat = None  # (theta, m, v) flat buffers backing the views

    def create(self, name: str, value) -> Var:
        if name in self.params:
            raise KeyError(f"duplicate parameter name: {name}")
        p = Var(np.asarray(value, dtype=np.float64))
        self.params[name] = p
        self.m[name] = np.zeros_like(p.value)
        self.v[name] = np.zeros_like(p.value)
        self._flat = None
        return p

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name}")
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != p.value.shape:
                raise ValueError(
                    f"parameter {name}: checkpoint shape {a.shape} "
                    f"!= model shape {p.value.shape}")
            p.value = a
        self._flat = None

    def _flatten(self):
        total = sum(p.value.size for p in self.params.values())
        theta = np.empty(total)
        fm = np.empty(total)
        fv = np.empty(total)
        off = 0
        for name, p in self.params.items():
            n = p.value.size
            sl = slice(off, off + n)
            theta[sl] = p.value.reshape(-1)
            fm[sl] = self.m[name].reshape(-1)
            fv[sl] = self.v[name].reshape(-1)
            p.value = theta[sl].reshape(p.value.shape)
            self.m[name] = fm[sl].reshape(p.value.shape)
            self.v[name] = fv[sl].reshape(p.value.shape)
            off += n
        self._flat = (theta, fm, fv)
        return self._flat


def adam_step(store: ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update from the gradients held in the store.

    Parameters whose gradient is missing are treated as having zero
    gradient; a non-finite gradient anywhere skips the whole update and
    emits a warning.
    """
    if store._flat is None:
        store._flatten()
    theta, fm, fv = store._flat
    g = np.zeros_like(theta)
    off = 0
    for name, p in store.params.items():
        n = p.value.size
        if p.grad is not None:
            g[off:off + n] = p.grad.reshape(-1)
        off += n
    if not np.all(np.isfinite(g)):
        warnings.warn("adam_step: non-finite gradient, update skipped")
        store.zero_grad()
        return store
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    fm *= beta1
    fm += (1.0 - beta1) * g
    fv *= beta2
    fv += (1.0 - beta2) * g * g
    theta -= lr * (fm / c1) / (np.sqrt(fv / c2) + eps)
    store.zero_grad()
    return store
