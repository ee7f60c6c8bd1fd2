"""Adam with warmup, global-norm clipping and exact lazy row updates.

Rows of an embedding that have never received a gradient have zero first
and second moments, so Adam leaves them untouched; skipping them is exact.
Once a row has been touched it is updated on every later step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .encoder import RowSparse


@njit(cache=True, error_model="numpy")
def _adam_kernel(p, g, m, v, lr, b1, b2, eps, bc1, bc2, gscale):
    step = lr / bc1
    inv_sqrt_bc2 = 1.0 / math.sqrt(bc2)
    for i in range(p.size):
        gi = g[i] * gscale
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= step * mi / (math.sqrt(vi) * inv_sqrt_bc2 + eps)


@njit(cache=True)
def _sum_squares(x):
    acc = 0.0
    for i in range(x.size):
        acc += float(x[i]) * float(x[i])
    return acc


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    warmup_steps: int = 0


class Adam:
    """Adam over a dict of named arrays, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], cfg: AdamConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}
        # per-row "ever touched" flags for parameters that receive RowSparse grads
        self.active: dict[str, np.ndarray] = {}

    def lr_at(self, t: int) -> float:
        """Learning rate for 1-based step ``t``: linear warmup then constant."""
        w = self.cfg.warmup_steps
        if w > 0 and t <= w:
            return self.cfg.lr * t / w
        return self.cfg.lr

    def step(self, grads: dict[str, np.ndarray | RowSparse]) -> tuple[float, float]:
        """Apply one update. Returns ``(lr used, pre-clip global grad norm)``."""
        self.t += 1
        cfg = self.cfg
        lr = self.lr_at(self.t)
        sq = 0.0
        for g in grads.values():
            vals = g.values if isinstance(g, RowSparse) else g
            sq += _sum_squares(np.ascontiguousarray(vals).reshape(-1))
        norm = math.sqrt(sq)
        gscale = 1.0
        if cfg.clip_norm is not None and norm > cfg.clip_norm:
            gscale = cfg.clip_norm / (norm + 1e-6)
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        args = (lr, cfg.beta1, cfg.beta2, cfg.eps, bc1, bc2, gscale)
        for name, g in grads.items():
            p, m, v = self.params[name], self.m[name], self.v[name]
            if isinstance(g, RowSparse):
                self._sparse_step(name, g, args)
            elif name in self.active:
                self._sparse_step(name, RowSparse(np.arange(len(p)), g, p.shape), args)
            else:
                _adam_kernel(p.reshape(-1), np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
                             m.reshape(-1), v.reshape(-1), *args)
        return lr, norm

    def _sparse_step(self, name: str, g: RowSparse, args) -> None:
        p, m, v = self.params[name], self.m[name], self.v[name]
        active = self.active.setdefault(name, np.zeros(len(p), dtype=bool))
        active[g.rows] = True
        if active.all():
            # every row is live: drop to the dense path for good
            del self.active[name]
            dense = g.dense() if len(g.rows) != len(p) else g.values
            _adam_kernel(p.reshape(-1), np.ascontiguousarray(dense, dtype=p.dtype).reshape(-1),
                         m.reshape(-1), v.reshape(-1), *args)
            return
        idx = np.flatnonzero(active)
        sub_g = np.zeros((len(idx),) + p.shape[1:], dtype=p.dtype)
        sub_g[np.searchsorted(idx, g.rows)] = g.values
        sub_p, sub_m, sub_v = p[idx], m[idx], v[idx]
        _adam_kernel(sub_p.reshape(-1), sub_g.reshape(-1), sub_m.reshape(-1), sub_v.reshape(-1), *args)
        p[idx], m[idx], v[idx] = sub_p, sub_m, sub_v

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state(self, t: int, tensors: dict[str, np.ndarray]) -> None:
        self.t = t
        for k in self.params:
            self.m[k][...] = tensors[f"m.{k}"]
            self.v[k][...] = tensors[f"v.{k}"]
        # moments are dense after a restore; row tracking restarts conservatively
        self.active.clear()
