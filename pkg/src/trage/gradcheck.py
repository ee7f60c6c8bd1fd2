"""Central finite-difference check of the encoder's analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .encoder import EncoderConfig, EncoderParams, backward, dense_grads, masked_lm_loss

# elementwise floor: below this magnitude both values are treated as zero
REL_FLOOR = 1e-7
# per-tensor floor for the normwise error; only matters for tensors whose true
# gradient is identically zero (e.g. attention key biases, by softmax shift invariance)
TENSOR_FLOOR = 1e-6


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)`` elementwise."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference comparison.

    ``max_rel_error`` is the largest per-tensor normwise error
    ``max|a - b| / max(max|a|, max|b|, TENSOR_FLOOR)``. The elementwise maximum
    is kept alongside; for tiny-gradient entries it is dominated by the
    O(h^2) truncation error of the difference quotient itself.
    """

    max_rel_error: float
    worst: str  # tensor with the largest normwise error
    per_param: dict[str, float]
    max_elementwise: float
    worst_element: str  # "name[index]"
    n_checked: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def check_gradients(
    params: EncoderParams,
    ids: np.ndarray,
    positions,
    targets,
    h: float = 1e-4,
    select: Callable[[str, np.ndarray], np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare :func:`backward` against central differences of the mean MLM loss.

    ``params`` must be f64. ``select(name, grad)`` may return flat indices to
    check for a tensor; by default every entry is checked.
    """
    if params.config.precision != "f64":
        raise ValueError("finite-difference checks need f64 parameters")

    def loss() -> float:
        return masked_lm_loss(params, ids, positions, targets)[0].mean

    _, trace = masked_lm_loss(params, ids, positions, targets)
    analytic = dense_grads(backward(trace))
    per_param: dict[str, float] = {}
    worst_el, worst_el_err, n = "", 0.0, 0
    for name, tensor in params.items():
        flat = tensor.reshape(-1)
        g = analytic[name].reshape(-1)
        idx = np.arange(flat.size) if select is None else np.asarray(select(name, analytic[name]))
        if len(idx) == 0:
            continue
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = loss()
            flat[i] = orig - h
            down = loss()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        a = g[idx].astype(np.float64)
        scale = max(np.abs(a).max(), np.abs(numeric).max(), TENSOR_FLOOR)
        per_param[name] = float(np.abs(a - numeric).max() / scale)
        el = relative_error(a, numeric)
        if el.max() >= worst_el_err:
            worst_el_err = float(el.max())
            worst_el = f"{name}[{int(idx[el.argmax()])}]"
        n += len(idx)
    worst = max(per_param, key=per_param.get)
    return GradCheckReport(per_param[worst], worst, per_param, worst_el_err, worst_el, n)


def small_problem(
    vocab_size: int = 40, seed: int = 0
) -> tuple[EncoderParams, np.ndarray, np.ndarray, np.ndarray]:
    """d=8, L=8, one layer, two heads; two sequences with PAD tails and masked positions.

    Parameters are drawn with a larger std than training init so every
    tensor, biases and norms included, carries a non-trivial gradient.
    """
    cfg = EncoderConfig(vocab_size=vocab_size, max_len=8, hidden=8, layers=1, heads=2, dropout=0.0, precision="f64")
    rng = np.random.default_rng(seed)
    base = EncoderParams.init(cfg, rng)
    tensors = {}
    for name, t in base.items():
        noise = rng.normal(0.0, 0.3, t.shape)
        tensors[name] = (t + noise) if name.endswith(".g") else noise
    params = EncoderParams(cfg, tensors)
    ids = np.zeros((2, 8), dtype=np.int64)
    ids[:, 0] = 2
    ids[0, 1:6] = rng.integers(5, vocab_size, 5)
    ids[1, 1:8] = rng.integers(5, vocab_size, 7)
    rows = np.array([0, 0, 1, 1, 1])
    cols = np.array([2, 4, 1, 3, 6])
    targets = ids[rows, cols].copy()
    ids[rows, cols] = 1  # MASK
    return params, ids, (rows, cols), targets
