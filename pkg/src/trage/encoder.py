"""Small pre-norm transformer encoder with an MLM head, in numpy.

Forward passes record a :class:`ForwardTrace`; :func:`backward` walks it in
reverse to produce exact gradients for every tensor in
:class:`EncoderParams`. The MLM output projection is tied to the token
embedding.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from numba import vectorize

from .errors import EmptyBatch, ShapeMismatch
from .tokenize import PAD, VOCAB_SIZE

LN_EPS = 1e-12
_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = VOCAB_SIZE
    max_len: int = 128
    hidden: int = 64
    layers: int = 2
    heads: int = 2
    ffn_dim: int | None = None
    dropout: float = 0.1
    precision: str = "f32"

    def __post_init__(self) -> None:
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.max_len < 2:
            raise ValueError("max_len must be at least 2")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def ffn(self) -> int:
        return self.ffn_dim or 4 * self.hidden

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self.precision == "f32" else np.float64)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.hidden, cfg.ffn
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_len, d),
        "emb_ln.g": (d,),
        "emb_ln.b": (d,),
    }
    for i in range(cfg.layers):
        p = f"layer{i}."
        shapes.update(
            {
                p + "ln1.g": (d,),
                p + "ln1.b": (d,),
                p + "attn.wq": (d, d),
                p + "attn.bq": (d,),
                p + "attn.wk": (d, d),
                p + "attn.bk": (d,),
                p + "attn.wv": (d, d),
                p + "attn.bv": (d,),
                p + "attn.wo": (d, d),
                p + "attn.bo": (d,),
                p + "ln2.g": (d,),
                p + "ln2.b": (d,),
                p + "ffn.w1": (d, f),
                p + "ffn.b1": (f,),
                p + "ffn.w2": (f, d),
                p + "ffn.b2": (d,),
            }
        )
    shapes.update(
        {
            "final_ln.g": (d,),
            "final_ln.b": (d,),
            "mlm.w": (d, d),
            "mlm.b": (d,),
            "mlm.ln.g": (d,),
            "mlm.ln.b": (d,),
            "mlm.out_b": (cfg.vocab_size,),
        }
    )
    return shapes


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


class EncoderParams:
    """All learnable tensors of one encoder, keyed by dotted name."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, np.ndarray]):
        shapes = param_shapes(config)
        if set(tensors) != set(shapes):
            missing = sorted(set(shapes) - set(tensors))
            extra = sorted(set(tensors) - set(shapes))
            raise ShapeMismatch(f"tensor set mismatch; missing={missing} extra={extra}")
        for name, shape in shapes.items():
            if tensors[name].shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {tensors[name].shape}")
        self.config = config
        self.tensors = {name: tensors[name] for name in shapes}

    @classmethod
    def init(cls, config: EncoderConfig, seed: int | np.random.Generator = 0) -> "EncoderParams":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        tensors = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                t = np.ones(shape)
            elif len(shape) == 1:
                t = np.zeros(shape)
            else:
                t = truncated_normal(rng, shape)
            tensors[name] = t.astype(config.dtype)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, precision: str) -> "EncoderParams":
        cfg = EncoderConfig(**{**self.config.to_dict(), "precision": precision})
        return EncoderParams(cfg, {k: v.astype(cfg.dtype) for k, v in self.tensors.items()})

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t).tobytes())
        return h.hexdigest()

    def all_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors.values())


# ---------------------------------------------------------------------------
# primitives


@vectorize(["float32(float32)", "float64(float64)"], cache=True)
def gelu(x):
    """Exact (erf-based) GELU."""
    return 0.5 * x * (1.0 + math.erf(x * _SQRT_HALF))


@vectorize(["float32(float32)", "float64(float64)"], cache=True)
def gelu_grad(x):
    return 0.5 * (1.0 + math.erf(x * _SQRT_HALF)) + x * _INV_SQRT_2PI * math.exp(-0.5 * x * x)


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _ln_bwd(dy, cache):
    xhat, rstd, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=axes)
    db = dy.sum(axis=axes)
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(-1, keepdims=True)
    )
    return dx, dg, db


def _dropout(x, rate, rng):
    if rate == 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * keep, keep


def _split_heads(x, h):
    B, L, d = x.shape
    return x.reshape(B, L, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, h * dh)


def _mm_grad(inp, dout):
    """``inp^T @ dout`` summed over all leading dims."""
    return inp.reshape(-1, inp.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])


# ---------------------------------------------------------------------------
# forward


@dataclass
class RowSparse:
    """Gradient touching only ``rows`` of a matrix."""

    rows: np.ndarray
    values: np.ndarray
    shape: tuple[int, int]

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=self.values.dtype)
        out[self.rows] = self.values
        return out


@dataclass
class ForwardTrace:
    """Activations cached by :func:`encode` (and optionally the head and loss)."""

    params: EncoderParams
    ids: np.ndarray
    key_mask: np.ndarray
    emb_ln: tuple
    emb_drop: np.ndarray | None
    layers: list[dict] = field(default_factory=list)
    final_ln: tuple = ()
    head: dict | None = None
    loss: dict | None = None


def encode(
    params: EncoderParams,
    ids: np.ndarray,
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Encode token ids ``[B, L]`` (or ``[L]``) into hidden states ``[B, L, d]``.

    Key positions holding PAD are excluded from attention. With
    ``train=True`` and an ``rng``, dropout is applied at the configured rate.
    """
    cfg = params.config
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] != cfg.max_len:
        raise ShapeMismatch(f"expected ids of length {cfg.max_len}, got shape {ids.shape}")
    rate = cfg.dropout if train else 0.0
    dt = cfg.dtype
    T = params.tensors
    B, L = ids.shape
    h = cfg.heads
    scale = dt.type(1.0 / math.sqrt(cfg.hidden // h))

    key_mask = ids != PAD
    bias = np.where(key_mask, dt.type(0.0), dt.type(-np.inf))[:, None, None, :]

    e = T["tok_emb"][ids] + T["pos_emb"][None, :L]
    x, emb_ln = _ln_fwd(e, T["emb_ln.g"], T["emb_ln.b"])
    x, emb_drop = _dropout(x, rate, rng)
    trace = ForwardTrace(params, ids, key_mask, emb_ln, emb_drop)

    for i in range(cfg.layers):
        p = f"layer{i}."
        c: dict[str, Any] = {}
        a, c["ln1"] = _ln_fwd(x, T[p + "ln1.g"], T[p + "ln1.b"])
        q = _split_heads(a @ T[p + "attn.wq"] + T[p + "attn.bq"], h)
        k = _split_heads(a @ T[p + "attn.wk"] + T[p + "attn.bk"], h)
        v = _split_heads(a @ T[p + "attn.wv"] + T[p + "attn.bv"], h)
        s = (q @ k.transpose(0, 1, 3, 2)) * scale + bias
        s = s - s.max(-1, keepdims=True)
        probs = np.exp(s)
        probs /= probs.sum(-1, keepdims=True)
        ctx = _merge_heads(probs @ v)
        o, c["drop_o"] = _dropout(ctx @ T[p + "attn.wo"] + T[p + "attn.bo"], rate, rng)
        x = x + o
        f, c["ln2"] = _ln_fwd(x, T[p + "ln2.g"], T[p + "ln2.b"])
        u = f @ T[p + "ffn.w1"] + T[p + "ffn.b1"]
        gu = gelu(u)
        z, c["drop_z"] = _dropout(gu @ T[p + "ffn.w2"] + T[p + "ffn.b2"], rate, rng)
        x = x + z
        c.update(a=a, q=q, k=k, v=v, probs=probs, ctx=ctx, f=f, u=u, gu=gu)
        trace.layers.append(c)

    out, trace.final_ln = _ln_fwd(x, T["final_ln.g"], T["final_ln.b"])
    return out, trace


def attention_maps(trace: ForwardTrace) -> list[np.ndarray]:
    """Per-layer attention probabilities ``[B, heads, L, L]``."""
    return [c["probs"] for c in trace.layers]


def _as_positions(hidden: np.ndarray, positions) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(positions, tuple):
        rows, cols = (np.asarray(a, dtype=np.int64) for a in positions)
    else:
        cols = np.asarray(positions, dtype=np.int64).ravel()
        rows = np.zeros_like(cols)
    if rows.shape != cols.shape:
        raise ShapeMismatch("row and column index arrays differ in shape")
    B, L = hidden.shape[:2]
    if len(cols) and (cols.min() < 0 or cols.max() >= L or rows.min() < 0 or rows.max() >= B):
        raise ShapeMismatch("mask position outside the hidden-state grid")
    return rows, cols


def mlm_logits(
    params: EncoderParams,
    hidden: np.ndarray,
    positions,
    trace: ForwardTrace | None = None,
) -> np.ndarray:
    """Unnormalised vocabulary logits at the selected positions.

    ``positions`` is either an index list into a single sequence or a
    ``(rows, cols)`` pair into a batch. When ``trace`` is given the head's
    activations are recorded on it for :func:`backward`.
    """
    T = params.tensors
    if hidden.ndim == 2:
        hidden = hidden[None]
    if hidden.shape[-1] != params.config.hidden:
        raise ShapeMismatch(f"hidden width {hidden.shape[-1]} != {params.config.hidden}")
    rows, cols = _as_positions(hidden, positions)
    sel = hidden[rows, cols]
    t = sel @ T["mlm.w"] + T["mlm.b"]
    tg = gelu(t)
    tn, ln = _ln_fwd(tg, T["mlm.ln.g"], T["mlm.ln.b"])
    logits = tn @ T["tok_emb"].T + T["mlm.out_b"]
    if trace is not None:
        trace.head = dict(rows=rows, cols=cols, sel=sel, t=t, ln=ln, tn=tn, shape=hidden.shape)
    return logits


@dataclass(frozen=True)
class MLMLoss:
    total: float
    mean: float
    count: int


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(-1, keepdims=True))


def mlm_loss(logits: np.ndarray, targets, trace: ForwardTrace | None = None) -> MLMLoss:
    """Negative log-likelihood of ``targets``: summed and per-token mean."""
    targets = np.asarray(targets, dtype=np.int64).ravel()
    if len(targets) == 0:
        raise EmptyBatch("no masked positions")
    if logits.shape[0] != len(targets):
        raise ShapeMismatch(f"{logits.shape[0]} logit rows for {len(targets)} targets")
    shifted = logits - logits.max(-1, keepdims=True)
    probs = np.exp(shifted)
    z = probs.sum(-1, keepdims=True)
    nll = np.log(z[:, 0]) - shifted[np.arange(len(targets)), targets]
    total = float(nll.sum(dtype=np.float64))
    if trace is not None:
        probs /= z
        trace.loss = dict(probs=probs, targets=targets)
    return MLMLoss(total=total, mean=total / len(targets), count=len(targets))


# ---------------------------------------------------------------------------
# backward


def backward(
    trace: ForwardTrace,
    scale: float = 1.0,
    reduction: str = "mean",
    dhidden: np.ndarray | None = None,
) -> dict[str, np.ndarray | RowSparse]:
    """Exact gradients of ``scale * loss`` for every parameter tensor.

    The loss is the recorded MLM loss (``reduction`` selects its mean or sum
    form) plus ``sum(dhidden * hidden)`` when an upstream gradient on the
    encoder output is supplied. ``tok_emb`` comes back as a
    :class:`RowSparse` when no MLM head took part.
    """
    params = trace.params
    cfg = params.config
    T = params.tensors
    dt = cfg.dtype
    B, L = trace.ids.shape
    grads: dict[str, Any] = {}

    dx = np.zeros((B, L, cfg.hidden), dtype=dt)
    if dhidden is not None:
        dx += dhidden.reshape(dx.shape)

    dtok_dense = None
    if trace.loss is not None:
        if trace.head is None:
            raise ValueError("loss recorded without MLM head activations")
        hd = trace.head
        probs, targets = trace.loss["probs"], trace.loss["targets"]
        norm = scale / len(targets) if reduction == "mean" else scale
        dlogits = probs.copy()
        dlogits[np.arange(len(targets)), targets] -= 1.0
        dlogits *= dt.type(norm)
        grads["mlm.out_b"] = dlogits.sum(0)
        dtok_dense = dlogits.T @ hd["tn"]
        dtn = dlogits @ T["tok_emb"]
        dtg, grads["mlm.ln.g"], grads["mlm.ln.b"] = _ln_bwd(dtn, hd["ln"])
        dt_ = dtg * gelu_grad(hd["t"])
        grads["mlm.w"] = hd["sel"].T @ dt_
        grads["mlm.b"] = dt_.sum(0)
        np.add.at(dx, (hd["rows"], hd["cols"]), dt_ @ T["mlm.w"].T)
    else:
        for name in ("mlm.out_b", "mlm.ln.g", "mlm.ln.b", "mlm.w", "mlm.b"):
            grads[name] = np.zeros_like(T[name])

    dx, grads["final_ln.g"], grads["final_ln.b"] = _ln_bwd(dx, trace.final_ln)

    h = cfg.heads
    scale_attn = dt.type(1.0 / math.sqrt(cfg.hidden // h))
    for i in reversed(range(cfg.layers)):
        p = f"layer{i}."
        c = trace.layers[i]
        # feed-forward branch
        dz = dx if c["drop_z"] is None else dx * c["drop_z"]
        grads[p + "ffn.w2"] = _mm_grad(c["gu"], dz)
        grads[p + "ffn.b2"] = dz.sum((0, 1))
        du = (dz @ T[p + "ffn.w2"].T) * gelu_grad(c["u"])
        grads[p + "ffn.w1"] = _mm_grad(c["f"], du)
        grads[p + "ffn.b1"] = du.sum((0, 1))
        dln2, grads[p + "ln2.g"], grads[p + "ln2.b"] = _ln_bwd(du @ T[p + "ffn.w1"].T, c["ln2"])
        dx = dx + dln2
        # attention branch
        do = dx if c["drop_o"] is None else dx * c["drop_o"]
        grads[p + "attn.wo"] = _mm_grad(c["ctx"], do)
        grads[p + "attn.bo"] = do.sum((0, 1))
        dctx = _split_heads(do @ T[p + "attn.wo"].T, h)
        probs = c["probs"]
        dprobs = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dctx
        ds = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True))
        ds *= scale_attn
        dq = ds @ c["k"]
        dk = ds.transpose(0, 1, 3, 2) @ c["q"]
        da = np.zeros_like(dx)
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            dproj = _merge_heads(dproj)
            grads[p + f"attn.w{name}"] = _mm_grad(c["a"], dproj)
            grads[p + f"attn.b{name}"] = dproj.sum((0, 1))
            da += dproj @ T[p + f"attn.w{name}"].T
        dln1, grads[p + "ln1.g"], grads[p + "ln1.b"] = _ln_bwd(da, c["ln1"])
        dx = dx + dln1

    if trace.emb_drop is not None:
        dx = dx * trace.emb_drop
    de, grads["emb_ln.g"], grads["emb_ln.b"] = _ln_bwd(dx, trace.emb_ln)
    grads["pos_emb"] = np.zeros_like(T["pos_emb"])
    grads["pos_emb"][:L] = de.sum(0)

    flat_ids = trace.ids.ravel()
    flat_de = de.reshape(-1, cfg.hidden)
    if dtok_dense is not None:
        np.add.at(dtok_dense, flat_ids, flat_de)
        grads["tok_emb"] = dtok_dense
    else:
        rows, inverse = np.unique(flat_ids, return_inverse=True)
        vals = np.zeros((len(rows), cfg.hidden), dtype=dt)
        np.add.at(vals, inverse, flat_de)
        grads["tok_emb"] = RowSparse(rows, vals, T["tok_emb"].shape)

    return {name: grads[name] for name in T}


def dense_grads(grads: dict[str, np.ndarray | RowSparse]) -> dict[str, np.ndarray]:
    return {k: (v.dense() if isinstance(v, RowSparse) else v) for k, v in grads.items()}


# ---------------------------------------------------------------------------
# convenience


def masked_lm_loss(
    params: EncoderParams,
    ids: np.ndarray,
    positions,
    targets,
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[MLMLoss, ForwardTrace]:
    """Forward pass of encoder, head and loss in one call, trace retained."""
    hidden, trace = encode(params, ids, train=train, rng=rng)
    logits = mlm_logits(params, hidden, positions, trace)
    loss = mlm_loss(logits, targets, trace)
    return loss, trace


def cls_vectors(params: EncoderParams, ids: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Hidden state at position 0 for each row of ``ids``, in eval mode."""
    ids = np.asarray(ids)
    out = np.empty((len(ids), params.config.hidden), dtype=params.config.dtype)
    for lo in range(0, len(ids), batch_size):
        hidden, _ = encode(params, ids[lo : lo + batch_size])
        out[lo : lo + batch_size] = hidden[:, 0]
    return out
