"""Header-payload differentiated pre-training.

Each step trains the header encoder on a field-level-masked header batch
and the payload encoder on a randomly masked payload batch, with
independent Adam optimisers. Mask plans are regenerated every step
(dynamic masking) unless disabled.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Sequence

import numpy as np

from .checkpoint import FORMAT_VERSION, load_container, save_container
from .encoder import EncoderConfig, EncoderParams, backward, masked_lm_loss
from .errors import EmptyBatch, EmptyCorpus, ManifestMismatch, TrainingDiverged
from .ingest import PacketRecord
from .masking import (
    STATIC_STEP,
    GeometricSampler,
    MaskPlan,
    MaskSeed,
    plan_field_mask,
    plan_random_mask,
    splitmix64,
)
from .optim import Adam, AdamConfig
from .tokenize import MASK, TokenSequence, tokenize_batch

log = logging.getLogger(__name__)

LARGE_SCALE_STEPS = 100_000


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 32
    mask_ratio: float = 0.15
    geometric_p: float = 0.7
    dynamic_masking: bool = True
    field_level_header: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_frac: float = 0.01
    clip_norm: float | None = 1.0
    seed: int = 0
    header_len: int = 128
    payload_len: int = 128
    hidden: int = 64
    layers: int = 2
    heads: int = 2
    dropout: float = 0.1
    share_encoders: bool = False
    log_every: int = 100

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if not 0.0 < self.geometric_p <= 1.0:
            raise ValueError("geometric_p must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def large_scale(cls, **overrides) -> "PretrainConfig":
        return cls(**{"steps": LARGE_SCALE_STEPS, **overrides})

    @property
    def warmup_steps(self) -> int:
        return max(1, math.ceil(self.warmup_frac * self.steps)) if self.warmup_frac > 0 else 0

    def encoder_config(self, max_len: int) -> EncoderConfig:
        return EncoderConfig(
            max_len=max_len, hidden=self.hidden, layers=self.layers, heads=self.heads,
            dropout=self.dropout,
        )

    def adam(self) -> AdamConfig:
        return AdamConfig(
            lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
            clip_norm=self.clip_norm, warmup_steps=self.warmup_steps,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PretrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# separate seed streams so header plans, payload plans and dropout never share draws
def _stream_base(seed: int, domain: int) -> int:
    return splitmix64((seed << 2 | domain) & ((1 << 64) - 1))


HEADER_DOMAIN, PAYLOAD_DOMAIN, DROPOUT_DOMAIN, ORDER_DOMAIN = range(4)


@dataclass
class SequenceBatch:
    """Tokenised sequences with stable corpus-level ids for mask seeding."""

    ids: np.ndarray
    lens: np.ndarray
    seq_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def sequence(self, i: int) -> TokenSequence:
        ids = self.ids[i]
        return TokenSequence(ids=ids, attn=(ids != 0).astype(np.int8), real_len=int(self.lens[i]))

    @classmethod
    def from_bytes(cls, items: Sequence[bytes], max_len: int, seq_ids=None) -> "SequenceBatch":
        ids, lens = tokenize_batch(items, max_len)
        if seq_ids is None:
            seq_ids = np.arange(len(items))
        return cls(ids, lens, np.asarray(seq_ids, dtype=np.int64))

    def take(self, idx: np.ndarray) -> "SequenceBatch":
        return SequenceBatch(self.ids[idx], self.lens[idx], self.seq_ids[idx])


def plan_header(cfg: PretrainConfig, seq: TokenSequence, seed: MaskSeed) -> MaskPlan:
    if cfg.field_level_header:
        return plan_field_mask(seq, GeometricSampler(cfg.geometric_p), cfg.mask_ratio, seed)
    return plan_random_mask(seq, cfg.mask_ratio, seed)


def plan_payload(cfg: PretrainConfig, seq: TokenSequence, seed: MaskSeed) -> MaskPlan:
    return plan_random_mask(seq, cfg.mask_ratio, seed)


def mask_batch(
    batch: SequenceBatch,
    planner: Callable[[TokenSequence, MaskSeed], MaskPlan],
    base_seed: int,
    step: int,
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray], np.ndarray, list[MaskPlan]]:
    """Plan and apply masks to a whole batch.

    Returns masked ids, ``(rows, cols)`` of masked positions, the original
    ids at those positions and the per-sequence plans.
    """
    plans = [
        planner(batch.sequence(i), MaskSeed(base_seed, step, int(batch.seq_ids[i])))
        for i in range(len(batch))
    ]
    rows = np.concatenate([np.full(len(p), i, dtype=np.int64) for i, p in enumerate(plans)])
    cols = np.concatenate([p.positions for p in plans])
    targets = batch.ids[rows, cols].copy()
    masked = batch.ids.copy()
    masked[rows, cols] = MASK
    return masked, (rows, cols), targets, plans


@dataclass
class PretrainState:
    cfg: PretrainConfig
    header: EncoderParams
    payload: EncoderParams
    opt_header: Adam
    opt_payload: Adam
    step: int = 0

    @classmethod
    def init(cls, cfg: PretrainConfig) -> "PretrainState":
        rng = np.random.default_rng(_stream_base(cfg.seed, ORDER_DOMAIN))
        header = EncoderParams.init(cfg.encoder_config(cfg.header_len), rng)
        if cfg.share_encoders:
            if cfg.header_len != cfg.payload_len:
                raise ValueError("shared encoders need header_len == payload_len")
            payload = header
        else:
            payload = EncoderParams.init(cfg.encoder_config(cfg.payload_len), rng)
        opt_h = Adam(header.tensors, cfg.adam())
        opt_p = opt_h if cfg.share_encoders else Adam(payload.tensors, cfg.adam())
        return cls(cfg, header, payload, opt_h, opt_p)

    def copy(self) -> "PretrainState":
        header = self.header.copy()
        payload = header if self.cfg.share_encoders else self.payload.copy()
        new = PretrainState(self.cfg, header, payload, Adam(header.tensors, self.cfg.adam()),
                            Adam(payload.tensors, self.cfg.adam()), self.step)
        new.opt_header.load_state(self.opt_header.t, self.opt_header.state_dict())
        if self.cfg.share_encoders:
            new.opt_payload = new.opt_header
        else:
            new.opt_payload.load_state(self.opt_payload.t, self.opt_payload.state_dict())
        return new

    def mask_step(self) -> int:
        return self.step if self.cfg.dynamic_masking else STATIC_STEP


def _dropout_rng(cfg: PretrainConfig, step: int, which: int) -> np.random.Generator | None:
    if cfg.dropout == 0.0:
        return None
    return MaskSeed(_stream_base(cfg.seed, DROPOUT_DOMAIN), step, which).rng()


def pretrain_step(
    state: PretrainState,
    header_batch: SequenceBatch | None,
    payload_batch: SequenceBatch | None,
) -> tuple[PretrainState, float, float]:
    """One optimisation step on each encoder; returns per-token mean losses.

    Either batch may be ``None`` to train one side only (its loss is NaN).
    The state is updated in place and returned.
    """
    cfg = state.cfg
    mstep = state.mask_step()
    results = []
    for which, batch, params, planner, domain in (
        (0, header_batch, state.header, plan_header, HEADER_DOMAIN),
        (1, payload_batch, state.payload, plan_payload, PAYLOAD_DOMAIN),
    ):
        if batch is None:
            results.append((math.nan, None))
            continue
        masked, pos, targets, _ = mask_batch(
            batch, lambda s, sd: planner(cfg, s, sd), _stream_base(cfg.seed, domain), mstep
        )
        if len(targets) == 0:
            raise EmptyBatch("no maskable tokens in batch")
        loss, trace = masked_lm_loss(
            params, masked, pos, targets, train=True, rng=_dropout_rng(cfg, state.step, which)
        )
        results.append((loss.mean, backward(trace)))

    (loss_fm, g_h), (loss_rm, g_p) = results
    if cfg.share_encoders and g_h is not None and g_p is not None:
        state.opt_header.step(_sum_grads(g_h, g_p))
    else:
        if g_h is not None:
            state.opt_header.step(g_h)
        if g_p is not None:
            state.opt_payload.step(g_p)
    state.step += 1
    return state, loss_fm, loss_rm


def _sum_grads(a: dict, b: dict) -> dict:
    from .encoder import dense_grads

    a, b = dense_grads(a), dense_grads(b)
    return {k: a[k] + b[k] for k in a}


# ---------------------------------------------------------------------------
# corpus driver


@dataclass(frozen=True)
class LogRow:
    step: int
    loss_fm: float
    loss_rm: float
    lr: float
    wall_ms: float

    FIELDS = ("step", "loss_fm", "loss_rm", "lr", "wall_ms")

    def as_row(self) -> list:
        return [self.step, self.loss_fm, self.loss_rm, self.lr, round(self.wall_ms, 3)]


def batch_stream(n: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless index batches: a fresh seeded permutation per pass over ``n`` items."""
    rng = np.random.default_rng(seed)
    buf = np.zeros(0, dtype=np.int64)
    while True:
        while len(buf) < batch_size:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:batch_size]
        buf = buf[batch_size:]


def build_streams(cfg: PretrainConfig, corpus: Iterable[PacketRecord]) -> tuple[SequenceBatch, SequenceBatch]:
    records = list(corpus)
    if not records:
        raise EmptyCorpus("pre-training corpus has no packet records")
    headers = SequenceBatch.from_bytes([r.header_bytes for r in records], cfg.header_len)
    payloads = [r.payload_bytes for r in records if r.payload_bytes]
    return headers, SequenceBatch.from_bytes(payloads, cfg.payload_len)


@dataclass
class Checkpoint:
    """Pre-trained encoders plus enough metadata to resume or reproduce."""

    header: EncoderParams
    payload: EncoderParams
    step: int
    base_seed: int
    pretrain_config: dict[str, Any] = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] | None = None
    format_version: int = FORMAT_VERSION

    @property
    def shared(self) -> bool:
        return self.header is self.payload

    @classmethod
    def from_state(cls, state: PretrainState, with_optimizer: bool = True) -> "Checkpoint":
        opt = None
        if with_optimizer:
            opt = {f"header.{k}": v for k, v in state.opt_header.state_dict().items()}
            if not state.cfg.share_encoders:
                opt.update({f"payload.{k}": v for k, v in state.opt_payload.state_dict().items()})
            opt["t"] = np.array([state.opt_header.t, state.opt_payload.t], dtype=np.int64)
        return cls(
            header=state.header.copy(),
            payload=state.payload.copy() if not state.cfg.share_encoders else None,
            step=state.step,
            base_seed=state.cfg.seed,
            pretrain_config=state.cfg.to_dict(),
            optimizer=opt,
        )

    def __post_init__(self) -> None:
        if self.payload is None:
            self.payload = self.header

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"header.{k}": v for k, v in self.header.items()}
        if not self.shared:
            out.update({f"payload.{k}": v for k, v in self.payload.items()})
        if self.optimizer:
            out.update({f"opt.{k}": v for k, v in self.optimizer.items()})
        return out

    def metadata(self) -> dict[str, Any]:
        return {
            "kind": "pretrain",
            "format_version": self.format_version,
            "header_config": self.header.config.to_dict(),
            "payload_config": self.payload.config.to_dict(),
            "shared": self.shared,
            "step": self.step,
            "base_seed": self.base_seed,
            "pretrain_config": self.pretrain_config,
        }

    @classmethod
    def from_parts(cls, meta: dict[str, Any], tensors: dict[str, np.ndarray], prefix: str = "") -> "Checkpoint":
        def group(name: str) -> dict[str, np.ndarray]:
            p = f"{prefix}{name}."
            return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}

        try:
            header = EncoderParams(EncoderConfig(**meta["header_config"]), group("header"))
            payload = None
            if not meta.get("shared", False):
                payload = EncoderParams(EncoderConfig(**meta["payload_config"]), group("payload"))
        except (KeyError, TypeError) as exc:
            raise ManifestMismatch(f"checkpoint metadata incomplete: {exc}") from None
        return cls(
            header=header,
            payload=payload,
            step=int(meta.get("step", 0)),
            base_seed=int(meta.get("base_seed", 0)),
            pretrain_config=meta.get("pretrain_config", {}),
            optimizer=group("opt") or None,
            format_version=int(meta.get("format_version", FORMAT_VERSION)),
        )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    save_container(path, ckpt.metadata(), ckpt.tensors())


def load_checkpoint(path: str | Path) -> Checkpoint:
    meta, tensors = load_container(path)
    if meta.get("kind", "pretrain") != "pretrain":
        raise ManifestMismatch(f"{path} holds a {meta.get('kind')!r} model, not a pre-training checkpoint")
    return Checkpoint.from_parts(meta, tensors)


def run_pretrain(
    cfg: PretrainConfig,
    corpus: Iterable[PacketRecord],
    on_log: Callable[[LogRow], None] | None = None,
    check_every: int = 100,
) -> Checkpoint:
    """Pre-train both encoders on ``corpus`` for ``cfg.steps`` steps.

    Headers of all records feed the field-level task; non-empty payloads
    feed the random-masking task. The result depends only on the config
    (including its seed) and the corpus order.
    """
    headers, payloads = build_streams(cfg, corpus)
    log.info(
        "pretrain: %d header seqs, %d payload seqs, %d steps, batch %d",
        len(headers), len(payloads), cfg.steps, cfg.batch_size,
    )
    state = PretrainState.init(cfg)
    order_seed = _stream_base(cfg.seed, ORDER_DOMAIN)
    h_iter = batch_stream(len(headers), cfg.batch_size, order_seed)
    p_iter = batch_stream(len(payloads), cfg.batch_size, order_seed + 1) if len(payloads) else None

    for _ in range(cfg.steps):
        t0 = time.perf_counter()
        hb = headers.take(next(h_iter))
        pb = payloads.take(next(p_iter)) if p_iter is not None else None
        state, loss_fm, loss_rm = pretrain_step(state, hb, pb)
        if not math.isfinite(loss_fm) or (pb is not None and not math.isfinite(loss_rm)):
            raise TrainingDiverged(f"non-finite loss at step {state.step}")
        row = LogRow(state.step, loss_fm, loss_rm, state.opt_header.lr_at(state.step),
                     (time.perf_counter() - t0) * 1e3)
        if on_log is not None:
            on_log(row)
        if cfg.log_every and (state.step % cfg.log_every == 0 or state.step == 1):
            log.info("step %d loss_fm %.4f loss_rm %.4f lr %.2e", row.step, loss_fm, loss_rm, row.lr)
        if check_every and state.step % check_every == 0 and not (
            state.header.all_finite() and state.payload.all_finite()
        ):
            raise TrainingDiverged(f"non-finite parameters at step {state.step}")
    return Checkpoint.from_state(state)
