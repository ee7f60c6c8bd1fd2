"""Mask planning for the two pre-training objectives.

Headers get field-level masking: contiguous spans whose lengths follow a
geometric law, approximating protocol fields without parsing them. Payloads
get uniform random masking. Plans are a pure function of a
``(base_seed, step, sequence_id)`` triple, so dynamic masking (a fresh plan
every step) and static masking (one plan per sequence) are both exactly
reproducible.
"""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import PlanMismatch
from .tokenize import CLS, MASK, TokenSequence

_M64 = (1 << 64) - 1
# step value used for every plan when dynamic masking is off
STATIC_STEP = _M64


class MaskKind(enum.Enum):
    FIELD_LEVEL = "field"
    RANDOM = "random"


@dataclass(frozen=True)
class GeometricSampler:
    """Geo(p) on {1, 2, ...}: ``P(l = k) = (1 - p)**(k - 1) * p``."""

    p: float = 0.7

    def __post_init__(self) -> None:
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"geometric p must lie in (0, 1], got {self.p}")

    @property
    def mean(self) -> float:
        return 1.0 / self.p

    def pmf(self, k: int | np.ndarray) -> float | np.ndarray:
        k = np.asarray(k)
        out = np.where(k >= 1, (1.0 - self.p) ** (np.maximum(k, 1) - 1) * self.p, 0.0)
        return float(out) if out.ndim == 0 else out

    def cdf(self, k: int) -> float:
        return 1.0 - (1.0 - self.p) ** k if k >= 1 else 0.0

    def from_uniform(self, u: float | np.ndarray) -> int | np.ndarray:
        """Inverse CDF: ``1 + floor(ln(1 - u) / ln(1 - p))`` for ``u`` in [0, 1)."""
        u = np.asarray(u, dtype=np.float64)
        if self.p == 1.0:
            out = np.ones(u.shape, dtype=np.int64)
        else:
            out = 1 + np.floor(np.log1p(-u) / math.log1p(-self.p)).astype(np.int64)
        return int(out) if out.ndim == 0 else out

    def sample(self, rng: np.random.Generator) -> int:
        return self.from_uniform(rng.random())

    def sample_many(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.from_uniform(rng.random(n))


def sample_geometric(s: GeometricSampler, rng: np.random.Generator) -> int:
    return s.sample(rng)


# ---------------------------------------------------------------------------
# seeds


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class MaskSeed:
    """Identifies one plan: which run, which training step, which sequence."""

    base_seed: int
    step: int
    sequence_id: int

    @classmethod
    def static(cls, base_seed: int, sequence_id: int) -> "MaskSeed":
        return cls(base_seed, STATIC_STEP, sequence_id)

    def stream_seed(self) -> int:
        """Chain of splitmix64 finalisers over the three components."""
        h = splitmix64(self.base_seed & _M64)
        h = splitmix64(h ^ (self.step & _M64))
        return splitmix64(h ^ (self.sequence_id & _M64))

    def rng(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.stream_seed()))


# ---------------------------------------------------------------------------
# plans


@dataclass(frozen=True)
class MaskPlan:
    positions: np.ndarray
    targets: np.ndarray
    kind: MaskKind
    budget_ratio: float
    # (start, length, truncated) per accepted span; empty for random plans
    spans: tuple[tuple[int, int, bool], ...] = ()

    def __len__(self) -> int:
        return len(self.positions)

    def same_positions(self, other: "MaskPlan") -> bool:
        return np.array_equal(self.positions, other.positions)


def _empty_plan(kind: MaskKind, ratio: float) -> MaskPlan:
    empty = np.zeros(0, dtype=np.int64)
    return MaskPlan(empty, empty.astype(np.int32), kind, ratio)


def budget_for(ratio: float, maskable: int) -> int:
    # the epsilon keeps e.g. 0.15 * 100 from rounding up to 16
    return min(maskable, math.ceil(ratio * maskable - 1e-9))


def plan_field_mask(
    seq: TokenSequence,
    sampler: GeometricSampler,
    ratio: float,
    seed: MaskSeed,
) -> MaskPlan:
    """Field-level plan: non-touching spans with Geo(p) lengths.

    Each round draws a span length, then a start uniformly among the
    positions where the span fits without overlapping or abutting a span
    already chosen (so every span stays a maximal masked run). A length
    that fits nowhere costs one attempt. Rounds continue until the budget
    ``ceil(ratio * maskable)`` is met or ``10 * budget`` attempts are used.
    A length longer than the whole maskable region is truncated to it.
    """
    n = seq.real_len
    maskable = n - 1
    if maskable <= 0:
        return _empty_plan(MaskKind.FIELD_LEVEL, ratio)
    budget = budget_for(ratio, maskable)
    rng = seed.rng()
    # taken[i] for i in 0..n; index 0 (CLS) and n (first PAD) are never taken
    taken = np.zeros(n + 1, dtype=np.int64)
    spans: list[tuple[int, int, bool]] = []
    count = attempts = 0
    while count < budget and attempts < 10 * budget:
        attempts += 1
        length = sampler.sample(rng)
        truncated = length > maskable
        if truncated:
            length = maskable
        # start s is valid iff 1 <= s, s + length <= n and taken[s-1 : s+length+1] is clear
        csum = np.concatenate(([0], np.cumsum(taken)))
        starts = np.arange(1, n - length + 1)
        hi = np.minimum(starts + length + 1, n + 1)
        clear = csum[hi] - csum[starts - 1] == 0
        starts = starts[clear]
        if len(starts) == 0:
            continue
        s = int(starts[rng.integers(len(starts))])
        taken[s : s + length] = 1
        spans.append((s, length, truncated))
        count += length
    positions = np.flatnonzero(taken).astype(np.int64)
    return MaskPlan(
        positions=positions,
        targets=seq.ids[positions].copy(),
        kind=MaskKind.FIELD_LEVEL,
        budget_ratio=ratio,
        spans=tuple(sorted(spans)),
    )


def plan_random_mask(seq: TokenSequence, ratio: float, seed: MaskSeed) -> MaskPlan:
    """Random plan: ``ceil(ratio * maskable)`` positions without replacement."""
    maskable = seq.real_len - 1
    if maskable <= 0:
        return _empty_plan(MaskKind.RANDOM, ratio)
    r = budget_for(ratio, maskable)
    chosen = seed.rng().choice(maskable, size=r, replace=False)
    positions = np.sort(chosen).astype(np.int64) + 1
    return MaskPlan(positions, seq.ids[positions].copy(), MaskKind.RANDOM, ratio)


def apply_mask(seq: TokenSequence, plan: MaskPlan) -> tuple[TokenSequence, dict[int, int]]:
    """Replace every planned position with MASK; return the originals."""
    pos = plan.positions
    if len(pos) and (pos.min() < 1 or pos.max() >= seq.real_len):
        raise PlanMismatch("plan touches CLS or PAD positions")
    ids = seq.ids.copy()
    targets = {int(p): int(ids[p]) for p in pos}
    ids[pos] = MASK
    return TokenSequence(ids=ids, attn=seq.attn.copy(), real_len=seq.real_len), targets


def restore(masked: TokenSequence, targets: Mapping[int, int]) -> TokenSequence:
    ids = masked.ids.copy()
    for p, t in targets.items():
        ids[p] = t
    return TokenSequence(ids=ids, attn=masked.attn.copy(), real_len=masked.real_len)


# ---------------------------------------------------------------------------
# run-length statistics


def run_lengths(positions: Iterable[int]) -> list[int]:
    """Lengths of maximal runs of consecutive positions."""
    runs: list[int] = []
    prev = None
    for p in sorted(positions):
        if prev is not None and p == prev + 1:
            runs[-1] += 1
        else:
            runs.append(1)
        prev = p
    return runs


def run_length_counts(plans: Iterable[MaskPlan]) -> Counter:
    counts: Counter = Counter()
    for plan in plans:
        counts.update(run_lengths(plan.positions.tolist()))
    return counts


# ---------------------------------------------------------------------------
# header field-length analysis

# Field byte-lengths per protocol. Sub-byte fields are merged into the
# smallest whole-byte composite that holds them.
FIELD_SCHEMAS: dict[str, tuple[tuple[str, int], ...]] = {
    "ipv4": (
        ("version+ihl", 1),
        ("dscp+ecn", 1),
        ("total_length", 2),
        ("identification", 2),
        ("flags+fragment_offset", 2),
        ("ttl", 1),
        ("protocol", 1),
        ("header_checksum", 2),
        ("source_address", 4),
        ("destination_address", 4),
    ),
    "ipv6": (
        ("version+traffic_class+flow_label", 4),
        ("payload_length", 2),
        ("next_header", 1),
        ("hop_limit", 1),
        ("source_address", 16),
        ("destination_address", 16),
    ),
    "tcp": (
        ("source_port", 2),
        ("destination_port", 2),
        ("sequence_number", 4),
        ("acknowledgment_number", 4),
        ("data_offset+reserved+flags", 2),
        ("window", 2),
        ("checksum", 2),
        ("urgent_pointer", 2),
    ),
    "udp": (
        ("source_port", 2),
        ("destination_port", 2),
        ("length", 2),
        ("checksum", 2),
    ),
}


def field_length_counts(schemas: Sequence[str]) -> Counter:
    counts: Counter = Counter()
    for name in schemas:
        try:
            fields = FIELD_SCHEMAS[name.lower()]
        except KeyError:
            raise ValueError(f"unknown schema {name!r}; known: {sorted(FIELD_SCHEMAS)}") from None
        counts.update(length for _, length in fields)
    return counts


def normalize(counts: Mapping[int, float]) -> dict[int, float]:
    total = float(sum(counts.values()))
    return {k: v / total for k, v in sorted(counts.items())}


def field_length_histogram(schemas: Sequence[str]) -> dict[int, float]:
    """Normalised histogram of field byte-lengths over the given schemas."""
    return normalize(field_length_counts(schemas))


def truncated_geometric(p: float, max_len: int) -> np.ndarray:
    """Geo(p) pmf on 1..max_len renormalised to sum to one (index 0 is k=1)."""
    pmf = GeometricSampler(p).pmf(np.arange(1, max_len + 1))
    return pmf / pmf.sum()


def compare_geometric(hist: Mapping[int, float], p: float) -> float:
    """Total-variation distance between ``hist`` and Geo(p) truncated at its max length."""
    hist = normalize(hist)
    k_max = max(hist)
    geo = truncated_geometric(p, k_max)
    emp = np.array([hist.get(k, 0.0) for k in range(1, k_max + 1)])
    return float(0.5 * np.abs(emp - geo).sum())


def comparison_rows(
    hist: Mapping[int, float], p: float, truncate: bool = True
) -> list[tuple[int, float, float]]:
    """``(length, empirical_freq, geometric_pmf)`` rows for every length up to the max."""
    hist = normalize(hist)
    k_max = max(hist)
    if truncate:
        geo = truncated_geometric(p, k_max)
    else:
        geo = GeometricSampler(p).pmf(np.arange(1, k_max + 1))
    return [(k, hist.get(k, 0.0), float(geo[k - 1])) for k in range(1, k_max + 1)]


def simulate_run_lengths(
    n_plans: int,
    real_tokens: int = 64,
    p: float = 0.7,
    ratio: float = 0.15,
    base_seed: int = 0,
) -> Counter:
    """Maximal-run histogram over ``n_plans`` field-level plans on random sequences."""
    from .tokenize import as_sequence

    rng = np.random.default_rng(base_seed)
    sampler = GeometricSampler(p)
    counts: Counter = Counter()
    for i in range(n_plans):
        ids = np.zeros(real_tokens + 8, dtype=np.int32)
        ids[0] = CLS
        ids[1:real_tokens] = rng.integers(5, 65541, size=real_tokens - 1)
        plan = plan_field_mask(as_sequence(ids), sampler, ratio, MaskSeed(base_seed, 0, i))
        counts.update(run_lengths(plan.positions.tolist()))
    return counts
