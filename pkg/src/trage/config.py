"""Run configuration: TOML file merged over defaults, then env, then flags.

All keys live in one flat table. Every field below carries its default
and a help string; the help strings double as ``--flag`` help in the CLI.
"""

from __future__ import annotations

import os
import re
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import tomli
import tomli_w

from .classify import FinetuneConfig
from .errors import ConfigError, ParseError, UnknownKey
from .masking import FIELD_SCHEMAS
from .training import PretrainConfig

SEED_ENV = "TRAGE_SEED"


def _opt(default: Any, help: str, **kw) -> Any:
    meta = {"help": help, **kw}
    if isinstance(default, list):
        return field(default_factory=lambda: list(default), metadata=meta)
    return field(default=default, metadata=meta)


@dataclass
class RunConfig:
    # -- general -------------------------------------------------------------
    seed: int = _opt(0, "base seed for every random stream (overridden by $TRAGE_SEED)")
    output_dir: str = _opt("runs/default", "directory that receives all artifacts of the run", path=True)
    plots: bool = _opt(True, "render PNG figures next to the CSV outputs")
    # -- inputs --------------------------------------------------------------
    pretrain_pcaps: list = _opt([], "pcap files whose packets form the pre-training corpus",
                                path=True, item=str)
    manifest: str = _opt("", "labelled flow manifest CSV (pcap_path, flow_index, label)", path=True)
    checkpoint: str = _opt("", "pre-training checkpoint used by finetune", path=True)
    model: str = _opt("", "fine-tuned classifier used by evaluate", path=True)
    predictions: str = _opt("", "evaluate: file of predicted class ids (last column, one per row)", path=True)
    labels: str = _opt("", "evaluate: file of true class ids, same layout as predictions", path=True)
    eval_split: str = _opt("test", "evaluate: manifest flows to score, 'test' split or 'all'")
    # -- pre-training --------------------------------------------------------
    steps: int = _opt(2000, "pre-training steps (the large-scale preset uses 100000)")
    lr_pretrain: float = _opt(1e-3, "pre-training learning rate")
    batch_size: int = _opt(32, "pre-training batch size, per encoder")
    mask_ratio: float = _opt(0.15, "fraction of maskable tokens masked per sequence")
    geometric_p: float = _opt(0.7, "success probability of the span-length law for header masking")
    dynamic_masking: bool = _opt(True, "draw fresh mask plans every step")
    field_level_header: bool = _opt(True, "geometric span masking on headers (random masking when off)")
    warmup_frac: float = _opt(0.01, "fraction of steps with linear learning-rate warmup")
    clip_norm: float = _opt(1.0, "global gradient-norm clip during pre-training (0 disables)")
    header_len: int = _opt(128, "header sequence length in tokens, CLS included")
    payload_len: int = _opt(128, "payload sequence length in tokens, CLS included")
    hidden: int = _opt(64, "encoder width")
    layers: int = _opt(2, "encoder depth")
    heads: int = _opt(2, "attention heads")
    dropout: float = _opt(0.1, "dropout rate while training")
    share_encoders: bool = _opt(False, "use one encoder for headers and payloads")
    log_every: int = _opt(100, "log a loss line every N steps")
    # -- fine-tuning ---------------------------------------------------------
    epochs: int = _opt(10, "fine-tuning epochs")
    lr_finetune: float = _opt(2e-5, "fine-tuning learning rate")
    finetune_batch_size: int = _opt(16, "flows per fine-tuning batch")
    n_max_packets: int = _opt(5, "packets per flow used for the flow representation")
    head_dim: int = _opt(128, "hidden width of the classification head")
    freeze_encoders: bool = _opt(False, "train the classification head only")
    fusion: str = _opt("mean", "flow fusion of packet vectors: mean or concat")
    flow_cap: int = _opt(5000, "maximum flows sampled per class")
    split_ratio: list = _opt([8, 1, 1], "train:val:test proportions", item=int)
    min_flows: int = _opt(10, "classes with fewer flows are dropped")
    # -- analysis ------------------------------------------------------------
    mask_stats_plans: int = _opt(10000, "field-level plans simulated by mask-stats")
    mask_stats_tokens: int = _opt(64, "real tokens per simulated sequence in mask-stats")
    schemas: list = _opt(["ipv4", "tcp"], "protocol field tables counted by mask-stats", item=str)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        checks = [
            ("geometric_p", 0.0 < self.geometric_p <= 1.0, "must lie in (0, 1]"),
            ("mask_ratio", 0.0 < self.mask_ratio < 1.0, "must lie in (0, 1)"),
            ("steps", self.steps >= 1, "must be >= 1"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("finetune_batch_size", self.finetune_batch_size >= 1, "must be >= 1"),
            ("epochs", self.epochs >= 0, "must be >= 0"),
            ("n_max_packets", self.n_max_packets >= 1, "must be >= 1"),
            ("header_len", self.header_len >= 2, "must be >= 2"),
            ("payload_len", self.payload_len >= 2, "must be >= 2"),
            ("heads", self.heads >= 1 and self.hidden % self.heads == 0, "must divide hidden"),
            ("dropout", 0.0 <= self.dropout < 1.0, "must lie in [0, 1)"),
            ("warmup_frac", 0.0 <= self.warmup_frac < 1.0, "must lie in [0, 1)"),
            ("fusion", self.fusion in ("mean", "concat"), "must be 'mean' or 'concat'"),
            ("split_ratio", len(self.split_ratio) == 3 and all(int(r) >= 0 for r in self.split_ratio)
             and sum(self.split_ratio) > 0, "must be three non-negative integers"),
            ("eval_split", self.eval_split in ("test", "all"), "must be 'test' or 'all'"),
            ("schemas", bool(self.schemas) and all(str(n).lower() in FIELD_SCHEMAS for n in self.schemas),
             f"must name tables among {sorted(FIELD_SCHEMAS)}"),
            ("flow_cap", self.flow_cap >= 1, "must be >= 1"),
            ("mask_stats_plans", self.mask_stats_plans >= 1, "must be >= 1"),
            ("mask_stats_tokens", self.mask_stats_tokens >= 2, "must be >= 2"),
        ]
        for key, ok, why in checks:
            if not ok:
                raise ConfigError(f"{key} = {getattr(self, key)!r} {why}")

    # -- views -------------------------------------------------------------

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(
            steps=self.steps, lr=self.lr_pretrain, batch_size=self.batch_size,
            mask_ratio=self.mask_ratio, geometric_p=self.geometric_p,
            dynamic_masking=self.dynamic_masking, field_level_header=self.field_level_header,
            warmup_frac=self.warmup_frac, clip_norm=self.clip_norm or None, seed=self.seed,
            header_len=self.header_len, payload_len=self.payload_len, hidden=self.hidden,
            layers=self.layers, heads=self.heads, dropout=self.dropout,
            share_encoders=self.share_encoders, log_every=self.log_every,
        )

    def finetune_config(self) -> FinetuneConfig:
        return FinetuneConfig(
            epochs=self.epochs, lr=self.lr_finetune, batch_size=self.finetune_batch_size,
            n_max_packets=self.n_max_packets, head_dim=self.head_dim,
            freeze_encoders=self.freeze_encoders, fusion=self.fusion, seed=self.seed,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


FIELDS = {f.name: f for f in fields(RunConfig)}


def default_of(name: str) -> Any:
    f = FIELDS[name]
    return f.default_factory() if f.default is MISSING else f.default


def _key_line(text: str, key: str) -> int | None:
    m = re.search(rf"^\s*{re.escape(key)}\s*=", text, flags=re.MULTILINE)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _coerce(name: str, value: Any, lineno: int | None = None) -> Any:
    """Check a raw value against the default's type; ints are accepted for floats."""
    want = type(default_of(name))
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is bool and not isinstance(value, bool):
        raise ParseError(f"{name} must be true or false, got {value!r}", lineno)
    if not isinstance(value, want) or (want is int and isinstance(value, bool)):
        raise ParseError(f"{name} must be {want.__name__}, got {type(value).__name__}", lineno)
    item = FIELDS[name].metadata.get("item")
    if item is not None and not all(isinstance(v, item) and not isinstance(v, bool) for v in value):
        raise ParseError(f"{name} must be a list of {item.__name__}", lineno)
    return value


def parse_config_text(text: str, base_dir: str | Path = ".") -> dict[str, Any]:
    """Parse TOML text into validated overrides; relative paths resolve against ``base_dir``."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno) from None
    out: dict[str, Any] = {}
    for key, value in raw.items():
        lineno = _key_line(text, key)
        if key not in FIELDS:
            where = f"line {lineno}: " if lineno else ""
            raise UnknownKey(f"{where}unknown key {key!r}")
        out[key] = _coerce(key, value, lineno)
    return resolve_paths(out, base_dir)


def resolve_paths(values: Mapping[str, Any], base_dir: str | Path) -> dict[str, Any]:
    base = Path(base_dir)
    out = dict(values)
    for key, value in values.items():
        if not FIELDS[key].metadata.get("path"):
            continue
        if isinstance(value, list):
            out[key] = [str((base / v).resolve()) for v in value]
        elif value:
            out[key] = str((base / value).resolve())
    return out


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
) -> RunConfig:
    """Defaults, then the file at ``path``, then ``$TRAGE_SEED``, then ``overrides``.

    ``overrides`` hold already-typed values (e.g. parsed CLI flags); their
    relative paths resolve against the working directory.
    """
    values: dict[str, Any] = {}
    text = ""
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror or exc}") from None
        values.update(parse_config_text(text, p.parent))
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        try:
            values["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"${SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    if overrides:
        unknown = set(overrides) - set(FIELDS)
        if unknown:
            raise UnknownKey(f"unknown keys {sorted(unknown)}")
        values.update(resolve_paths({k: _coerce(k, v) for k, v in overrides.items()}, Path.cwd()))
    if "output_dir" not in values:
        values["output_dir"] = str(Path(default_of("output_dir")).resolve())
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        key = str(exc).split(" ", 1)[0]
        lineno = _key_line(text, key) if text else None
        # report validation failures against the file line when the file set the key
        if lineno is not None and (not overrides or key not in overrides):
            raise ParseError(str(exc), lineno) from None
        raise
