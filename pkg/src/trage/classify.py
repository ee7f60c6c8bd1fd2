"""Flow classification on top of the pre-trained encoders.

A packet is represented by the two CLS vectors (header encoder, payload
encoder) concatenated; a flow by the mean over its first ``n_max`` packets.
An MLP with softmax maps flow vectors to class probabilities. Fine-tuning
updates the head and, unless frozen, both encoders end to end.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Hashable, Iterable, Mapping, Sequence

import numpy as np

from .checkpoint import load_container, save_container
from .encoder import EncoderConfig, EncoderParams, backward, dense_grads, encode, gelu, gelu_grad, truncated_normal
from .errors import DegenerateDataset, LengthMismatch, ManifestMismatch, TooFewFlows
from .ingest import Flow, PacketRecord, load_flows
from .masking import MaskSeed
from .optim import Adam, AdamConfig
from .tokenize import tokenize_batch, tokenize_bytes
from .training import Checkpoint

log = logging.getLogger(__name__)

N_MAX_PACKETS = 5
FLOW_CAP = 5000


@dataclass
class FlowSample:
    flow: Flow
    label: int


# ---------------------------------------------------------------------------
# representations


def packet_representation(header: EncoderParams, payload: EncoderParams, rec: PacketRecord) -> np.ndarray:
    """CLS vector of the header encoder followed by that of the payload encoder."""
    h_ids = tokenize_bytes(rec.header_bytes, header.config.max_len).ids
    p_ids = tokenize_bytes(rec.payload_bytes, payload.config.max_len).ids
    hh, _ = encode(header, h_ids)
    hp, _ = encode(payload, p_ids)
    return np.concatenate([hh[0, 0], hp[0, 0]])


def flow_representation(vectors: Sequence[np.ndarray], n_max: int = N_MAX_PACKETS) -> np.ndarray:
    """Mean of the first ``min(len(vectors), n_max)`` packet vectors."""
    if len(vectors) == 0:
        raise ValueError("a flow needs at least one packet vector")
    return np.mean(np.stack(vectors[:n_max]), axis=0)


# ---------------------------------------------------------------------------
# head


class ClassifierHead:
    """``softmax(W2 gelu(W1 x + b1) + b2)``."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = tensors

    @classmethod
    def init(cls, in_dim: int, hidden: int, n_classes: int, rng: np.random.Generator, dtype=np.float32):
        return cls(
            {
                "w1": truncated_normal(rng, (in_dim, hidden)).astype(dtype),
                "b1": np.zeros(hidden, dtype=dtype),
                "w2": truncated_normal(rng, (hidden, n_classes)).astype(dtype),
                "b2": np.zeros(n_classes, dtype=dtype),
            }
        )

    @property
    def n_classes(self) -> int:
        return self.tensors["b2"].shape[0]

    def logits(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        t = self.tensors
        u = x @ t["w1"] + t["b1"]
        g = gelu(u)
        return g @ t["w2"] + t["b2"], {"x": x, "u": u, "g": g}

    def probs(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.logits(x)[0])

    def backward(self, cache: dict, dlogits: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        t = self.tensors
        grads = {"w2": cache["g"].T @ dlogits, "b2": dlogits.sum(0)}
        du = (dlogits @ t["w2"].T) * gelu_grad(cache["u"])
        grads["w1"] = cache["x"].T @ du
        grads["b1"] = du.sum(0)
        return grads, du @ t["w1"].T

    def copy(self) -> "ClassifierHead":
        return ClassifierHead({k: v.copy() for k, v in self.tensors.items()})


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


# ---------------------------------------------------------------------------
# model


@dataclass
class FinetuneConfig:
    epochs: int = 10
    lr: float = 2e-5
    batch_size: int = 16
    n_max_packets: int = N_MAX_PACKETS
    head_dim: int = 128
    freeze_encoders: bool = False
    fusion: str = "mean"  # or "concat": first n_max packet vectors side by side, zero-padded
    seed: int = 0

    def __post_init__(self) -> None:
        if self.fusion not in ("mean", "concat"):
            raise ValueError(f"fusion must be 'mean' or 'concat', got {self.fusion!r}")
        if self.epochs < 0 or self.n_max_packets < 1:
            raise ValueError("epochs must be >= 0 and n_max_packets >= 1")


@dataclass
class FlowTokens:
    """Pre-tokenised packets of many flows, capped at ``n_max`` per flow."""

    header_ids: np.ndarray
    payload_ids: np.ndarray
    flow_of_packet: np.ndarray
    starts: np.ndarray
    counts: np.ndarray

    @classmethod
    def build(cls, flows: Sequence[Flow], header_len: int, payload_len: int, n_max: int) -> "FlowTokens":
        packets = [p for f in flows for p in f.packets[:n_max]]
        counts = np.array([min(len(f.packets), n_max) for f in flows], dtype=np.int64)
        if np.any(counts == 0):
            raise ValueError("every flow needs at least one packet")
        h, _ = tokenize_batch([p.header_bytes for p in packets], header_len)
        pl, _ = tokenize_batch([p.payload_bytes for p in packets], payload_len)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        return cls(h, pl, np.repeat(np.arange(len(flows)), counts), starts, counts)

    def __len__(self) -> int:
        return len(self.counts)

    def rows(self, flow_idx: np.ndarray) -> np.ndarray:
        return np.concatenate([np.arange(self.starts[i], self.starts[i] + self.counts[i]) for i in flow_idx])


class FlowClassifier:
    def __init__(
        self,
        header: EncoderParams,
        payload: EncoderParams,
        head: ClassifierHead,
        n_max_packets: int = N_MAX_PACKETS,
        fusion: str = "mean",
        class_names: Sequence[str] | None = None,
    ):
        self.header = header
        self.payload = payload
        self.head = head
        self.n_max_packets = n_max_packets
        self.fusion = fusion
        self.class_names = list(class_names) if class_names else [str(i) for i in range(head.n_classes)]

    @classmethod
    def from_checkpoint(
        cls, ckpt: Checkpoint, n_classes: int, cfg: FinetuneConfig, class_names=None
    ) -> "FlowClassifier":
        header = ckpt.header.copy()
        payload = header if ckpt.shared else ckpt.payload.copy()
        d = header.config.hidden + payload.config.hidden
        in_dim = d * cfg.n_max_packets if cfg.fusion == "concat" else d
        head = ClassifierHead.init(in_dim, cfg.head_dim, n_classes, np.random.default_rng(cfg.seed),
                                   header.config.dtype)
        return cls(header, payload, head, cfg.n_max_packets, cfg.fusion, class_names)

    @property
    def shared(self) -> bool:
        return self.header is self.payload

    @property
    def n_classes(self) -> int:
        return self.head.n_classes

    def tokens(self, flows: Sequence[Flow]) -> FlowTokens:
        return FlowTokens.build(flows, self.header.config.max_len, self.payload.config.max_len, self.n_max_packets)

    def _fuse(self, pk: np.ndarray, toks: FlowTokens, flow_idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Flow vectors from packet vectors, plus the linear map used (for backward)."""
        nf, npk = len(flow_idx), len(pk)
        counts = toks.counts[flow_idx]
        if self.fusion == "mean":
            mix = np.zeros((nf, npk), dtype=pk.dtype)
            mix[np.repeat(np.arange(nf), counts), np.arange(npk)] = np.repeat(1.0 / counts, counts)
            return mix @ pk, mix
        slot = np.concatenate([np.arange(c) for c in counts])
        owner = np.repeat(np.arange(nf), counts)
        out = np.zeros((nf, self.n_max_packets, pk.shape[1]), dtype=pk.dtype)
        out[owner, slot] = pk
        return out.reshape(nf, -1), np.stack([owner, slot])

    def _unfuse(self, dflow: np.ndarray, mix: np.ndarray) -> np.ndarray:
        if self.fusion == "mean":
            return mix.T @ dflow
        owner, slot = mix
        return dflow.reshape(len(dflow), self.n_max_packets, -1)[owner, slot]

    def forward(self, toks: FlowTokens, flow_idx: np.ndarray, train: bool = False, rng=None):
        rows = toks.rows(flow_idx)
        hh, tr_h = encode(self.header, toks.header_ids[rows], train=train, rng=rng)
        hp, tr_p = encode(self.payload, toks.payload_ids[rows], train=train, rng=rng)
        d_h = hh.shape[-1]
        pk = np.concatenate([hh[:, 0], hp[:, 0]], axis=1)
        flow_vec, mix = self._fuse(pk, toks, flow_idx)
        logits, head_cache = self.head.logits(flow_vec)
        return logits, dict(tr_h=tr_h, tr_p=tr_p, mix=mix, head=head_cache, d_h=d_h,
                            shapes=(hh.shape, hp.shape))

    def flow_vectors(self, flows: Sequence[Flow], batch_size: int = 64) -> np.ndarray:
        toks = self.tokens(flows)
        out = []
        for lo in range(0, len(toks), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(toks)))
            rows = toks.rows(idx)
            hh, _ = encode(self.header, toks.header_ids[rows])
            hp, _ = encode(self.payload, toks.payload_ids[rows])
            pk = np.concatenate([hh[:, 0], hp[:, 0]], axis=1)
            out.append(self._fuse(pk, toks, idx)[0])
        return np.concatenate(out)

    def predict_proba(self, flows: Sequence[Flow] | FlowTokens, batch_size: int = 64) -> np.ndarray:
        toks = flows if isinstance(flows, FlowTokens) else self.tokens(flows)
        out = []
        for lo in range(0, len(toks), batch_size):
            logits, _ = self.forward(toks, np.arange(lo, min(lo + batch_size, len(toks))))
            out.append(softmax(logits))
        return np.concatenate(out) if out else np.zeros((0, self.n_classes))

    def predict(self, flows: Sequence[Flow] | FlowTokens, batch_size: int = 64) -> np.ndarray:
        return self.predict_proba(flows, batch_size).argmax(-1)

    def copy(self) -> "FlowClassifier":
        header = self.header.copy()
        payload = header if self.shared else self.payload.copy()
        return FlowClassifier(header, payload, self.head.copy(), self.n_max_packets, self.fusion,
                              self.class_names)

    def encoder_checksums(self) -> tuple[str, str]:
        return self.header.checksum(), self.payload.checksum()

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        tensors = {f"header.{k}": v for k, v in self.header.items()}
        if not self.shared:
            tensors.update({f"payload.{k}": v for k, v in self.payload.items()})
        tensors.update({f"head.{k}": v for k, v in self.head.tensors.items()})
        meta = {
            "kind": "classifier",
            "header_config": self.header.config.to_dict(),
            "payload_config": self.payload.config.to_dict(),
            "shared": self.shared,
            "n_max_packets": self.n_max_packets,
            "fusion": self.fusion,
            "class_names": self.class_names,
        }
        save_container(path, meta, tensors)

    @classmethod
    def load(cls, path: str | Path) -> "FlowClassifier":
        meta, tensors = load_container(path)
        if meta.get("kind") != "classifier":
            raise ManifestMismatch(f"{path} is not a fine-tuned classifier")
        ckpt = Checkpoint.from_parts(meta, tensors)
        head = ClassifierHead({k[5:]: v for k, v in tensors.items() if k.startswith("head.")})
        return cls(ckpt.header, ckpt.payload, head, int(meta["n_max_packets"]), meta["fusion"],
                   meta.get("class_names"))


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    confusion: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float

    def rows(self, class_names: Sequence[str] | None = None) -> list[list]:
        names = class_names or [str(i) for i in range(len(self.f1))]
        out = [
            [names[c], float(self.precision[c]), float(self.recall[c]), float(self.f1[c]), int(self.support[c])]
            for c in range(len(self.f1))
        ]
        out.append(["macro", self.macro_precision, self.macro_recall, self.macro_f1, int(self.support.sum())])
        return out


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den != 0)
    return out


def _mean(x: np.ndarray) -> float:
    # correctly rounded, so the result does not depend on summation order
    return math.fsum(x.tolist()) / len(x)


def evaluate(pred: Sequence[int], true: Sequence[int], n_classes: int) -> Metrics:
    """Per-class and macro precision/recall/F1 (0/0 taken as 0).

    Macro averages run over the classes present in ``true``.
    """
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape:
        raise LengthMismatch(f"{len(pred)} predictions for {len(true)} labels")
    if len(true) == 0:
        raise ValueError("cannot evaluate an empty label set")
    for name, arr in (("prediction", pred), ("label", true)):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"{name} outside 0..{n_classes - 1}")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    tp = np.diag(conf).astype(np.float64)
    precision = _safe_div(tp, conf.sum(0))
    recall = _safe_div(tp, conf.sum(1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    support = conf.sum(1)
    present = support > 0
    return Metrics(
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        confusion=conf,
        macro_precision=_mean(precision[present]),
        macro_recall=_mean(recall[present]),
        macro_f1=_mean(f1[present]),
        accuracy=float(tp.sum() / len(true)),
    )


def write_metrics_csv(path: str | Path, metrics: Metrics, class_names=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "precision", "recall", "f1", "support"])
        w.writerows(metrics.rows(class_names))


def write_confusion_csv(path: str | Path, metrics: Metrics, class_names=None) -> None:
    n = len(metrics.confusion)
    names = class_names or [str(i) for i in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *names])
        for c in range(n):
            w.writerow([names[c], *metrics.confusion[c].tolist()])


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class FinetuneResult:
    model: FlowClassifier
    best_epoch: int
    best_val_f1: float
    history: list[dict[str, float]] = field(default_factory=list)


def finetune(
    cfg: FinetuneConfig,
    train: Sequence[FlowSample],
    val: Sequence[FlowSample],
    ckpt: Checkpoint,
    n_classes: int | None = None,
    class_names: Sequence[str] | None = None,
) -> FinetuneResult:
    """Train head (and encoders unless frozen) with cross-entropy.

    The model from the epoch with the best validation macro-F1 is returned;
    with ``epochs=0`` the freshly initialised model comes back untouched.
    """
    labels = np.array([s.label for s in train], dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise DegenerateDataset("fine-tuning needs at least two classes in the training set")
    n_classes = n_classes or int(max(labels.max(), max((s.label for s in val), default=0)) + 1)
    model = FlowClassifier.from_checkpoint(ckpt, n_classes, cfg, class_names)
    result = FinetuneResult(model=model, best_epoch=0, best_val_f1=math.nan)
    if cfg.epochs == 0:
        return result

    toks = model.tokens([s.flow for s in train])
    val_toks = model.tokens([s.flow for s in val]) if val else None
    val_labels = np.array([s.label for s in val], dtype=np.int64)
    adam = AdamConfig(lr=cfg.lr, clip_norm=None)
    opt_head = Adam(model.head.tensors, adam)
    opt_enc = []
    if not cfg.freeze_encoders:
        opt_enc.append(Adam(model.header.tensors, adam))
        if not model.shared:
            opt_enc.append(Adam(model.payload.tensors, adam))
    order_rng = np.random.default_rng(cfg.seed)
    step = 0
    best = None
    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.permutation(len(train))
        total = 0.0
        for lo in range(0, len(perm), cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            drop_rng = None if cfg.freeze_encoders else MaskSeed(cfg.seed, step, 0).rng()
            total += _train_batch(model, toks, idx, labels[idx], opt_head, opt_enc, drop_rng) * len(idx)
            step += 1
        row = {"epoch": epoch, "train_loss": total / len(train)}
        if val_toks is not None and len(val):
            m = evaluate(model.predict(val_toks), val_labels, n_classes)
            row["val_macro_f1"] = m.macro_f1
            if best is None or m.macro_f1 > result.best_val_f1:
                best = model.copy()
                result.best_val_f1, result.best_epoch = m.macro_f1, epoch
        result.history.append(row)
        log.info("finetune epoch %d: %s", epoch, {k: round(v, 4) for k, v in row.items()})
    result.model = best if best is not None else model
    return result


def _train_batch(model: FlowClassifier, toks, idx, y, opt_head, opt_enc, rng) -> float:
    train_enc = bool(opt_enc)
    logits, cache = model.forward(toks, idx, train=train_enc, rng=rng)
    probs = softmax(logits.astype(np.float64))
    loss = float(-np.log(probs[np.arange(len(y)), y] + 1e-300).mean())
    dlogits = probs
    dlogits[np.arange(len(y)), y] -= 1.0
    dlogits = (dlogits / len(y)).astype(logits.dtype)
    g_head, dflow = model.head.backward(cache["head"], dlogits)
    opt_head.step(g_head)
    if not train_enc:
        return loss
    dpk = model._unfuse(dflow, cache["mix"])
    d_h = cache["d_h"]
    dh = np.zeros(cache["shapes"][0], dtype=dpk.dtype)
    dh[:, 0] = dpk[:, :d_h]
    dp = np.zeros(cache["shapes"][1], dtype=dpk.dtype)
    dp[:, 0] = dpk[:, d_h:]
    g_h = backward(cache["tr_h"], dhidden=dh)
    g_p = backward(cache["tr_p"], dhidden=dp)
    if model.shared:
        a, b = dense_grads(g_h), dense_grads(g_p)
        opt_enc[0].step({k: a[k] + b[k] for k in a})
    else:
        opt_enc[0].step(g_h)
        opt_enc[1].step(g_p)
    return loss


# ---------------------------------------------------------------------------
# sampling and splitting


@dataclass
class Split:
    train: list[FlowSample]
    val: list[FlowSample]
    test: list[FlowSample]
    dropped: list[Hashable] = field(default_factory=list)


def sample_and_split(
    flows_by_class: Mapping[int, Sequence[Any]],
    cap: int = FLOW_CAP,
    seed: int = 0,
    ratio: tuple[int, int, int] = (8, 1, 1),
    min_flows: int = 10,
) -> Split:
    """Per-class capped sampling followed by a stratified train/val/test split.

    For a class with ``n`` sampled flows the split sizes are
    ``floor(n * r_train / R)``, ``floor(n * r_val / R)`` and the remainder.
    Classes with fewer than ``min_flows`` flows are dropped with a
    :class:`TooFewFlows` warning.
    """
    rng = np.random.default_rng(seed)
    total = sum(ratio)
    split = Split([], [], [])
    for label in sorted(flows_by_class):
        items = flows_by_class[label]
        if len(items) < min_flows:
            warnings.warn(f"class {label!r} has {len(items)} flows (< {min_flows}); dropped", TooFewFlows)
            split.dropped.append(label)
            continue
        chosen = rng.permutation(len(items))[: min(len(items), cap)]
        n = len(chosen)
        n_train = n * ratio[0] // total
        n_val = n * ratio[1] // total
        for part, sel in (
            (split.train, chosen[:n_train]),
            (split.val, chosen[n_train : n_train + n_val]),
            (split.test, chosen[n_train + n_val :]),
        ):
            part.extend(FlowSample(items[i], label) for i in sel)
    return split


def group_by_label(samples: Iterable[FlowSample]) -> dict[int, list[Flow]]:
    out: dict[int, list[Flow]] = defaultdict(list)
    for s in samples:
        out[s.label].append(s.flow)
    return dict(out)


def load_manifest(path: str | Path) -> tuple[list[FlowSample], list[str]]:
    """Read a ``pcap_path,flow_index,label`` manifest into labelled flows.

    Relative pcap paths resolve against the manifest's directory. Integer
    labels are used as class ids; otherwise names are mapped to ids in
    sorted order.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"pcap_path", "flow_index", "label"} - set(reader.fieldnames or [])
        if missing:
            raise ManifestMismatch(f"{path}: missing columns {sorted(missing)}")
        rows = list(reader)
    raw_labels = [r["label"].strip() for r in rows]
    if all(lbl.isdigit() for lbl in raw_labels):
        n = max((int(lbl) for lbl in raw_labels), default=-1) + 1
        names = [str(i) for i in range(n)]
        ids = [int(lbl) for lbl in raw_labels]
    else:
        names = sorted(set(raw_labels))
        ids = [names.index(lbl) for lbl in raw_labels]
    cache: dict[Path, list[Flow]] = {}
    samples = []
    for row, label in zip(rows, ids):
        pcap = Path(row["pcap_path"])
        if not pcap.is_absolute():
            pcap = path.parent / pcap
        if pcap not in cache:
            cache[pcap] = load_flows(pcap)
        flows = cache[pcap]
        k = int(row["flow_index"])
        if not 0 <= k < len(flows):
            raise ManifestMismatch(f"{pcap} has {len(flows)} flows; index {k} requested")
        flow = copy.copy(flows[k])
        flow.label = label
        samples.append(FlowSample(flow, label))
    return samples, names


def finetune_config_dict(cfg: FinetuneConfig) -> dict[str, Any]:
    return asdict(cfg)
