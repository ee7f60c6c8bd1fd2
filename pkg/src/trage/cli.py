"""Command-line entry point: ``trage <subcommand> [--config FILE] [--flags]``.

Exit codes: 0 on success, 1 on usage or configuration errors, 2 on data
errors (bad captures, checkpoints, manifests, mismatched inputs).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Sequence

from filelock import FileLock, Timeout

from . import plotting
from .checkpoint import MAGIC, load_container
from .classify import (
    FlowClassifier,
    Metrics,
    evaluate,
    finetune,
    group_by_label,
    load_manifest,
    sample_and_split,
    write_confusion_csv,
    write_metrics_csv,
)
from .config import FIELDS, RunConfig, default_of, load_config
from .errors import ConfigError, LengthMismatch, ManifestMismatch, OutputBusy, TrageError
from .ingest import IngestStats, iter_records, load_records, read_pcap
from .masking import (
    comparison_rows,
    field_length_counts,
    field_length_histogram,
    normalize,
    simulate_run_lengths,
)
from .synthetic import write_synthetic_dataset
from .training import LogRow, load_checkpoint, run_pretrain, save_checkpoint

log = logging.getLogger("trage")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1 instead of 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="TOML run configuration")
    for name, f in FIELDS.items():
        default = default_of(name)
        kw: dict[str, Any] = {"dest": name, "default": argparse.SUPPRESS,
                              "help": f"{f.metadata['help']} (default: {default!r})"}
        if isinstance(default, bool):
            kw["action"] = argparse.BooleanOptionalAction
        elif isinstance(default, list):
            kw.update(nargs="*", type=f.metadata.get("item", str), metavar=name.upper())
        else:
            kw.update(type=type(default), metavar=type(default).__name__.upper())
        p.add_argument(_flag(name), **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trage", description="Header/payload traffic encoders: pre-train, fine-tune, evaluate.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    helps = {
        "pretrain": "pre-train the header and payload encoders on pcap files",
        "finetune": "fine-tune a checkpoint on a labelled manifest and report test metrics",
        "evaluate": "score a fine-tuned model, or a predictions file against a labels file",
        "mask-stats": "masked-run and header field length distributions against the geometric law",
    }
    for name, text in helps.items():
        _add_config_flags(sub.add_parser(name, help=text, description=text))

    insp = sub.add_parser("inspect", help="print a checkpoint summary or the first records of a pcap",
                          description="print a checkpoint summary or the first records of a pcap")
    insp.add_argument("path", help="checkpoint (.trge) or pcap file")
    insp.add_argument("-k", "--records", type=int, default=5, help="pcap records to print (default: 5)")

    syn = sub.add_parser("synth", help="write a synthetic labelled capture set with a manifest",
                         description="write a synthetic labelled capture set with a manifest")
    syn.add_argument("out_dir", help="directory for the pcaps and manifest.csv")
    syn.add_argument("--flows-per-class", type=int, default=400)
    syn.add_argument("--classes", type=int, default=2)
    syn.add_argument("--seed", type=int, default=0)
    return parser


# ---------------------------------------------------------------------------
# run scaffolding


@contextmanager
def run_dir(cfg: RunConfig, command: str):
    """Lock the output directory, write the effective config and mirror logs to run.log."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".trage.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise OutputBusy(f"{out} is in use by another run") from None
    try:
        yield from _logged_run(cfg, command, out)
    finally:
        lock.release()


def _logged_run(cfg: RunConfig, command: str, out: Path):
    cfg.write(out / "effective_config.toml")
    with (out / "run.log").open("a") as fh:
        fh.write(f"# trage {command} at {time.strftime('%Y-%m-%d %H:%M:%S')}, effective config:\n{cfg.dumps()}\n")
    handler = logging.FileHandler(out / "run.log", mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("trage").addHandler(handler)
    try:
        log.info("%s: output in %s", command, out)
        yield out
    finally:
        logging.getLogger("trage").removeHandler(handler)
        handler.close()


def _require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if not getattr(cfg, n)]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join(_flag(n) for n in missing))


def _write_csv(path: Path, header: Sequence[str], rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _split(cfg: RunConfig):
    samples, names = load_manifest(cfg.manifest)
    split = sample_and_split(group_by_label(samples), cap=cfg.flow_cap, seed=cfg.seed,
                             ratio=tuple(cfg.split_ratio), min_flows=cfg.min_flows)
    return split, names


def _report(out: Path, cfg: RunConfig, metrics: Metrics, names: Sequence[str]) -> None:
    write_metrics_csv(out / "metrics.csv", metrics, names)
    write_confusion_csv(out / "confusion.csv", metrics, names)
    if cfg.plots:
        plotting.plot_confusion(out / "confusion.png", metrics.confusion, names)
    log.info("macro-F1 %.4f  accuracy %.4f", metrics.macro_f1, metrics.accuracy)
    print(f"macro_f1={metrics.macro_f1:.4f} accuracy={metrics.accuracy:.4f}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(cfg: RunConfig, out: Path) -> None:
    pcaps = list(cfg.pretrain_pcaps)
    if not pcaps and cfg.manifest:
        with open(cfg.manifest, newline="") as fh:
            entries = list(csv.DictReader(fh))
        if entries and "pcap_path" not in entries[0]:
            raise ManifestMismatch(f"{cfg.manifest}: missing column 'pcap_path'")
        base = Path(cfg.manifest).parent
        pcaps = sorted({str(base / e["pcap_path"]) for e in entries})
    if not pcaps:
        raise ConfigError("pretrain needs --pretrain-pcaps or --manifest")
    corpus = load_records(pcaps)
    rows: list[LogRow] = []
    ckpt = run_pretrain(cfg.pretrain_config(), corpus, on_log=rows.append)
    save_checkpoint(ckpt, out / "checkpoint.trge")
    _write_csv(out / "pretrain_log.csv", LogRow.FIELDS, (r.as_row() for r in rows))
    if cfg.plots:
        plotting.plot_losses(out / "pretrain_loss.png", [r.step for r in rows],
                             {"loss_fm (header)": [r.loss_fm for r in rows],
                              "loss_rm (payload)": [r.loss_rm for r in rows]}, title="pre-training loss")
    print(f"checkpoint: {out / 'checkpoint.trge'}")


def cmd_finetune(cfg: RunConfig, out: Path) -> None:
    _require(cfg, "manifest", "checkpoint")
    ckpt = load_checkpoint(cfg.checkpoint)
    split, names = _split(cfg)
    res = finetune(cfg.finetune_config(), split.train, split.val, ckpt, n_classes=len(names), class_names=names)
    res.model.save(out / "model.trge")
    keys = ["epoch", "train_loss", "val_macro_f1"]
    _write_csv(out / "finetune_history.csv", keys, ([h.get(k, "") for k in keys] for h in res.history))
    if cfg.plots and res.history:
        plotting.plot_history(out / "finetune_history.png", res.history)
    if split.test:
        pred = res.model.predict([s.flow for s in split.test])
        true = [s.label for s in split.test]
        _write_csv(out / "predictions.csv", ["label", "prediction"], zip(true, pred.tolist()))
        _report(out, cfg, evaluate(pred, true, len(names)), names)
    print(f"model: {out / 'model.trge'} (best epoch {res.best_epoch})")


def read_ids(path: str | Path, column: str) -> list[int]:
    """Integer class ids from the last column of a CSV/plain file, or from ``column`` if it has a header."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        return []
    idx = -1
    if not rows[0][-1].strip().lstrip("-").isdigit():
        header = [c.strip() for c in rows[0]]
        idx = header.index(column) if column in header else -1
        rows = rows[1:]
    try:
        return [int(r[idx]) for r in rows]
    except (ValueError, IndexError) as exc:
        raise LengthMismatch(f"{path}: unreadable class id ({exc})") from None


def cmd_evaluate(cfg: RunConfig, out: Path) -> None:
    if cfg.predictions or cfg.labels:
        _require(cfg, "predictions", "labels")
        pred = read_ids(cfg.predictions, "prediction")
        true = read_ids(cfg.labels, "label")
        if len(pred) != len(true):
            raise LengthMismatch(f"LengthMismatch: {len(pred)} predictions but {len(true)} labels")
        if not true:
            raise LengthMismatch("no labels to evaluate")
        if min(pred + true) < 0:
            raise LengthMismatch("class ids must be non-negative")
        n = max(pred + true) + 1
        _report(out, cfg, evaluate(pred, true, n), [str(i) for i in range(n)])
        return
    _require(cfg, "model", "manifest")
    model = FlowClassifier.load(cfg.model)
    if cfg.eval_split == "all":
        samples, _ = load_manifest(cfg.manifest)
    else:
        samples = _split(cfg)[0].test
    if not samples:
        raise LengthMismatch("no flows to evaluate")
    pred = model.predict([s.flow for s in samples])
    true = [s.label for s in samples]
    if max(true) >= model.n_classes:
        raise LengthMismatch(f"manifest has label {max(true)} but the model knows {model.n_classes} classes")
    _write_csv(out / "predictions.csv", ["label", "prediction"], zip(true, pred.tolist()))
    _report(out, cfg, evaluate(pred, true, model.n_classes), model.class_names)


def cmd_mask_stats(cfg: RunConfig, out: Path) -> None:
    hist = field_length_histogram(cfg.schemas)
    field_rows = comparison_rows(hist, cfg.geometric_p)
    _write_csv(out / "field_lengths.csv", ["length", "empirical_freq", "geometric_pmf"], field_rows)
    counts = simulate_run_lengths(cfg.mask_stats_plans, cfg.mask_stats_tokens, cfg.geometric_p,
                                  cfg.mask_ratio, cfg.seed)
    run_rows = comparison_rows(counts, cfg.geometric_p, truncate=False)
    _write_csv(out / "run_lengths.csv", ["length", "empirical_freq", "geometric_pmf"], run_rows)
    if cfg.plots:
        plotting.plot_length_comparison(out / "field_lengths.png", field_rows,
                                        f"header field lengths ({'+'.join(cfg.schemas)})", "field share")
        plotting.plot_length_comparison(out / "run_lengths.png", run_rows,
                                        "masked run lengths", "run share")
    print("field lengths:", dict(sorted(field_length_counts(cfg.schemas).items())))
    print("mean masked run:", round(sum(k * v for k, v in normalize(counts).items()), 4))


def cmd_inspect(path: str, k: int) -> None:
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        meta, tensors = load_container(path)
        print(f"{path}: {meta.get('kind', 'pretrain')} container, format {meta.get('format_version')}")
        for key in sorted(meta):
            if key not in ("tensors", "pretrain_config"):
                print(f"  {key}: {meta[key]}")
        if meta.get("pretrain_config"):
            print("  pretrain_config: " + ", ".join(f"{a}={b}" for a, b in meta["pretrain_config"].items()))
        total = sum(t.size for name, t in tensors.items() if not name.startswith("opt."))
        print(f"  tensors: {len(tensors)} ({total} model parameters)")
        for name, t in tensors.items():
            print(f"    {name:<40} {str(t.dtype):<8} {tuple(t.shape)}")
        return
    stats = IngestStats()
    shown = 0
    for rec in iter_records(read_pcap(path), stats):
        if shown >= k:
            break
        shown += 1
        print(f"[{shown}] {rec.capture_ts.seconds:.6f} {rec.flow_key} dir={rec.direction.name}")
        print(f"    header  {len(rec.header_bytes):>4} B  {rec.header_bytes.hex()}")
        print(f"    payload {len(rec.payload_bytes):>4} B  {rec.payload_bytes[:32].hex()}"
              + (" ..." if len(rec.payload_bytes) > 32 else ""))
    print(f"{path}: {shown} record(s) shown; {stats.summary()}")


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "mask-stats": cmd_mask_stats,
}


def run(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv`` and execute one subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help and friends
        return EXIT_OK if not exc.code else EXIT_USAGE
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "inspect":
            cmd_inspect(args.path, args.records)
        elif args.command == "synth":
            manifest = write_synthetic_dataset(args.out_dir, args.flows_per_class, args.classes, args.seed)
            print(f"manifest: {manifest}")
        else:
            overrides = {k: v for k, v in vars(args).items() if k in FIELDS}
            cfg = load_config(args.config, overrides)
            with run_dir(cfg, args.command) as out:
                t0 = time.perf_counter()
                COMMANDS[args.command](cfg, out)
                log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    except ConfigError as exc:
        print(f"trage: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrageError, OSError) as exc:
        print(f"trage: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # library argument checks on values that came from data files
        print(f"trage: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
