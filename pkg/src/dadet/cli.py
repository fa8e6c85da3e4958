"""Command line entry point: ``dadet <command> [options] [--section.field value ...]``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime error,
3 acceptance failure (gradcheck or compare ordering).
"""
import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import checkpoint, datagen
from . import evaluation as ev
from . import experiment as ex
from . import gradsuite
from .config import ConfigError, json_schema, load_config, parse_config
from .training import TrainLog

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ACCEPTANCE = 0, 1, 2, 3

log = logging.getLogger("dadet")


class UsageError(Exception):
    pass


def _split_overrides(argv):
    """Separate ``--a.b value`` / ``--a.b=value`` pairs from ordinary arguments."""
    rest, overrides = [], []
    i = 0
    while i < len(argv):
        arg = argv[i]
        if arg.startswith("--") and "." in arg.split("=", 1)[0]:
            key = arg[2:]
            if "=" in key:
                key, value = key.split("=", 1)
            else:
                if i + 1 >= len(argv):
                    raise UsageError(f"override {arg} needs a value")
                value = argv[i + 1]
                i += 1
            overrides.append((key, value))
        else:
            rest.append(arg)
        i += 1
    return rest, overrides


def _config(args, overrides):
    return load_config(args.config, overrides)


def _out_dir(cfg, args):
    out = Path(getattr(args, "out", None) or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out, cfg, dataset_checksum, files, timings):
    manifest = {
        "config": cfg.model_dump(mode="json"),
        "dataset_sha256": dataset_checksum,
        "files": {k: str(v) for k, v in files.items()},
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
    }
    for name, path in files.items():
        if not Path(path).exists():
            raise RuntimeError(f"manifest references missing file {path} ({name})")
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_dataset(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset file {path} not found (run `dadet generate` first)")
    return datagen.import_scenes(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args, cfg):
    out = _out_dir(cfg, args)
    dataset = ex.make_dataset(cfg)
    path = Path(args.dataset) if args.dataset else out / "dataset.bin"
    datagen.export_scenes(dataset, path)
    counts = ", ".join(f"{k}={len(v)}" for k, v in dataset.splits.items())
    print(f"wrote {path} ({counts}) sha256={_sha256(path)}")
    return EXIT_OK


def cmd_train(args, cfg):
    out = _out_dir(cfg, args)
    data_path = Path(args.dataset) if args.dataset else out / "dataset.bin"
    dataset = _load_dataset(data_path)
    log_path = out / "train_log.csv"
    tlog = TrainLog(log_path)
    try:
        outcome = ex.train(cfg, dataset, tlog)
    finally:
        tlog.close()
    ckpt = out / "model.ckpt"
    checkpoint.save(outcome.model, ckpt)
    config_echo = out / "config.yaml"
    config_echo.write_text(cfg.to_yaml(), encoding="utf-8")
    for label, acc in outcome.details.get("domain_accuracy", []):
        print(f"domain accuracy after {label}: {acc:.3f}")
    if "skipped" in outcome.details:
        print(f"discrepancy batches skipped: {outcome.details['skipped']}")
    _write_manifest(out, cfg, _sha256(data_path),
                    {"dataset": data_path, "checkpoint": ckpt, "train_log": log_path, "config": config_echo},
                    outcome.timings)
    print(f"wrote {ckpt} sha256={_sha256(ckpt)}")
    return EXIT_OK


def cmd_eval(args, cfg):
    out = _out_dir(cfg, args)
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint file {args.checkpoint} not found")
    model = checkpoint.load(args.checkpoint)
    data_path = Path(args.dataset) if args.dataset else out / "dataset.bin"
    dataset = _load_dataset(data_path)
    if tuple(dataset.size) != tuple(model.config.image_size):
        raise ValueError(f"dataset images are {dataset.size}, checkpoint expects {model.config.image_size}")
    scenes = dataset.splits[args.split]
    if not scenes:
        raise ValueError(f"split {args.split} is empty")
    curve = ev.threshold_sweep(model, scenes, cfg.eval.grid, cfg.eval.union)
    if any(b < a for a, b in zip(curve.missing_rate, curve.missing_rate[1:])):
        raise AssertionError("missing rate decreased along the sweep")
    sweep, summary = out / "sweep.csv", out / "summary.csv"
    ev.write_report(curve, sweep, summary)
    sys.stdout.write(summary.read_text(encoding="utf-8"))
    return EXIT_OK


def _arm_job(payload):
    cfg_dict, data_bytes, arm = payload
    cfg = parse_config(cfg_dict)
    dataset = datagen.loads(data_bytes)
    return arm, ex.arm_curve(cfg, dataset, arm)


def cmd_compare(args, cfg):
    out = _out_dir(cfg, args)
    dataset = ex.make_dataset(cfg)
    if not dataset.splits["target_test"]:
        raise ValueError("compare needs a non-empty target_test split")
    grid = tuple(cfg.eval.grid)
    workers = max(1, min(len(ex.ARMS), int(os.environ.get("DADET_THREADS", "1") or 1)))
    rows = {}
    table = out / "compare.csv"

    def flush():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("arm", "peak_alpha_our", "argmax_threshold"))
        for arm in ex.ARMS:
            if arm in rows:
                p, t = rows[arm]
                w.writerow((arm, ev.format_float(p), "nan" if t != t else f"{t:.2f}"))
        table.write_text(buf.getvalue(), encoding="utf-8")

    jobs = [(cfg.model_dump(mode="json"), datagen.dumps(dataset), arm) for arm in ex.ARMS]
    try:
        if workers == 1:
            results = map(_arm_job, jobs)
        else:
            pool = ProcessPoolExecutor(max_workers=workers)
            results = pool.map(_arm_job, jobs)
        for arm, curves in results:
            rows[arm] = ex.peak(grid, ex.mean_curve(curves))
            flush()
            print(f"{arm}: peak mean alpha_our {rows[arm][0]:.4f} at {rows[arm][1]:.2f}", flush=True)
    finally:
        flush()
        if workers > 1:
            pool.shutdown()

    trained = cfg.train.pretrain_steps + ex.adaptation_steps(cfg) > 0
    verdict = ex.ordering_verdict({a: rows[a][0] for a in ex.ARMS}, cfg.compare.margin, trained)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("pair", "verdict", "difference", "margin"))
    for pair, (v, diff) in verdict.items():
        w.writerow((pair, v, ev.format_float(diff), f"{cfg.compare.margin:.4f}"))
        print(f"{pair}: {v} (difference {diff:+.4f}, margin {cfg.compare.margin})")
    (out / "verdict.csv").write_text(buf.getvalue(), encoding="utf-8")
    return EXIT_OK if all(v == ex.PASS for v, _ in verdict.values()) else EXIT_ACCEPTANCE


def cmd_gradcheck(args, cfg):
    failed = []
    for r in gradsuite.run_suite(args.instances, cfg.seed):
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:18s} max_rel_error={r.max_rel_error:.3e} nonfinite={r.nonfinite} {status}")
        if not r.ok:
            failed.append(r.name)
    if failed:
        print("gradient check failed: " + ", ".join(failed))
        return EXIT_ACCEPTANCE
    return EXIT_OK


def cmd_stats(args, cfg):
    stats = ev.proposal_stats(args.log)
    text = ev.stats_csv(stats)
    if args.out_file:
        Path(args.out_file).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_schema(args, cfg):
    print(json.dumps(json_schema(), indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
    "stats": cmd_stats,
    "schema": cmd_schema,
}


def build_parser():
    p = argparse.ArgumentParser(prog="dadet", description=__doc__.splitlines()[0],
                                epilog="Any config value can be overridden with --section.field VALUE.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", "-c", help="YAML experiment config (defaults apply when omitted)")
        sp.add_argument("--out", help="output directory (default: output_dir from the config)")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress")
        return sp

    sp = add("generate", "generate the dataset file")
    sp.add_argument("--dataset", help="dataset path (default: <out>/dataset.bin)")
    sp = add("train", "pretrain and adapt; writes checkpoint, training log and manifest")
    sp.add_argument("--dataset", help="dataset path (default: <out>/dataset.bin)")
    sp = add("eval", "threshold sweep of a checkpoint; writes sweep.csv and summary.csv")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", help="dataset path (default: <out>/dataset.bin)")
    sp.add_argument("--split", default="target_test", choices=datagen.SPLITS)
    add("compare", "train target-only, mixed and adapted arms and check their ordering")
    sp = add("gradcheck", "finite-difference check of every trainable loss")
    sp.add_argument("--instances", type=int, default=100)
    sp = add("stats", "proposal statistics from a training log")
    sp.add_argument("--log", required=True)
    sp.add_argument("--out-file", help="write CSV here instead of stdout")
    add("schema", "print the config JSON schema")
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        rest, overrides = _split_overrides(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args = parser.parse_args(rest)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args, overrides)
    except ConfigError as exc:
        for field, msg in exc.errors:
            print(f"config error: {field}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    start = time.perf_counter()
    try:
        code = COMMANDS[args.command](args, cfg)
    except (datagen.DatasetFormatError, checkpoint.CheckpointFormatError) as exc:
        print(f"error: malformed file: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
