"""Command-line entry point: ``fea-cncd {run,gradcheck,synth,eval}``.

Exit codes: 0 success, 1 gradient check failure, 2 config or usage error,
3 data error, 4 numerical abort. ``FEA_CNCD_LOG`` sets the log level.

Config files are flat ``key = value`` text; ``#`` starts a comment. Keys::

    preset = desk | reference        (TrainConfig defaults to start from)
    data = path/to/embeddings.cncd   (otherwise a synthetic set is generated)
    n_classes = 20                   (label range for a data file)
    synth.<field>                    SyntheticSpec fields
    protocol.base_classes, protocol.novel_per_session (comma list),
    protocol.shuffle_classes, protocol.seed, protocol.test_fraction
    train.<field>                    any TrainConfig field

``run --config`` also accepts a ``manifest.json`` written by an earlier run.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from . import gradsuite
from .dataio import (
    DataError,
    SessionProtocol,
    SyntheticSpec,
    generate_synthetic,
    load_embeddings,
    save_embeddings,
    split_protocol,
)
from .engine import NumericalAbort, TrainConfig, run_protocol
from .evalkit import confusion_csv, dump_metrics, evaluate_log, metrics_document

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("fea_cncd")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config parsing


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


_SCALARS = {"int": int, "float": float, "str": str}


def _coerce(key: str, value: str, annotation):
    """Read ``value`` according to a dataclass annotation string such as ``float | None``."""
    ann = annotation if isinstance(annotation, str) else getattr(annotation, "__name__", str(annotation))
    parts = [a.strip() for a in ann.split("|")]
    if "None" in parts:
        if value.lower() in ("none", ""):
            return None
        parts.remove("None")
    kind = parts[0]
    try:
        if kind == "bool":
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if kind.startswith("list"):
            return [int(v) for v in value.split(",") if v.strip()]
        return _SCALARS[kind](value)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {kind}") from None


def _build(cls, prefix: str, kv: dict[str, str], base: dict | None = None):
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    kw = dict(base or {})
    for key, value in kv.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        if name not in types:
            raise ConfigError(f"unknown key {key!r}")
        kw[name] = _coerce(key, value, types[name])
    try:
        return cls(**kw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{prefix.rstrip('.') or cls.__name__}: {err}") from None


_TOP = {"preset", "data", "n_classes"}
_PROTOCOL = {"base_classes", "novel_per_session", "shuffle_classes", "seed", "test_fraction"}


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig
    protocol: SessionProtocol
    synth: SyntheticSpec | None
    data: str | None
    n_classes: int | None
    protocol_seed: int
    test_fraction: float
    raw: dict

    def run_id(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:12]


def load_run_config(text: str, seed: int | None = None) -> RunConfig:
    return config_from_kv(parse_kv(text), seed)


def config_from_kv(kv: dict[str, str], seed: int | None = None) -> RunConfig:
    kv = {str(k): str(v) for k, v in kv.items()}
    for key in kv:
        head = key.split(".", 1)[0]
        if "." not in key and key not in _TOP or "." in key and head not in ("synth", "protocol", "train"):
            raise ConfigError(f"unknown key {key!r}")
        if head == "protocol" and key.split(".", 1)[1] not in _PROTOCOL:
            raise ConfigError(f"unknown key {key!r}")
    if seed is not None:
        kv["train.seed"] = str(seed)
    preset = kv.get("preset", "desk")
    if preset not in ("desk", "reference"):
        raise ConfigError(f"preset must be desk or reference, got {preset!r}")
    base = dataclasses.asdict(TrainConfig.desk()) if preset == "desk" else {}
    train = _build(TrainConfig, "train.", kv, base)

    if "protocol.base_classes" not in kv:
        raise ConfigError("protocol.base_classes is required")
    pkv = {k: v for k, v in kv.items()
           if k.startswith("protocol.") and k not in ("protocol.seed", "protocol.test_fraction")}
    protocol = _build(SessionProtocol, "protocol.", pkv)
    p_seed = _coerce("protocol.seed", kv.get("protocol.seed", "0"), "int")
    frac = _coerce("protocol.test_fraction", kv.get("protocol.test_fraction", "0.2"), "float")
    data = kv.get("data")
    n_classes = _coerce("n_classes", kv["n_classes"], "int") if "n_classes" in kv else None
    synth = None
    if data is None:
        synth = _build(SyntheticSpec, "synth.", kv)
    elif any(k.startswith("synth.") for k in kv):
        raise ConfigError("give either data or synth.* keys, not both")
    return RunConfig(train, protocol, synth, data, n_classes, p_seed, frac, kv)


def load_synth_spec(text: str) -> SyntheticSpec:
    kv = parse_kv(text)
    kv = {k if k.startswith("synth.") else f"synth.{k}": v for k, v in kv.items()}
    return _build(SyntheticSpec, "synth.", kv)


# ---------------------------------------------------------------- commands


def cmd_run(config: str, out: str, seed: int | None = None, save_predictions: bool = False) -> int:
    t0 = time.perf_counter()
    data_path = None
    try:
        text = Path(config).read_text()
        if text.lstrip().startswith("{"):
            # a manifest from an earlier run
            manifest = json.loads(text)
            rc = config_from_kv(manifest["config"], seed)
            data_path = manifest.get("data_path")
        else:
            rc = load_run_config(text, seed)
    except FileNotFoundError:
        print(f"error: config file not found: {config}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, json.JSONDecodeError, KeyError, AttributeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if rc.data:
            if data_path is None:
                path = Path(rc.data)
                data_path = str((path if path.is_absolute() else Path(config).parent / path).resolve())
            ds = load_embeddings(data_path, rc.n_classes)
        else:
            ds = generate_synthetic(rc.synth)
        sessions = split_protocol(ds, rc.protocol, rc.protocol_seed, rc.test_fraction)
    except (DataError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    run_id = rc.run_id()
    try:
        result = run_protocol(rc.train, sessions, run_id=run_id)
    except NumericalAbort as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = result.state
    (out_dir / "metrics.json").write_text(dump_metrics(result.metrics))
    for t in range(1, len(state.evaluations)):
        ev = state.evaluations[t]
        (out_dir / f"confusion_s{t}.csv").write_text(confusion_csv(ev.confusion, ev.labels))
    state.save(out_dir / "checkpoint.feac")
    if save_predictions:
        doc = {"class_groups": state.class_groups, "records": state.prediction_log}
        (out_dir / "predictions.json").write_text(json.dumps(doc) + "\n")
    manifest = {
        "tool": "fea-cncd",
        "version": __version__,
        "run_id": run_id,
        "config": rc.raw,
        "train": rc.train.to_dict(),
        "protocol": dataclasses.asdict(rc.protocol),
        "synthetic": dataclasses.asdict(rc.synth) if rc.synth else None,
        "data": rc.data,
        "data_path": data_path,
        "seeds": {"train": rc.train.seed, "protocol": rc.protocol_seed,
                  "synthetic": rc.synth.seed if rc.synth else None},
        "outputs": sorted(p.name for p in out_dir.iterdir()) + ["manifest.json"],
        "wall_clock_s": round(time.perf_counter() - t0, 3),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    m = result.metrics
    print(f"run {run_id}: average accuracy {m['average_accuracy']:.2f}"
          + (f", F_T {m['F_T']:.2f}, D_T {m['D_T']:.2f}" if m["F_T"] is not None else ""))
    return EXIT_OK


def cmd_gradcheck(tol: float = 1e-3, instances: int = 20, abs_floor: float | None = None, seed: int = 0) -> int:
    # the absolute floor never admits more than the relative tolerance does
    floor = min(1e-6, tol) if abs_floor is None else abs_floor
    reports = gradsuite.run_suite(instances, tol=tol, abs_floor=floor, seed=seed)
    print(gradsuite.format_table(reports))
    failed = [r.op_name for r in reports if not r.passed]
    if failed:
        print("failing: " + ", ".join(failed), file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_synth(spec: str, out: str) -> int:
    try:
        s = load_synth_spec(Path(spec).read_text())
    except FileNotFoundError:
        print(f"error: spec file not found: {spec}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        ds = generate_synthetic(s)
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    save_embeddings(ds, out)
    print(f"wrote {ds.n} x {ds.d} embeddings to {out}")
    return EXIT_OK


def cmd_eval(log_path: str, out: str) -> int:
    try:
        doc = json.loads(Path(log_path).read_text())
        ledger, evals = evaluate_log(doc)
    except FileNotFoundError:
        print(f"data error: prediction log not found: {log_path}", file=sys.stderr)
        return EXIT_DATA
    except (json.JSONDecodeError, KeyError, ValueError, TypeError) as err:
        print(f"data error: bad prediction log: {err}", file=sys.stderr)
        return EXIT_DATA
    metrics = metrics_document(ledger, doc.get("run_id", "eval"))
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = dump_metrics(metrics)
    (out_dir / "metrics.json").write_text(text)
    for t in range(1, len(evals)):
        (out_dir / f"confusion_s{t}.csv").write_text(confusion_csv(evals[t].confusion, evals[t].labels))
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fea-cncd", description="Continual novel class discovery on embeddings.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train a full protocol and write a run directory")
    r.add_argument("--config", required=True, help="key = value config, or a manifest.json to rerun")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=None, help="override train.seed")
    r.add_argument("--save-predictions", action="store_true", help="also write predictions.json for eval")

    g = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    g.add_argument("--tol", type=float, default=1e-3)
    g.add_argument("--instances", type=int, default=20)
    g.add_argument("--abs-floor", type=float, default=None)
    g.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("synth", help="write a synthetic embedding file")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="recompute metrics from a prediction log")
    e.add_argument("--log", required=True)
    e.add_argument("--out", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("FEA_CNCD_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.out, args.seed, args.save_predictions)
    if args.command == "gradcheck":
        return cmd_gradcheck(args.tol, args.instances, args.abs_floor, args.seed)
    if args.command == "synth":
        return cmd_synth(args.spec, args.out)
    return cmd_eval(args.log, args.out)


if __name__ == "__main__":
    sys.exit(main())
