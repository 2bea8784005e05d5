"""``vaultlab`` command line: scenario runner and matrix/tolerance report generator."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

from .config import MECHANISMS, ConfigError, ScenarioConfig, bundled_dir
from .fleet import WalletTopology
from .threats import (
    SCENARIOS, BoundError, evaluate, matrix_table, not_applicable, run_scenario, tolerance_oracle, topology_label,
)

EXIT_OK, EXIT_INVALID, EXIT_MISMATCH = 0, 1, 2


def _out_dir(args, default: str) -> Path:
    # the environment wins over the flag
    root = os.environ.get("VAULTLAB_OUT") or args.out or default
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(path: Path, text: str) -> str:
    path.write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def resolve_config(ref: str) -> ScenarioConfig:
    """A path, or the name of a bundled scenario."""
    path = Path(ref)
    if not path.exists():
        candidate = bundled_dir() / f"{ref}.json"
        if candidate.exists():
            path = candidate
    return ScenarioConfig.load(path)


def _apply_overrides(cfg: ScenarioConfig, args) -> ScenarioConfig:
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed", "must be a 64-bit unsigned integer")
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.mechanism is not None:
        cfg = dataclasses.replace(cfg, mechanism=args.mechanism)
    return cfg


def _load_expectation(ref: str) -> dict:
    """``--expect`` takes a golden JSON file (outcome/summary) or a bare class name."""
    path = Path(ref)
    if path.exists():
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("--expect", f"golden file is not JSON: {exc.msg}") from None
        if "outcome" in data and isinstance(data["outcome"], dict):
            data = data["outcome"]
        if "class" not in data:
            raise ConfigError("--expect", "golden file has no 'class'")
        return {k: data[k] for k in ("class", "attacker_gain", "frozen") if k in data}
    if ref in ("NoLoss", "LimitedLoss", "Catastrophic"):
        return {"class": ref}
    raise ConfigError("--expect", f"not a golden file or outcome class: {ref!r}")


def execute(cfg: ScenarioConfig):
    opts = cfg.run_options()
    return evaluate(cfg.base_compromise(), opts, cfg.recovery_trigger(), cfg.scenario or cfg.name,
                    schedule_extra=cfg.timed_compromise())


def cmd_run(args) -> int:
    try:
        cfg = _apply_overrides(resolve_config(args.config), args)
        golden = _load_expectation(args.expect) if args.expect else None
    except ConfigError as exc:
        print(f"vaultlab: invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    outcome = execute(cfg)
    world = outcome.world
    out = _out_dir(args, os.path.join("vaultlab-out", cfg.name))

    record = outcome.record()
    record["conserved"] = outcome.conserved
    record["owner_custody"] = outcome.owner_custody
    digests = {
        "trace.log": _write(out / "trace.log", "".join(line + "\n" for line in outcome.narrative)),
        "chain_events.log": _write(out / "chain_events.log", world.chain.event_log()),
        "alerts.log": _write(out / "alerts.log", "".join(a.line() + "\n" for a in world.owner.inbox)),
        "outcome.json": _write(out / "outcome.json", _dump(record)),
    }
    expected = dict(golden or {})
    if cfg.expect and "class" not in expected:
        expected["class"] = cfg.expect
    mismatches = [k for k, v in expected.items() if record.get(k) != v]
    summary = {
        "config": cfg.to_dict(),
        "outcome": record,
        "chain_snapshot": world.chain.snapshot().hex(),
        "files": digests,
        "expected": expected or None,
        "mismatches": mismatches,
    }
    _write(out / "summary.json", _dump(summary))
    print(outcome.line())
    print(f"reports written to {out}")
    if mismatches:
        for key in mismatches:
            print(f"MISMATCH {key}: expected {expected[key]!r}, got {record.get(key)!r}", file=sys.stderr)
        return EXIT_MISMATCH
    return EXIT_OK


def parse_sweep(spec: str) -> tuple[str, list[int]]:
    if "=" not in spec or ".." not in spec:
        raise ConfigError("--sweep", f"expected field=lo..hi, got {spec!r}")
    name, rng = spec.split("=", 1)
    lo, hi = rng.split("..", 1)
    if name not in WalletTopology.__dataclass_fields__ and name != "seed":
        raise ConfigError("--sweep", f"unknown sweep field {name!r}")
    try:
        lo_i, hi_i = int(lo), int(hi)
    except ValueError:
        raise ConfigError("--sweep", f"bounds must be integers, got {rng!r}") from None
    if lo_i > hi_i:
        raise ConfigError("--sweep", "empty range")
    return name, list(range(lo_i, hi_i + 1))


def _variants(cfg: ScenarioConfig, sweep) -> list[tuple[ScenarioConfig, str]]:
    if not sweep:
        return [(cfg, topology_label(cfg.topology))]
    name, values = sweep
    out = []
    for value in values:
        if name == "seed":
            out.append((dataclasses.replace(cfg, seed=value), f"{topology_label(cfg.topology)}@seed{value}"))
            continue
        data = cfg.topology.to_dict()
        data[name] = value
        try:
            tp = WalletTopology.from_dict(data)
        except ValueError as exc:
            raise ConfigError("--sweep", f"{name}={value}: {exc}") from None
        out.append((dataclasses.replace(cfg, topology=tp), topology_label(tp)))
    return out


def cmd_matrix(args) -> int:
    try:
        cfg = _apply_overrides(resolve_config(args.config), args)
        sweep = parse_sweep(args.sweep) if args.sweep else None
        variants = _variants(cfg, sweep)
    except ConfigError as exc:
        print(f"vaultlab: invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    rows, tables, seen = [], [], set()
    try:
        for variant, label in variants:
            key = topology_label(variant.topology)
            if key not in seen:
                seen.add(key)
                tables.append((key, tolerance_oracle(variant.topology, variant.seed)))
            opts = variant.run_options()
            rows.extend((label, run_scenario(sid, opts)) for sid in SCENARIOS)
    except BoundError as exc:
        print(f"vaultlab: bound exceeded: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = _out_dir(args, os.path.join("vaultlab-out", f"{cfg.name}-matrix"))
    matrix = matrix_table(rows, not_applicable(cfg.mechanism))
    tolerance = "".join(f"# {key}\n{table.text()}" for key, table in tables)
    diverging = [line for line in matrix.splitlines() if line.endswith("DIVERGES")]
    tol_bad = [f"{key} {row.functionality}" for key, table in tables for row in table.rows if not row.matches]
    _write(out / "matrix.txt", matrix)
    _write(out / "tolerance.txt", tolerance)
    summary = {
        "config": cfg.to_dict(),
        "sweep": args.sweep,
        "cells": [{"label": label, **o.record(), "conserved": o.conserved} for label, o in rows],
        "diverging": diverging,
        "tolerance_mismatches": tol_bad,
    }
    _write(out / "summary.json", _dump(summary))
    sys.stdout.write(matrix)
    sys.stdout.write(tolerance)
    print(f"{len(rows)} cells, {len(diverging)} diverging, {len(tol_bad)} tolerance mismatches")
    if args.strict and (diverging or tol_bad):
        return EXIT_MISMATCH
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vaultlab", description="Vault custody protocol simulator")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, help="report directory (VAULTLAB_OUT takes precedence)")
    common.add_argument("--mechanism", choices=MECHANISMS, default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="run one scenario config")
    run.add_argument("config", help="config path or bundled scenario name")
    run.add_argument("--expect", default=None, help="golden outcome JSON or outcome class")
    run.set_defaults(func=cmd_run)

    matrix = sub.add_parser("matrix", parents=[common], help="scenario matrix and tolerance table")
    matrix.add_argument("config", help="config path or bundled scenario name")
    matrix.add_argument("--sweep", default=None, help="topology field range, e.g. k=2..4")
    matrix.add_argument("--strict", action="store_true", help="exit 2 when any cell diverges")
    matrix.set_defaults(func=cmd_matrix)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
