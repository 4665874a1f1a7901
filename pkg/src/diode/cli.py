"""Command-line entry point: ``diode <subcommand> <config>``.

Subcommands::

    gen-data <spec.json>            materialise a task protocol on disk
    run <experiment.json>           train every step, write run records and a report
    lambda-search <experiment.json> find the critical penalty weight
    report <runs-dir>               aggregate run records into tables
    param-table <config.json>       closed-form parameter growth per step

Every subcommand writes JSON and CSV into ``--out`` and exits nonzero on error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from diode.data import SceneSpec, build_protocol, save_protocol
from diode.dilation import count_added_params_for
from diode.errors import DiodeError
from diode.runner import ExperimentConfig, StepCache, emit_report, lambda_search, load_records, run_experiment

log = logging.getLogger("diode")

GEN_KEYS = {"scene", "step_sizes", "train_size", "test_size", "seed"}
PARAM_KEYS = {"detector", "classes_per_step", "expand_from"}


def _read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise DiodeError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise DiodeError(f"{path} is not valid JSON: {err}") from err
    if not isinstance(data, dict):
        raise DiodeError(f"{path} must hold a JSON object")
    return data


def _check_keys(data: dict, allowed: set, path) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise DiodeError(f"{path}: unknown keys {sorted(unknown)}")


def _load_experiment(path, seed: int | None) -> ExperimentConfig:
    config = ExperimentConfig.from_dict(_read_json(path))
    if seed is not None:
        config = replace(config, seeds=(seed,))
    return config


def cmd_gen_data(args) -> None:
    spec = _read_json(args.config)
    _check_keys(spec, GEN_KEYS, args.config)
    scene = SceneSpec.from_dict(spec.get("scene", {}))
    seed = args.seed if args.seed is not None else spec.get("seed", scene.seed)
    proto = build_protocol(
        scene,
        spec.get("step_sizes", [len(scene.classes)]),
        spec.get("train_size", 400),
        spec.get("test_size", 200),
        seed,
    )
    save_protocol(proto, args.out)
    log.info("wrote %d training splits and a test split to %s", len(proto.train), args.out)


def cmd_run(args) -> None:
    config = _load_experiment(args.config, args.seed)
    out = Path(args.out)
    records = run_experiment(config, out, StepCache(), log.info)
    emit_report(records, out)
    for r in records:
        log.info("%s seed %d final mAP@0.5 %.4f", r.method, r.seed, r.final_map())


def cmd_lambda_search(args) -> None:
    config = _load_experiment(args.config, args.seed)
    found = lambda_search(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "lambda_search.json").write_text(json.dumps(found, indent=1))
    with open(out / "lambda_search.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "exploded", "param", "reason"])
        for row in found["outcomes"]:
            boom = row["explosion"] or {}
            w.writerow([row["lambda"], bool(boom), boom.get("param", ""), boom.get("reason", "")])
    log.info("critical lambda %g", found["lambda"])


def cmd_report(args) -> None:
    records = load_records(args.config)
    emit_report(records, args.out)
    log.info("report for %d records written to %s", len(records), args.out)


def cmd_param_table(args) -> None:
    spec = _read_json(args.config)
    _check_keys(spec, PARAM_KEYS, args.config)
    det = ExperimentConfig(method="diode", detector=spec.get("detector", {})).detector_config
    steps = spec.get("classes_per_step", [4, 2, 2])
    rows = count_added_params_for(det, steps, spec.get("expand_from", 2))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "param_table.json").write_text(json.dumps(rows, indent=1))
    with open(out / "param_table.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        log.info("step %d adds %d (cumulative ratio %.4f)", r["step"], r["added"], r["cumulative_ratio"])


COMMANDS = {
    "gen-data": (cmd_gen_data, "materialise a task protocol", "spec.json"),
    "run": (cmd_run, "run an experiment", "experiment.json"),
    "lambda-search": (cmd_lambda_search, "find the critical lambda", "experiment.json"),
    "report": (cmd_report, "aggregate run records", "runs-dir"),
    "param-table": (cmd_param_table, "closed-form parameter growth", "config.json"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diode", description="Class-incremental detection experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, help_text, metavar) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", metavar=metavar)
        p.add_argument("--out", default=".", help="output directory (default: current directory)")
        p.add_argument("--seed", type=int, default=None, help="override the seed in the config")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        args.func(args)
    except DiodeError as err:
        log.error("error: %s", err)
        return 2
    except (OSError, ValueError, TypeError) as err:
        log.error("error: %s", err)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
