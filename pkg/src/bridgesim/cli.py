"""Command-line entry point: ``bridge-sim run`` and ``bridge-sim gen-scene``.

Failures exit nonzero and print a one-line JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from .config import ConfigError
from .experiments import EXPERIMENTS, ExperimentError, run_experiment
from .perception import catalog_to_json, rois_to_json, write_cloud_csv, write_ply
from .scene import SceneError, SceneSpec, gen_scene

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse's default prints free text
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bridge-sim", description="NRT/RT bridge and box-fitting simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--experiment", required=True, help=f"one of: {', '.join(EXPERIMENTS)}")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--config", type=Path, help="JSON config overrides")
    run.add_argument("--out", type=Path, required=True)

    scene = sub.add_parser("gen-scene", help="generate a synthetic scene")
    scene.add_argument("--spec", type=Path, required=True, help="JSON scene spec")
    scene.add_argument("--seed", type=int, default=0)
    scene.add_argument("--out", type=Path, required=True)
    return parser


def _load_json(path: Path) -> dict:
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: root must be an object")
    return data


def cmd_run(args: argparse.Namespace) -> dict:
    overrides = _load_json(args.config) if args.config else {}
    report = run_experiment(args.experiment, args.out, seed=args.seed, overrides=overrides)
    return {"experiment": args.experiment, "out": str(args.out), "results": report["results"]}


def cmd_gen_scene(args: argparse.Namespace) -> dict:
    spec = SceneSpec.from_dict(_load_json(args.spec))
    scene = gen_scene(spec, args.seed)
    out: Path = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_ply(out / "cloud.ply", scene.cloud)
        write_cloud_csv(out / "cloud.csv", scene.cloud)
        (out / "rois.json").write_text(json.dumps(rois_to_json(scene.rois), indent=2) + "\n")
        (out / "catalog.json").write_text(json.dumps(catalog_to_json(spec.catalog), indent=2) + "\n")
        truth = {"seed": args.seed, "boxes": scene.ground_truth()}
        (out / "ground_truth.json").write_text(json.dumps(truth, indent=2) + "\n")
    except OSError as exc:
        raise ExperimentError(f"output directory not writable: {out}") from exc
    return {"out": str(out), "points": int(len(scene.cloud)), "objects": len(scene.boxes)}


def error_record(kind: str, message: str, command: str | None) -> str:
    return json.dumps({"error": kind, "message": message, "command": command}, sort_keys=True)


def main(argv: Sequence[str] | None = None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        result = cmd_run(args) if command == "run" else cmd_gen_scene(args)
    except UsageError as exc:
        print(error_record("usage", str(exc), command), file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ExperimentError, SceneError, ValueError, OSError) as exc:
        print(error_record(type(exc).__name__, str(exc), command), file=sys.stderr)
        return EXIT_FAILURE
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
