"""Command-line entry point: ``recurbench run | aggregate | simulate | print-defaults``."""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

from . import harness
from .data import ModelKind, write_dataset
from .simulate import ScenarioSpec, format_spec, generate_scenario, read_spec

EXIT_OK = 0
EXIT_INCOMPLETE = 1
EXIT_USAGE = 2


def shipped_manifest(name: str) -> Path:
    """Path of a manifest shipped with the package (``desk`` or ``full``)."""
    return Path(str(resources.files("recurbench") / "manifests" / f"{name}.ini"))


def _manifest_path(value: str) -> Path:
    p = Path(value)
    if not p.exists() and value in ("desk", "full"):
        return shipped_manifest(value)
    return p


def cmd_run(args) -> int:
    manifest = harness.read_manifest(_manifest_path(args.manifest), seed=args.seed, parallel=args.parallel)
    total = len(manifest.cells())

    def progress(i, n):
        if i == n or i % 50 == 0:
            logging.info("%d/%d cells", i, n)

    logging.info("manifest %s: %d cells into %s", manifest.sha256[:12], total, args.out)
    try:
        raw = harness.run(manifest, args.out, resume=args.resume, progress=progress)
    except harness.RunIncomplete as exc:
        logging.error("%s", exc)
        return EXIT_INCOMPLETE
    print(raw)
    return EXIT_OK


def cmd_aggregate(args) -> int:
    for path in harness.aggregate(args.input, args.out).values():
        print(path)
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = read_spec(args.spec) if args.spec else ScenarioSpec()
    if args.seed is not None:
        spec = spec.replace(seed=args.seed)
    data, _ = generate_scenario(spec, args.replicate)
    write_dataset(data, args.out, ModelKind.parse(args.model))
    print(args.out)
    return EXIT_OK


def cmd_print_defaults(args) -> int:
    sys.stdout.write(format_spec(ScenarioSpec()))
    sys.stdout.write("\n" + shipped_manifest("desk").read_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="recurbench", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a manifest")
    r.add_argument("--manifest", required=True, help="INI file, or 'desk' / 'full' for the shipped ones")
    r.add_argument("--out", required=True, type=Path)
    r.add_argument("--parallel", type=int, default=None, help="worker processes")
    r.add_argument("--resume", action="store_true", help="continue from the completed-cell ledger")
    r.add_argument("--seed", type=int, default=None, help="override the manifest seed")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("aggregate", help="summarize raw results")
    a.add_argument("--in", dest="input", required=True, type=Path)
    a.add_argument("--out", required=True, type=Path)
    a.set_defaults(func=cmd_aggregate)

    s = sub.add_parser("simulate", help="export one simulated dataset as a layout CSV")
    s.add_argument("--spec", type=Path, default=None, help="INI file with a [scenario] section")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--replicate", type=int, default=0)
    s.add_argument("--model", default="AG", choices=[k.value for k in ModelKind])
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("print-defaults", help="print the default scenario and desk manifest")
    d.set_defaults(func=cmd_print_defaults)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose or args.command == "run" else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, FileExistsError, KeyError) as exc:
        print(f"recurbench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
