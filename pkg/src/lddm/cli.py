"""Command-line entry point: ``lddm <subcommand> --config run.json``.

Exit codes: 0 success, 1 runtime failure, 2 usage error (including an unknown
subcommand), 3 invalid config or missing prerequisite artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from .config import load_config
from .errors import ConfigError, MissingArtifactError
from .pipeline import STAGES

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_PREREQ = 0, 1, 2, 3

_HELP = {
    "gen-toy": "generate the toy video and still-image corpora",
    "train-ae": "train the video autoencoder on the generative training split",
    "encode-latents": "encode the generative training split into latents",
    "train-diff": "train the conditional denoiser on stored latents",
    "synthesize": "sample evaluation, diversity and augmentation videos",
    "evaluate": "compute distribution, perceptual and diversity metrics",
    "experiment": "run the real / synthetic / mixed classifier experiment",
    "report": "plot experiment results",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lddm", description="Latent dynamics video synthesis pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    for name in STAGES:
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("--config", required=True, help="path to a JSON run config")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        start = time.perf_counter()
        manifest = STAGES[args.command](cfg)
    except (ConfigError, MissingArtifactError) as exc:
        print(f"lddm {args.command}: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"lddm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    elapsed = time.perf_counter() - start
    print(json.dumps({"command": args.command, "seconds": round(elapsed, 2),
                      "artifacts": len(manifest["artifacts"])}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
