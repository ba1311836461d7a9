# Command-line entry point for the FedRG simulator
import argparse
import json
import logging
import os
import sys

import yaml

from fedrg.artifacts import execute_run
from fedrg.comparing import ABLATIONS, run_ablation, run_sweep
from fedrg.errors import FedRGError, ValidationError
from manifest import SETTINGS_FILE, load_manifest, load_settings, override, write_manifest
from utils import format_metric

logger = logging.getLogger("fedrg")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INVALID = 2


def configure_logging(settings, verbose=False):
    level = "DEBUG" if verbose else settings["logging"]["level"]
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO), format=settings["logging"]["format"], force=True)


def resolve_manifest(manifest_path, settings):
    """Load the manifest and apply the output-dir environment override."""
    manifest = load_manifest(manifest_path)
    env_var = settings["output"]["env_var"]
    if os.environ.get(env_var):
        manifest = override(manifest, "output_dir", os.environ[env_var])
        logger.info(f"Output directory overridden by {env_var}: {manifest.output_dir}")
    return manifest


def _guarded(action):
    try:
        action()
    except ValidationError as exc:
        print(f"invalid manifest: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FedRGError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        logger.exception("Unexpected failure")
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_run(manifest_path, settings):
    def action():
        manifest = resolve_manifest(manifest_path, settings)
        _, summary = execute_run(manifest, write_manifest_copy=write_manifest)
        final = summary.get("final", {})
        logger.info(
            f"Finished {summary['rounds']} rounds: accuracy {format_metric(final.get('accuracy'))}, "
            f"macro F {format_metric(final.get('macro_fscore'))}, CRA {format_metric(final.get('cra'))}"
        )
    return _guarded(action)


def cmd_ablate(manifest_path, variant, settings):
    def action():
        manifest = resolve_manifest(manifest_path, settings)
        comparison = run_ablation(manifest, variant, manifest.output_dir)
        last = comparison.iloc[-1]
        logger.info(
            f"{variant}: final accuracy {format_metric(last['base_accuracy'])} (base) vs "
            f"{format_metric(last['variant_accuracy'])} (variant)"
        )
    return _guarded(action)


def cmd_validate(manifest_path, settings):
    def action():
        manifest = resolve_manifest(manifest_path, settings)
        print(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
    return _guarded(action)


def cmd_sweep(manifest_path, param, values, settings):
    def action():
        manifest = resolve_manifest(manifest_path, settings)
        parsed = [yaml.safe_load(value) for value in values]
        sweep = run_sweep(manifest, param, parsed, manifest.output_dir)
        logger.info(f"Sweep over {param}: {len(sweep)} runs written to {manifest.output_dir}")
    return _guarded(action)


def build_parser():
    parser = argparse.ArgumentParser(prog="fedrg", description="Federated noisy-label learning simulator")
    parser.add_argument("--config", default=SETTINGS_FILE, help="runtime settings file (logging, env var names)")
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run one experiment")
    run.add_argument("manifest")

    ablate = commands.add_parser("ablate", help="run base and ablated configuration under the same seeds")
    ablate.add_argument("manifest")
    ablate.add_argument("--variant", required=True, choices=sorted(ABLATIONS))

    validate = commands.add_parser("validate", help="print the resolved manifest")
    validate.add_argument("manifest")

    sweep = commands.add_parser("sweep", help="one run per value of a manifest field")
    sweep.add_argument("manifest")
    sweep.add_argument("--param", required=True, help="dotted field, e.g. rounds.num_clusters")
    sweep.add_argument("--values", required=True, nargs="+")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    settings = load_settings(args.config)
    configure_logging(settings, args.verbose)
    if args.command == "run":
        return cmd_run(args.manifest, settings)
    if args.command == "ablate":
        return cmd_ablate(args.manifest, args.variant, settings)
    if args.command == "validate":
        return cmd_validate(args.manifest, settings)
    return cmd_sweep(args.manifest, args.param, args.values, settings)


if __name__ == "__main__":
    sys.exit(main())
