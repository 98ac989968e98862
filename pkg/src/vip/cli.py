"""Command line entry point: ``vip <stage> [flags]``.

Stages read and write a run directory (``--out``)::

    data/demonstrator.jsonl, data/robot.jsonl      gen-data
    seed<N>/encoder.vipp                           train-encoder
    seed<N>/library_v<V>.vipl                      build-library
    seed<N>/policy.vipp + policy.json              train-policy
    report.json, summary.csv, timing.csv           evaluate
    ablate_k.csv                                   ablate-k

``run-all`` does everything in one process. Failures print a stage-tagged
message on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness, library, nn, policy
from .harness import StageError
from .world import LABEL_AUDIT

STAGES = ("gen-data", "train-encoder", "build-library", "train-policy", "evaluate", "ablate-k", "run-all")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vip", description="Zero-shot video-instructed policy pipeline.")
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--out", help="run directory (default from config)")
    p.add_argument("--seed", type=int, help="base seed for data, instructions and training")
    p.add_argument("--k", type=int, help="absolute number of retrieved neighbors")
    p.add_argument("--k-fraction", type=float, help="neighbors as a fraction of the library size")
    p.add_argument("--method", choices=harness.METHODS, help="evaluate a single method")
    p.add_argument("--variant", type=int, help="restrict to one environment variant")
    p.add_argument("--tau", type=float, help="contrastive temperature")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="any config override, e.g. --set policy.epochs=20")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> harness.PipelineConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = value
    if args.out is not None:
        overrides["out"] = args.out
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.k is not None:
        overrides["inference.k"] = str(args.k)
        overrides["inference.k_fraction"] = "none"
    if args.k_fraction is not None:
        overrides["inference.k"] = "none"
        overrides["inference.k_fraction"] = str(args.k_fraction)
    if args.method is not None:
        overrides["methods"] = args.method
    if args.variant is not None:
        overrides["variants"] = str(args.variant)
    if args.tau is not None:
        overrides["supcon.tau"] = str(args.tau)
    return harness.load_config(args.config, overrides)


def _seed_dir(config, index) -> Path:
    return Path(config.out) / f"seed{config.training_seeds[index]}"


def _read(stage, config):
    return harness.run_stage(stage, harness.read_data, config.out)


def cmd_gen_data(config):
    data = harness.run_stage("gen-data", harness.generate_data, config)
    harness.run_stage("gen-data", harness.write_data, data, config.out)


def cmd_train_encoder(config):
    data = _read("train-encoder", config)
    for index in range(len(config.training_seeds)):
        audit: dict = {}
        params, curve = harness.run_stage("train-encoder", harness.train_encoder, config, data, index, audit)
        d = _seed_dir(config, index)
        d.mkdir(parents=True, exist_ok=True)
        nn.save_params(params, d / "encoder.vipp")
        harness.write_loss_curve(curve, d / "loss_curve.csv")
        harness.write_encoder_audit(audit, d / "encoder_audit.json")


def cmd_build_library(config):
    data = _read("build-library", config)
    for index in range(len(config.training_seeds)):
        d = _seed_dir(config, index)
        enc = harness.run_stage("build-library", nn.load_params, d / "encoder.vipp")
        libs = harness.run_stage("build-library", harness.build_libraries, data, enc, config.variants)
        for v, lib in libs.items():
            library.save_library(lib, d / f"library_v{v}.vipl")


def cmd_train_policy(config):
    data = _read("train-policy", config)
    for index in range(len(config.training_seeds)):
        art = harness.run_stage("train-policy", harness.load_seed, config, config.out, index, False)
        params, _ = harness.run_stage("train-policy", harness.train_policy_stage, config, data, art.libraries, index)
        policy.save_policy(params, config.policy, art.library_fingerprint, _seed_dir(config, index) / "policy.vipp")


def _load_all(stage, config):
    data = _read(stage, config)
    seeds = {index: harness.run_stage(stage, harness.load_seed, config, config.out, index)
             for index in range(len(config.training_seeds))}
    return data, seeds


def cmd_evaluate(config):
    LABEL_AUDIT.reset()
    data, seeds = _load_all("evaluate", config)
    instructions = harness.instruction_videos(config)
    episodes = []
    for index, art in seeds.items():
        episodes += harness.run_stage("evaluate", harness.evaluate_seed, config, data, art, index,
                                      config.methods, None, None, instructions)
    report = harness.EvalReport(episodes)
    report.metadata = harness.report_metadata(config, data, seeds, harness.hygiene_audit(seeds, config))
    harness.emit_report(report, config.out)
    for method, mean in report.method_means().items():
        print(f"{method:14s} {mean:6.1f}")


def cmd_ablate_k(config):
    data, seeds = _load_all("ablate-k", config)
    rows = harness.run_stage("ablate-k", harness.ablate_k, config, data, seeds)
    harness.write_ablation_csv(rows, Path(config.out) / "ablate_k.csv")
    for r in rows:
        print(f"k={r['k']!s:6s} ({r['resolved_k']:3d})  {r['mean']:6.1f} ({r['std']:.1f})")


def cmd_run_all(config):
    result = harness.run_pipeline(config)
    for method, mean in result.report.method_means().items():
        print(f"{method:14s} {mean:6.1f}")
    print("audit:", result.report.metadata["audit"]["flag"])


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-encoder": cmd_train_encoder,
    "build-library": cmd_build_library,
    "train-policy": cmd_train_policy,
    "evaluate": cmd_evaluate,
    "ablate-k": cmd_ablate_k,
    "run-all": cmd_run_all,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        config = resolve_config(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return 2
    try:
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"config.{args.stage}.txt").write_text(harness.config_to_text(config))
        COMMANDS[args.stage](config)
    except StageError as exc:
        print(f"error [{exc.stage}]: {type(exc.cause).__name__}: {exc.cause}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error [{args.stage}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
