"""Command-line entry point: ``skillforge <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
Every run writes a manifest (resolved config, seeds, inputs, code version)
next to its outputs; ``replay`` reruns a manifest into a new directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .approximator import Mlp
from .config import config_fields, load_config_file, resolve, section, stream_seed
from .errors import ConfigError, SkillforgeError
from .evaluation import eval_discovery, eval_downstream, eval_imitation, report_json, write_traces_csv
from .metra_lab import MetraConfig, ground_metra_latent, telescoping_report, write_diagnostics_csv
from .motions import generate_reference_set, load_dataset
from .pretrain import PretrainConfig, pretrain_encoder, write_latents_csv
from .pretrain import write_log_csv as write_pretrain_log
from .skill_rl.downstream import DownstreamConfig, train_downstream
from .skill_rl.downstream import LOG_FIELDS as DOWNSTREAM_FIELDS
from .skill_rl.skills import motion_latents
from .skill_rl.train import TrainConfig, config_hash, train
from .skill_rl.train import write_log_csv as write_train_log
from .verify import format_table, run_suites

log = logging.getLogger("skillforge")

STAGE_CONFIGS = {
    "pretrain": ("pretrain", PretrainConfig),
    "train": ("train", TrainConfig),
    "train-downstream": ("downstream", DownstreamConfig),
    "eval-downstream": ("downstream", DownstreamConfig),
    "metra-lab": ("metra", MetraConfig),
}


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _add_config_flags(p, cls):
    group = p.add_argument_group(f"{cls.__name__} overrides")
    for name, default in config_fields(cls):
        flags = [f"--{name}"] + ([f"--{name.replace('_', '-')}"] if "_" in name else [])
        group.add_argument(*flags, dest=f"cfg_{name}", default=None, metavar=type(default).__name__.upper()
                           if default is not None else "VALUE")


def build_parser():
    parser = argparse.ArgumentParser(prog="skillforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="TOML file with per-stage tables")
        p.add_argument("--seed", type=int, default=0, help="root seed")
        p.add_argument("--out", required=out_required, help="output directory (file for gen-data/export-latents)")
        p.add_argument("--workers", type=int, default=1, help="parallelism cap (runs are single-process)")
        return p

    p = common(sub.add_parser("gen-data", help="generate a reference motion set"))
    p.add_argument("--env", default="point_mass_2d")
    p.add_argument("--length", type=int, default=60)
    p.add_argument("--n-stack", type=int, default=5)

    p = common(sub.add_parser("pretrain", help="contrastive encoder pretraining"))
    p.add_argument("--data", required=True)
    _add_config_flags(p, PretrainConfig)

    p = common(sub.add_parser("train", help="imitation and discovery training"))
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", required=True, help="encoder checkpoint path (without suffix)")
    _add_config_flags(p, TrainConfig)

    p = common(sub.add_parser("train-downstream", help="train a goal-reaching high-level policy"))
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--policy", required=True, help="low-level policy checkpoint")
    p.add_argument("--style", default="freestyle", help="motion id or 'freestyle'")
    _add_config_flags(p, DownstreamConfig)

    p = common(sub.add_parser("eval-imitation", help="imitation error and FID"))
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--motion", required=True)
    p.add_argument("--episodes", type=int, default=500)
    p.add_argument("--deterministic", action="store_true", help="use mean actions")

    p = common(sub.add_parser("eval-discovery", help="vMF latent sweeps around a motion"))
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--motion", required=True)
    p.add_argument("--kappa", type=float, nargs="+", default=[50.0])
    p.add_argument("--episodes", type=int, default=150)

    p = common(sub.add_parser("eval-downstream", help="goal success rate and FID"))
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--high", required=True, help="high-level policy checkpoint")
    p.add_argument("--style", default="freestyle")
    p.add_argument("--episodes", type=int, default=100)
    _add_config_flags(p, DownstreamConfig)

    p = common(sub.add_parser("export-latents", help="per-frame latent coordinates as CSV"))
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", required=True)

    p = common(sub.add_parser("metra-lab", help="telescoping collapse diagnostics"))
    p.add_argument("--data", help="motion file (default: generated for --env)")
    p.add_argument("--env", default="point_mass_2d")
    p.add_argument("--n-z", type=int, default=100)
    _add_config_flags(p, MetraConfig)

    p = sub.add_parser("verify", help="run the property suites")
    p.add_argument("--fast", action="store_true")

    p = sub.add_parser("replay", help="rerun the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return parser


def _stage_config(args):
    if args.command not in STAGE_CONFIGS:
        return None, None
    name, cls = STAGE_CONFIGS[args.command]
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    file_values = section(load_config_file(args.config), name)
    return name, resolve(cls, name, file_values, overrides)


def _write_manifest(path, args, argv, config, seeds, dataset=None):
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "config": None if config is None else config.to_dict(),
        "config_hash": None if config is None else config_hash(config.to_dict()),
        "seeds": seeds,
        "dataset_hash": None if dataset is None else dataset.content_hash(),
        "inputs": {k: getattr(args, k) for k in ("data", "encoder", "policy", "high") if getattr(args, k, None)},
        "version": __version__,
        "git_describe": _git_describe(),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args, argv, config):
    ds = generate_reference_set(args.env, seed=args.seed, length=args.length, n_stack=args.n_stack)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    _write_manifest(out.with_name(out.name + ".manifest.json"), args, argv, None, {"root": args.seed}, ds)
    print(f"wrote {len(ds)} motions to {out}")


def cmd_pretrain(args, argv, config):
    ds = load_dataset(args.data)
    out = _out_dir(args)
    seed = stream_seed(args.seed, "pretrain")
    encoder, rows = pretrain_encoder(ds, config, seed)
    encoder.save(out / "encoder", seed, config.epochs)
    write_pretrain_log(out / "pretrain_log.csv", rows)
    write_latents_csv(out / "latents.csv", encoder, ds)
    _write_manifest(out / "manifest.json", args, argv, config, {"root": args.seed, "pretrain": seed}, ds)
    if rows:
        last = rows[-1]
        print(f"alignment {last['alignment_mean']:.6f}, max between-motion cosine {last['max_between_cosine']:.4f}")


def cmd_train(args, argv, config):
    ds = load_dataset(args.data)
    out = _out_dir(args)
    seed = stream_seed(args.seed, "train")
    encoder = Mlp.load(args.encoder)
    _write_manifest(out / "manifest.json", args, argv, config, {"root": args.seed, "train": seed}, ds)
    _, rows = train(ds, encoder, config, seed, out_dir=out)
    if rows:
        print(f"final mean cartesian error {rows[-1]['mean_cartesian_error']:.4f}")


def cmd_train_downstream(args, argv, config):
    ds = load_dataset(args.data)
    out = _out_dir(args)
    seed = stream_seed(args.seed, "downstream")
    latents = motion_latents(Mlp.load(args.encoder), ds)
    trainer, rows = train_downstream(ds, Mlp.load(args.policy), latents, args.style, config, seed)
    trainer.policy.save(out / "high_policy", seed, config.epochs)
    trainer.learner.value.save(out / "high_value", seed, config.epochs)
    write_train_log(out / "downstream_log.csv", rows, DOWNSTREAM_FIELDS)
    _write_manifest(out / "manifest.json", args, argv, config, {"root": args.seed, "downstream": seed}, ds)


def cmd_eval_imitation(args, argv, config):
    ds = load_dataset(args.data)
    out = _out_dir(args)
    seed = stream_seed(args.seed, "eval-imitation")
    latents = motion_latents(Mlp.load(args.encoder), ds)
    if args.motion not in latents:
        raise ConfigError("--motion", f"unknown motion {args.motion!r}")
    res = eval_imitation(Mlp.load(args.policy), ds, args.motion, latents[args.motion], args.episodes, seed,
                         deterministic=args.deterministic)
    report_json(out / "imitation.json", {
        "cartesian_error": {"mean": res["cartesian_error"], "std": res["cartesian_error_std"]},
        "fid": res["fid"], "path_length": res["path_length"], "deviated_fraction": res["deviated_fraction"],
    }, {"motion_id": args.motion, "episodes": args.episodes})
    _write_manifest(out / "manifest.json", args, argv, None, {"root": args.seed, "eval": seed}, ds)
    print(f"cartesian error {res['cartesian_error']:.4f} +- {res['cartesian_error_std']:.4f}, FID {res['fid']:.4f}")


def cmd_eval_discovery(args, argv, config):
    ds = load_dataset(args.data)
    out = _out_dir(args)
    seed = stream_seed(args.seed, "eval-discovery")
    latents = motion_latents(Mlp.load(args.encoder), ds)
    if args.motion not in latents:
        raise ConfigError("--motion", f"unknown motion {args.motion!r}")
    policy = Mlp.load(args.policy)
    metrics = {}
    for kappa in args.kappa:
        res = eval_discovery(policy, ds, args.motion, latents[args.motion], kappa, args.episodes, seed)
        metrics[f"kappa_{kappa:g}"] = {"dispersion": res["dispersion"], "fid": res["fid"],
                                       "latent_mean_cosine": res["latent_mean_cosine"]}
        write_traces_csv(out / f"traces_kappa_{kappa:g}.csv", res["traces"], res["alive_steps"])
    report_json(out / "discovery.json", metrics, {"motion_id": args.motion, "episodes": args.episodes})
    _write_manifest(out / "manifest.json", args, argv, None, {"root": args.seed, "eval": seed}, ds)
    for k, v in metrics.items():
        print(f"{k}: dispersion {v['dispersion']:.4f}, FID {v['fid']:.4f}")


def cmd_eval_downstream(args, argv, config):
    ds = load_dataset(args.data)
    out = _out_dir(args)
    seed = stream_seed(args.seed, "eval-downstream")
    latents = motion_latents(Mlp.load(args.encoder), ds)
    res = eval_downstream(Mlp.load(args.high), Mlp.load(args.policy), ds, latents, args.style, config,
                          args.episodes, seed)
    metrics = {k: res[k] for k in ("success_rate", "fell_rate", "fid") if k in res}
    report_json(out / "downstream.json", metrics, {"style": res["style"], "episodes": args.episodes})
    write_traces_csv(out / "traces.csv", res["traces"], res["alive_steps"])
    _write_manifest(out / "manifest.json", args, argv, config, {"root": args.seed, "eval": seed}, ds)
    print(f"success rate {metrics['success_rate']:.3f}")


def cmd_export_latents(args, argv, config):
    ds = load_dataset(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_latents_csv(out, Mlp.load(args.encoder), ds)
    _write_manifest(out.with_name(out.name + ".manifest.json"), args, argv, None, {"root": args.seed}, ds)


def cmd_metra_lab(args, argv, config):
    ds = load_dataset(args.data) if args.data else generate_reference_set(args.env)
    out = _out_dir(args)
    seed = stream_seed(args.seed, "metra")
    rep, rows = ground_metra_latent(ds, config, seed)
    rng = np.random.default_rng(stream_seed(args.seed, "metra-z"))
    zs = rng.standard_normal((args.n_z, config.latent_dim))
    zs /= np.linalg.norm(zs, axis=1, keepdims=True)
    report = telescoping_report(ds, rep, zs)
    write_diagnostics_csv(out / "metra_diagnostics.csv", ds, rep, report)
    write_train_log(out / "metra_log.csv", rows, list(rows[0]) if rows else ["epoch"])
    rep.net.save(out / "phi", seed, config.epochs)
    _write_manifest(out / "manifest.json", args, argv, config, {"root": args.seed, "metra": seed}, ds)
    for row in report:
        print(f"{row['motion_id']}: repetitive={row['repetitive']} collapsed={row['collapsed']}")


def cmd_verify(args, argv, config):
    checks = run_suites(fast=args.fast)
    print(format_table(checks))
    return 0 if all(c.passed for c in checks) else 1


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train,
    "train-downstream": cmd_train_downstream, "eval-imitation": cmd_eval_imitation,
    "eval-discovery": cmd_eval_discovery, "eval-downstream": cmd_eval_downstream,
    "export-latents": cmd_export_latents, "metra-lab": cmd_metra_lab, "verify": cmd_verify,
}


def _replay_argv(args):
    manifest = json.loads(Path(args.manifest).read_text())
    argv = list(manifest["argv"])
    if "--out" in argv:
        argv[argv.index("--out") + 1] = args.out
    else:
        argv += ["--out", args.out]
    return argv


def run(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=os.environ.get("SKILLFORGE_LOG", "error").upper(), format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "replay":
            return run(_replay_argv(args))
        _, config = _stage_config(args)
        status = COMMANDS[args.command](args, argv, config)
        return 0 if status is None else int(status)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SkillforgeError, OSError, ValueError, KeyError) as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())
