"""Command line entry point: ``dpfedemb {train,account,extrapolate,eval,synth}``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 runtime
failure, 4 a requested FAR cannot be resolved on the evaluation set.

Relative output paths are resolved against ``$DPFEDEMB_OUTPUT_ROOT`` when it
is set, else against the working directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .accounting import (NEIGHBORING, account_gaussian, extrapolate_sweep, write_sweep_csv,
                         zcdp_to_dp, zcdp_tree_single_participation)
from .config import ConfigError, ExperimentConfig, load_config
from .data import generate_synthetic_identities, load_dataset_csv, write_dataset_csv
from .evaluation import (EmbeddingSet, UnresolvableFARError, pairwise_scores, recall_from_scores,
                         roc_from_scores, summary, write_roc_csv, write_summary_json)
from .model import CheckpointError, MlpConfig, build_model, embed, load_checkpoint
from .params import PURPOSE_DATA, PURPOSE_INIT, RngStream
from .trainer import FederatedTrainer, LOG_COLUMNS, RoundLog, load_users, run_training, write_round_logs

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_FAR = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "DPFEDEMB_OUTPUT_ROOT"

log = logging.getLogger("dpfedemb")


class UsageError(ValueError):
    """Bad command line values; reported with exit code 2."""


def output_path(p: str | Path) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _json_value(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    if isinstance(v, dict):
        return {k: _json_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    return v


def _dump_json(obj, path: Path) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(_json_value(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _truncate_metrics(path: Path, keep_rounds: int) -> None:
    """Drop rows at or after ``keep_rounds`` so a resumed run appends cleanly."""
    if not path.exists():
        raise UsageError(f"cannot resume: {path} is missing")
    with open(path) as fh:
        lines = fh.readlines()
    kept = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < keep_rounds]
    with open(path, "w") as fh:
        fh.writelines(kept)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg.run.threads = args.threads
    out = output_path(cfg.run.output_dir)
    manifest_path = out / "manifest.json"
    if manifest_path.exists() and not args.force:
        raise UsageError(f"{manifest_path} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    started = _now()

    trainer = FederatedTrainer(cfg)
    resume = None
    if args.resume:
        resume = Path(args.resume)
        _truncate_metrics(metrics_path, load_checkpoint(resume).round)
        fh = open(metrics_path, "a")
    else:
        fh = open(metrics_path, "w")
        fh.write(",".join(LOG_COLUMNS) + "\n")

    def on_round(entry: RoundLog) -> None:
        write_round_logs([entry], fh, header=False)
        fh.flush()
        if args.verbose:
            log.info("round %d loss=%s clip_fraction=%s recall=%s", entry.round, entry.loss,
                     entry.clip_fraction, entry.recall_at_far)

    try:
        result = run_training(cfg, resume=resume, checkpoint_dir=out / "checkpoints",
                              on_round=on_round, trainer=trainer)
    finally:
        fh.close()

    final_metrics = {}
    if trainer.eval_users:
        es = trainer.eval_embeddings(result.state.params)
        pos, neg = pairwise_scores(es, cfg.eval.metric)
        final_metrics = summary(pos, neg, (1e-3, cfg.eval.far, 1e-1))
    _dump_json(result.privacy, out / "privacy.json")
    manifest = {
        "run_id": f"{cfg.digest()[:16]}-{cfg.seed}",
        "config_digest": cfg.digest(),
        "code_version": __version__,
        "seed": cfg.seed,
        "mode": cfg.mode,
        "rounds": result.state.round,
        "started": started,
        "finished": _now(),
        "final_metrics": final_metrics,
        "privacy": result.privacy,
    }
    _dump_json(manifest, manifest_path)
    print(json.dumps(_json_value({"output_dir": str(out), "metrics": final_metrics,
                                  "privacy": result.privacy}), sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

def _check_prob(name: str, v: float, lo_open=True) -> None:
    if not (0.0 < v <= 1.0 if lo_open else 0.0 <= v <= 1.0):
        raise UsageError(f"--{name} must be in {'(0' if lo_open else '[0'}, 1], got {v}")


def cmd_account(args) -> int:
    _check_prob("q", args.q, lo_open=False)
    if not 0.0 < args.delta < 1.0:
        raise UsageError(f"--delta must be in (0, 1), got {args.delta}")
    if args.sigma < 0 or args.rounds < 0:
        raise UsageError("--sigma and --rounds must be >= 0")
    modes = NEIGHBORING + ("tree",) if args.mode == "all" else (args.mode,)
    for mode in modes:
        row = {"mode": mode, "q": args.q, "sigma": args.sigma, "rounds": args.rounds, "delta": args.delta}
        if mode == "tree":
            rho = zcdp_tree_single_participation(args.rounds, args.sigma).rho if args.rounds else 0.0
            row["rho"] = rho
            row["epsilon"] = zcdp_to_dp(rho, args.delta).epsilon
        else:
            g = account_gaussian(args.q, args.sigma, args.rounds, args.delta, mode)
            row["epsilon"] = g.epsilon
            row["order"] = g.order
        print(json.dumps(_json_value(row), sort_keys=True))
    return EXIT_OK


def cmd_extrapolate(args) -> int:
    base_sigma, base_clients, users_per_vc = args.base_sigma, args.base_clients, args.users_per_vc
    rounds, delta = args.rounds, args.delta
    if args.config:
        cfg = load_config(args.config)
        base_sigma = cfg.dp.noise_multiplier if base_sigma is None else base_sigma
        base_clients = cfg.federated.vcs_per_round if base_clients is None else base_clients
        users_per_vc = cfg.federated.users_per_vc if users_per_vc is None else users_per_vc
        rounds = cfg.federated.rounds if rounds is None else rounds
        delta = cfg.dp.delta if delta is None else delta
    missing = [n for n, v in (("base-sigma", base_sigma), ("base-clients", base_clients),
                              ("users-per-vc", users_per_vc), ("rounds", rounds), ("delta", delta))
               if v is None]
    if missing:
        raise UsageError("missing " + ", ".join("--" + m for m in missing) + " (or give --config)")
    if not 0.0 < delta < 1.0:
        raise UsageError(f"--delta must be in (0, 1), got {delta}")
    ks = [float(k) for k in args.k.split(",")]
    rows = extrapolate_sweep(base_sigma, base_clients, users_per_vc, rounds, args.total_users, delta, ks)
    if args.out:
        path = output_path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            write_sweep_csv(rows, fh)
    else:
        write_sweep_csv(rows, sys.stdout)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / synth
# ---------------------------------------------------------------------------

def _parse_fars(text: str) -> list[float]:
    try:
        fars = [float(f) for f in text.split(",") if f.strip()]
    except ValueError:
        raise UsageError(f"--far must be comma separated numbers, got {text!r}") from None
    bad = [f for f in fars if not 0.0 < f <= 1.0]
    if not fars or bad:
        raise UsageError(f"--far values must be in (0, 1], got {text}")
    return fars


def _model_cfg(cfg: ExperimentConfig, input_dim: int) -> MlpConfig:
    m = cfg.model
    return MlpConfig(input_dim, tuple(m.hidden_dims), m.embed_dim, m.activation, m.l2_normalize_embedding)


def cmd_eval(args) -> int:
    fars = _parse_fars(args.far)
    cfg = load_config(args.config)
    if args.data:
        users = load_dataset_csv(args.data)
    elif cfg.data.source == "csv" and not cfg.data.eval_path:
        raise UsageError("config has no data.eval_path; pass --data")
    else:
        users = load_users(cfg)[1]
    if not users:
        raise UsageError("evaluation dataset is empty")
    x = np.concatenate([u.inputs for u in users])
    y = np.concatenate([u.labels for u in users])
    model_cfg = _model_cfg(cfg, x.shape[1])
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        if ckpt.backbone_len != model_cfg.backbone_len:
            raise CheckpointError(
                f"checkpoint backbone has {ckpt.backbone_len} parameters but the config's model "
                f"(input_dim={x.shape[1]}, hidden={list(model_cfg.hidden_dims)}, embed_dim={model_cfg.embed_dim}) "
                f"needs {model_cfg.backbone_len}")
        if ckpt.cfg_digest != model_cfg.digest():
            raise CheckpointError("checkpoint was written for a different model config")
        theta = ckpt.backbone
    else:
        theta, _ = build_model(model_cfg, 1, RngStream(cfg.seed, (PURPOSE_INIT, 0)))
    es = EmbeddingSet(embed(theta, model_cfg, x), y)
    pos, neg = pairwise_scores(es, args.metric or cfg.eval.metric)
    for f in fars:
        recall_from_scores(pos, neg, f)  # raises UnresolvableFARError -> exit code 4
    result = summary(pos, neg, fars)
    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "roc.csv", "w") as fh:
        write_roc_csv(roc_from_scores(pos, neg, args.num_points), fh)
    with open(out / "summary.json", "w") as fh:
        write_summary_json(result, fh)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_synth(args) -> int:
    for name in ("users", "classes_per_user", "examples", "input_dim"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 1")
    signal_dim = args.signal_dim if args.signal_dim is not None else args.input_dim
    if not 1 <= signal_dim <= args.input_dim:
        raise UsageError("--signal-dim must be in [1, input-dim]")
    users = generate_synthetic_identities(
        args.users, args.classes_per_user, args.examples, args.input_dim, args.noise_std,
        RngStream(args.seed, (PURPOSE_DATA, 0)), signal_dim=signal_dim, nuisance_std=args.nuisance_std,
        basis_seed=args.basis_seed, first_label=args.first_label)
    path = output_path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset_csv(path, users)
    rows = sum(len(u) for u in users)
    print(json.dumps({"path": str(path), "users": len(users),
                      "classes": len(users) * args.classes_per_user, "rows": rows}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpfedemb", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run federated training from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--threads", type=int, help="worker threads for client updates (overrides run.threads)")
    t.add_argument("--force", action="store_true", help="overwrite an existing run manifest")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("account", help="privacy of the sampled Gaussian or tree mechanism")
    a.add_argument("--q", type=float, required=True, help="user sampling rate per round")
    a.add_argument("--sigma", type=float, required=True)
    a.add_argument("--rounds", type=int, required=True)
    a.add_argument("--delta", type=float, default=1e-7)
    a.add_argument("--mode", choices=NEIGHBORING + ("tree", "all"), default="all")
    a.set_defaults(func=cmd_account)

    x = sub.add_parser("extrapolate", help="scale clients and noise together and report epsilon")
    x.add_argument("--config", help="read base sigma, clients, users per VC, rounds and delta from here")
    x.add_argument("--base-sigma", type=float)
    x.add_argument("--base-clients", type=int, help="virtual clients per round at k=1")
    x.add_argument("--users-per-vc", type=int)
    x.add_argument("--rounds", type=int)
    x.add_argument("--delta", type=float)
    x.add_argument("--total-users", type=int, required=True)
    x.add_argument("--k", default="1,2,4,8,16,32,64", help="comma separated scale factors")
    x.add_argument("--out", help="CSV path (default stdout)")
    x.set_defaults(func=cmd_extrapolate)

    e = sub.add_parser("eval", help="recall@FAR and ROC of a backbone checkpoint")
    e.add_argument("--config", required=True, help="experiment config describing the model")
    e.add_argument("--checkpoint", help="omit to evaluate the random initialization")
    e.add_argument("--data", help="dataset CSV (default: the config's evaluation set)")
    e.add_argument("--far", default="1e-3,1e-2,1e-1")
    e.add_argument("--metric", choices=("cosine", "inner"))
    e.add_argument("--num-points", type=int, default=50)
    e.add_argument("--out", required=True, help="directory for roc.csv and summary.json")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic identity dataset as CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--users", type=int, default=512)
    s.add_argument("--classes-per-user", type=int, default=1)
    s.add_argument("--examples", type=int, default=20, help="examples per class")
    s.add_argument("--input-dim", type=int, default=32)
    s.add_argument("--noise-std", type=float, default=0.1)
    s.add_argument("--signal-dim", type=int)
    s.add_argument("--nuisance-std", type=float, default=0.0)
    s.add_argument("--basis-seed", type=int, default=0)
    s.add_argument("--first-label", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UnresolvableFARError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAR
    except (CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
