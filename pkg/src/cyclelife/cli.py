"""Command-line front end.

Subcommands: synth, preprocess, train, eval, sweep, transfer, gradcheck.
Runs are driven by a JSON config file; command-line flags override config
keys, which override defaults. Unknown config keys are rejected with their
path. All randomness flows from the single top-level seed (the BLP_SEED
environment variable overrides it). Exit codes: 0 success, 2 config error,
3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import diffkernel as dk
from .core import Q0Mode
from .errors import ConfigError, CycleLifeError, DataError, NumericalError
from .evaluation import (
    OptimConfig,
    TransferMode,
    aggregate_runs,
    evaluate_model,
    partition,
    run_experiment,
    split_dataset,
    sweep_usable_cycles,
    train_model,
    transfer_run,
)
from .ingest import load_manifest
from .models import (
    CyclePatchConfig,
    CyclePatchModel,
    MlpBaselineConfig,
    MlpBaselineModel,
    MlpStackEncoder,
    load_model,
    save_model,
)
from .preprocess import load_sample_cache, make_dataset, save_sample_cache
from .reporting import render_report, report_json, sweep_csv
from .seeding import substream
from .synth import NoiseLevels, SynthConfig, generate_fleet, save_fleet

log = logging.getLogger("cyclelife")

DEFAULT_CONFIG = {
    "seed": 0,
    "jobs": 1,
    "data": {
        "manifest": None,
        "lambda": None,
        "q0_mode_override": None,
        "filter_window": 21,
        "filter_threshold": 0.10,
    },
    "preprocess": {
        "s_values": list(range(1, 101)),
        "cache": None,
    },
    "model": {
        "family": "cyclepatch",
        "embed_width": 32,
        "intra_hidden": 64,
        "intra_layers": 2,
        "inter_layers": 2,
        "inter_hidden": 64,
        "dropout": 0.0,
        "disable_intra": False,
        "disable_inter": False,
        "ln_affine": False,
        "width": 64,
        "hidden": 128,
        "layers": 2,
    },
    "optim": {
        "lr": 1e-3,
        "batch_size": 32,
        "epochs": 100,
        "seeds": [0, 1, 2],
        "dropout": None,
        "patience": 20,
        "grid_mode": False,
    },
    "eval": {
        "alpha": 0.15,
        "sweep_s_list": [10, 30, 50, 100],
        "sweep_retrain": False,
        "by_battery": True,
        "transfer_mode": "frozen",
        "mmd_weight": 1.0,
        "source_checkpoint": None,
        "source_manifest": None,
    },
    "synth": {
        "n_batteries": 40,
        "temperatures": [25.0, 35.0, 45.0],
        "fade_rate_range": [0.2 / 640.0, 0.2 / 160.0],
        "knee_onset_range": [0.65, 0.90],
        "knee_life_range": [0.70, 1.00],
        "noise": {"voltage": 0.003, "capacity_rel": 0.0005, "shape_jitter": 0.02},
        "max_cycles": 700,
        "life_margin_cycles": 5,
        "detail_cycles": 104,
        "points_per_half_cycle": 48,
        "coarse_points": 4,
    },
}


def _merge_config(defaults, user, path=""):
    if not isinstance(user, dict):
        raise ConfigError(f"config{path or ' root'} must be an object")
    merged = copy.deepcopy(defaults)
    for key, value in user.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(defaults[key], dict):
            merged[key] = _merge_config(defaults[key], value, here)
        else:
            merged[key] = value
    return merged


def load_config(path) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from None
    return _merge_config(DEFAULT_CONFIG, obj)


def _apply_env_seed(cfg: dict) -> None:
    env = os.environ.get("BLP_SEED")
    if env is not None:
        try:
            cfg["seed"] = int(env)
        except ValueError:
            raise ConfigError(f"BLP_SEED must be an integer, got {env!r}") from None


def _model_config(cfg: dict):
    m = cfg["model"]
    dropout = m["dropout"] if cfg["optim"]["dropout"] is None else cfg["optim"]["dropout"]
    if m["family"] == "cyclepatch":
        return CyclePatchConfig(
            embed_width=m["embed_width"],
            intra_hidden=m["intra_hidden"],
            intra_layers=m["intra_layers"],
            inter=MlpStackEncoder(layers=m["inter_layers"], hidden=m["inter_hidden"]),
            dropout=dropout,
            disable_intra=m["disable_intra"],
            disable_inter=m["disable_inter"],
            ln_affine=m["ln_affine"],
        )
    if m["family"] == "mlp":
        return MlpBaselineConfig(
            width=m["width"],
            hidden=m["hidden"],
            layers=m["layers"],
            dropout=dropout,
            ln_affine=m["ln_affine"],
        )
    if m["family"] == "dummy":
        return None
    raise ConfigError(f"unknown model family {m['family']!r}")


def _optim_config(cfg: dict) -> OptimConfig:
    o = cfg["optim"]
    return OptimConfig(
        lr=o["lr"],
        batch_size=o["batch_size"],
        patience=o["patience"],
        grid_mode=o["grid_mode"],
    )


def _synth_config(cfg: dict) -> SynthConfig:
    s = cfg["synth"]
    return SynthConfig(
        n_batteries=s["n_batteries"],
        seed=cfg["seed"],
        temperatures=tuple(s["temperatures"]),
        fade_rate_range=tuple(s["fade_rate_range"]),
        knee_onset_range=tuple(s["knee_onset_range"]),
        knee_life_range=tuple(s["knee_life_range"]),
        noise=NoiseLevels(
            voltage=s["noise"]["voltage"],
            capacity_rel=s["noise"]["capacity_rel"],
            shape_jitter=s["noise"]["shape_jitter"],
        ),
        max_cycles=s["max_cycles"],
        life_margin_cycles=s["life_margin_cycles"],
        detail_cycles=s["detail_cycles"],
        points_per_half_cycle=s["points_per_half_cycle"],
        coarse_points=s["coarse_points"],
    )


def git_blob_sha1(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\x00" % len(data) + data).hexdigest()


def inputs_hash(paths) -> str:
    blobs = sorted(git_blob_sha1(Path(p).read_bytes()) for p in paths)
    return hashlib.sha1("".join(blobs).encode("ascii")).hexdigest()


def _data_input_paths(cfg: dict) -> list:
    cache = cfg["preprocess"]["cache"]
    if cache and Path(cache).exists():
        return [cache]
    manifest_path = cfg["data"]["manifest"]
    if manifest_path is None:
        raise ConfigError("data.manifest (or an existing preprocess.cache) is required")
    manifest = load_manifest(manifest_path)
    return [manifest_path] + [e.path for e in manifest.entries]


def _load_samples(cfg: dict, s_values=None):
    cache = cfg["preprocess"]["cache"]
    if cache and Path(cache).exists() and s_values is None:
        log.info("loading samples from cache %s", cache)
        return load_sample_cache(cache)
    manifest_path = cfg["data"]["manifest"]
    if manifest_path is None:
        raise ConfigError("data.manifest is required when no cache is available")
    manifest = load_manifest(manifest_path)
    override = cfg["data"]["q0_mode_override"]
    return make_dataset(
        manifest,
        s_values if s_values is not None else cfg["preprocess"]["s_values"],
        lam=cfg["data"]["lambda"],
        filter_window=cfg["data"]["filter_window"],
        filter_threshold=cfg["data"]["filter_threshold"],
        q0_mode_override=None if override is None else Q0Mode(override),
        jobs=cfg["jobs"],
    )


def _write_report(out_dir: Path, report, cfg: dict, in_hash: str, title: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report_json(report, resolved_config=cfg, input_hash=in_hash), encoding="utf-8")
    (out_dir / "report.txt").write_text(render_report(report, title=title), encoding="utf-8")
    sys.stdout.write(render_report(report, title=title))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: dict, out: str, force: bool) -> int:
    out_dir = Path(out)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ConfigError(f"output directory {out_dir} is not empty (use --force to overwrite)")
    config = _synth_config(cfg)
    records, labels = generate_fleet(config)
    manifest_path = save_fleet(records, labels, out_dir)
    lives = np.array(sorted(lab.true_life for lab in labels))
    quantiles = np.quantile(lives, [0.0, 0.25, 0.5, 0.75, 1.0])
    print(f"wrote {len(records)} batteries to {out_dir} (manifest {manifest_path.name})")
    print("life quantiles (min/q25/median/q75/max):", " ".join(str(int(q)) for q in quantiles))
    return 0


def cmd_preprocess(cfg: dict) -> int:
    cache = cfg["preprocess"]["cache"]
    if cache is None:
        raise ConfigError("preprocess.cache output path is required")
    manifest_path = cfg["data"]["manifest"]
    if manifest_path is None:
        raise ConfigError("data.manifest is required")
    manifest = load_manifest(manifest_path)
    override = cfg["data"]["q0_mode_override"]
    samples = make_dataset(
        manifest,
        cfg["preprocess"]["s_values"],
        lam=cfg["data"]["lambda"],
        filter_window=cfg["data"]["filter_window"],
        filter_threshold=cfg["data"]["filter_threshold"],
        q0_mode_override=None if override is None else Q0Mode(override),
        jobs=cfg["jobs"],
    )
    save_sample_cache(samples, cache)
    batteries = len({s.battery_id for s in samples})
    print(f"cached {len(samples)} samples from {batteries} batteries to {cache}")
    return 0


def cmd_train(cfg: dict, out: str) -> int:
    samples = _load_samples(cfg)
    in_hash = inputs_hash(_data_input_paths(cfg))
    seeds = [int(s) for s in cfg["optim"]["seeds"]]
    report, artifacts = run_experiment(
        cfg["model"]["family"],
        _model_config(cfg),
        samples,
        _optim_config(cfg),
        epochs=cfg["optim"]["epochs"],
        seeds=seeds,
        alpha=cfg["eval"]["alpha"],
        by_battery=cfg["eval"]["by_battery"],
    )
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for seed, model, history, _ in artifacts:
        save_model(model, out_dir / f"checkpoint-seed{seed}.blpw")
    _write_report(out_dir, report, cfg, in_hash, title=f"train {cfg['model']['family']}")
    return 0


def cmd_eval(cfg: dict, checkpoint: str, out: str) -> int:
    if checkpoint is None:
        raise ConfigError("--checkpoint is required for eval")
    model = load_model(checkpoint)
    samples = _load_samples(cfg)
    in_hash = inputs_hash(_data_input_paths(cfg))
    assignment = split_dataset(samples, cfg["seed"], by_battery=cfg["eval"]["by_battery"])
    data = partition(samples, assignment)
    metrics = evaluate_model(
        model, data.test, alpha=cfg["eval"]["alpha"], train_conditions={s.condition for s in data.train}
    )
    report = aggregate_runs([metrics], [cfg["seed"]])
    _write_report(Path(out), report, cfg, in_hash, title=f"eval {Path(checkpoint).name}")
    return 0


def cmd_sweep(cfg: dict, checkpoint, out: str) -> int:
    s_list = sorted(set(int(s) for s in cfg["eval"]["sweep_s_list"]))
    union_s = sorted(set(cfg["preprocess"]["s_values"]) | set(s_list))
    samples = _load_samples(cfg, s_values=union_s)
    in_hash = inputs_hash(_data_input_paths(cfg))
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in cfg["optim"]["seeds"]]
    curves = []
    for seed in seeds:
        assignment = split_dataset(samples, seed, by_battery=cfg["eval"]["by_battery"])
        data = partition(samples, assignment)
        if checkpoint is not None:
            model = load_model(checkpoint)
        else:
            model, _, _ = train_model(
                cfg["model"]["family"],
                _model_config(cfg),
                data,
                _optim_config(cfg),
                epochs=cfg["optim"]["epochs"],
                seed=seed,
                alpha=cfg["eval"]["alpha"],
            )
        curves.append(sweep_usable_cycles(model, data.test, s_list, alpha=cfg["eval"]["alpha"]))
    mean_curve = [
        (
            s_list[i],
            float(np.mean([c[i][1] for c in curves])),
            float(np.mean([c[i][2] for c in curves])),
        )
        for i in range(len(s_list))
    ]
    csv_text = sweep_csv(mean_curve)
    (out_dir / "sweep.csv").write_text(csv_text, encoding="utf-8")
    doc = {
        "curves": [[[s, m, a] for s, m, a in curve] for curve in curves],
        "mean_curve": [[s, m, a] for s, m, a in mean_curve],
        "seeds": seeds,
        "resolved_config": cfg,
        "input_hash": in_hash,
    }
    (out_dir / "sweep.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    sys.stdout.write(csv_text)
    return 0


def cmd_transfer(cfg: dict, out: str) -> int:
    source_ckpt = cfg["eval"]["source_checkpoint"]
    if source_ckpt is None:
        raise ConfigError("eval.source_checkpoint is required for transfer")
    mode = TransferMode(cfg["eval"]["transfer_mode"])
    model = load_model(source_ckpt)
    samples = _load_samples(cfg)
    in_hash = inputs_hash(_data_input_paths(cfg))
    source_train = ()
    if mode is TransferMode.DOMAIN_ADAPT and cfg["eval"]["mmd_weight"] != 0.0:
        source_manifest = cfg["eval"]["source_manifest"]
        if source_manifest is None:
            raise ConfigError("eval.source_manifest is required for domain adaptation")
        source_samples = make_dataset(
            load_manifest(source_manifest),
            cfg["preprocess"]["s_values"],
            lam=cfg["data"]["lambda"],
            jobs=cfg["jobs"],
        )
        source_assignment = split_dataset(source_samples, cfg["seed"], by_battery=cfg["eval"]["by_battery"])
        source_train = partition(source_samples, source_assignment).train
    seeds = [int(s) for s in cfg["optim"]["seeds"]]
    runs, artifacts = [], []
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for seed in seeds:
        assignment = split_dataset(samples, seed, by_battery=cfg["eval"]["by_battery"])
        data = partition(samples, assignment)
        tuned, metrics, history = transfer_run(
            model,
            data,
            mode,
            optim=_optim_config(cfg),
            epochs=cfg["optim"]["epochs"],
            seed=seed,
            source_train=source_train,
            mmd_weight=cfg["eval"]["mmd_weight"],
            alpha=cfg["eval"]["alpha"],
        )
        runs.append(metrics)
        if mode is not TransferMode.FROZEN:
            save_model(tuned, out_dir / f"checkpoint-{mode.value}-seed{seed}.blpw")
    report = aggregate_runs(runs, seeds)
    _write_report(out_dir, report, cfg, in_hash, title=f"transfer {mode.value}")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    from .seeding import substream as sub

    seed = cfg["seed"]
    rng = substream(seed, "gradcheck-cli")
    ok = True

    def one(tag, loss_and_grads, params, tol, budget=None):
        nonlocal ok
        report = dk.check_gradients(loss_and_grads, params, tolerance=tol, coord_budget=budget, seed=seed)
        status = "PASS" if report.passed else "FAIL"
        print(f"{tag}: {status} (max rel err {report.max_rel_err:.3e}, tol {tol:g})")
        ok = ok and report.passed

    # standalone affine
    params = dk.ParameterSet()
    params.add("w", rng.normal(size=(4, 6)))
    params.add("b", rng.normal(size=(1, 4)))
    x = rng.normal(size=(5, 6))
    t = rng.normal(size=(5, 4))

    def affine_loss():
        params.zero_grads()
        y = dk.affine_forward(x, params.value("w"), params.value("b"))
        loss, d = dk.mse_loss(y.reshape(-1), t.reshape(-1))
        _, dw, db = dk.affine_backward(d.reshape(y.shape), x, params.value("w"))
        params.accumulate("w", dw)
        params.accumulate("b", db)
        return loss

    one("affine", affine_loss, params, 1e-6)

    cp = CyclePatchModel(
        CyclePatchConfig(embed_width=8, intra_hidden=6, intra_layers=2, inter=MlpStackEncoder(layers=1, hidden=7)),
        seed=seed,
    )
    tokens = rng.normal(size=(2, 3, 900))
    targets = rng.normal(size=2)

    def cp_loss():
        cp.params.zero_grads()
        raw, _, cache = cp.forward_tokens(tokens)
        loss, d_raw = dk.mse_loss(raw, targets)
        cp.backward(cache, d_raw)
        return loss

    one("cyclepatch", cp_loss, cp.params, 1e-4, budget=200)

    mlp = MlpBaselineModel(MlpBaselineConfig(width=8, hidden=6, layers=2), seed=seed)
    flat = rng.normal(size=(2, 30000))

    def mlp_loss():
        mlp.params.zero_grads()
        raw, _, cache = mlp.forward_flat(flat)
        loss, d_raw = dk.mse_loss(raw, targets)
        mlp.backward(cache, d_raw)
        return loss

    one("mlp", mlp_loss, mlp.params, 1e-4, budget=200)

    if not ok:
        raise NumericalError("gradient check failed")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cyclelife", description="Battery cycle-life prediction pipeline")
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the top-level seed")
        p.add_argument("--jobs", type=int, default=None, help="worker threads for per-battery stages")

    p = sub.add_parser("synth", help="generate a synthetic degradation fleet")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--n-batteries", type=int, default=None)

    p = sub.add_parser("preprocess", help="manifest -> cleaned, resampled sample cache")
    common(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--cache", default=None)

    p = sub.add_parser("train", help="train and evaluate over the configured seeds")
    common(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--cache", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--cache", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="metrics vs usable-cycle count")
    common(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--cache", default=None)
    p.add_argument("--checkpoint", default=None, help="evaluate this checkpoint instead of retraining")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("transfer", help="frozen / fine-tune / domain-adapt a pretrained model")
    common(p)
    p.add_argument("--manifest", default=None, help="target fleet manifest")
    p.add_argument("--cache", default=None)
    p.add_argument("--source-checkpoint", default=None)
    p.add_argument("--source-manifest", default=None)
    p.add_argument("--mode", default=None, choices=[m.value for m in TransferMode])
    p.add_argument("--mmd-weight", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("gradcheck", help="finite-difference checks of the kernels and models")
    common(p)
    return parser


def _resolve(args) -> dict:
    cfg = load_config(args.config)
    _apply_env_seed(cfg)
    # flags beat config beats defaults
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        cfg["jobs"] = args.jobs
    if getattr(args, "manifest", None) is not None:
        cfg["data"]["manifest"] = args.manifest
    if getattr(args, "cache", None) is not None:
        cfg["preprocess"]["cache"] = args.cache
    if getattr(args, "epochs", None) is not None:
        cfg["optim"]["epochs"] = args.epochs
    if getattr(args, "n_batteries", None) is not None:
        cfg["synth"]["n_batteries"] = args.n_batteries
    if getattr(args, "mode", None) is not None:
        cfg["eval"]["transfer_mode"] = args.mode
    if getattr(args, "mmd_weight", None) is not None:
        cfg["eval"]["mmd_weight"] = args.mmd_weight
    if getattr(args, "source_checkpoint", None) is not None:
        cfg["eval"]["source_checkpoint"] = args.source_checkpoint
    if getattr(args, "source_manifest", None) is not None:
        cfg["eval"]["source_manifest"] = args.source_manifest
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = _resolve(args)
        if args.command == "synth":
            return cmd_synth(cfg, args.out, args.force)
        if args.command == "preprocess":
            return cmd_preprocess(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.out)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.checkpoint, args.out)
        if args.command == "transfer":
            return cmd_transfer(cfg, args.out)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        log.error("config error: %s", e)
        return 2
    except (DataError, OSError) as e:
        log.error("data error: %s", e)
        return 3
    except NumericalError as e:
        log.error("numerical failure: %s", e)
        return 4
    except CycleLifeError as e:
        log.error("%s", e)
        return 3


if __name__ == "__main__":
    sys.exit(main())
