"""Command-line entry point: seeded, manifest-tracked experiment runs.

Subcommands:

  synth     simulate a series with known dynamics and error structure
  train     fit a base model (optionally with error adjustment) from CSV
  eval      accuracy metrics for a checkpoint on a chronological split
  diagnose  residual-correlation diagnostics (ECM, ACF, cross-lag) as JSON
  compare   train the unadjusted baseline plus each requested
            parameterization under identical seeds and tabulate the results

Every run directory receives a manifest recording the resolved
configuration, seed, and input hashes; metric outputs contain no timestamps,
so reruns with identical inputs are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .adjust import (
    DEFAULT_REGULARIZATION,
    KINDS,
    ErrorModel,
    predict_windows,
)
from .data import (
    Normalizer,
    SeriesFrame,
    chronological_split,
    ingest_csv,
    make_windows,
    save_series_csv,
)
from .errors import ConfigurationError, SaeaError, ValidationError
from .forecaster import MODEL_KINDS, build_forecaster
from .graph import (
    SensorGraph,
    load_adjacency_csv,
    normalized_adjacency,
    save_adjacency_csv,
    structural_mask,
)
from .metrics import mape, residual_report, rmse
from .synth import GraphSpec, SynthConfig, generate
from .train import TrainConfig, fit, load_checkpoint_blob

ALL_KINDS = ("none",) + KINDS


# ---------------------------------------------------------------------------
# config handling

TRAIN_FIELDS = {
    # name: (type, default)
    "model": (str, "nodear"),
    "hidden": (int, 64),
    "kind": (str, "sparse_full"),
    "mask_order": (int, 1),
    "alpha": (float, None),
    "beta": (float, None),
    "rank": (int, None),
    "var_order": (int, 1),
    "horizon_min": (str, "5"),
    "step_min": (float, 5.0),
    "history": (int, 12),
    "epochs": (int, 300),
    "lr": (float, 5e-4),
    "batch": (int, 50),
    "seed": (int, 0),
    "optimizer": (str, "rmsprop"),
    "train_frac": (float, 0.7),
    "val_frac": (float, 0.1),
    "normalize": (str, "none"),
    "select": (str, "best"),
    "grad_clip": (float, None),
    "shuffle": (int, 1),
}


def read_config_file(path) -> dict:
    """key = value lines; blank lines and '#' comments ignored."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in text.split("=", 1))
            values[key] = raw
    return values


def resolve_config(args, file_values: dict) -> dict:
    """CLI flag > config file > built-in default, per field."""
    resolved = {}
    for name, (caster, default) in TRAIN_FIELDS.items():
        cli_value = getattr(args, name, None)
        if cli_value is not None:
            resolved[name] = cli_value
        elif name in file_values:
            try:
                resolved[name] = caster(file_values[name])
            except ValueError as exc:
                raise ValidationError(f"config value {name} = {file_values[name]!r}: {exc}")
        else:
            resolved[name] = default
    unknown = set(file_values) - set(TRAIN_FIELDS)
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    return resolved


def parse_horizons(minutes_csv: str, step_min: float) -> list[tuple[float, int]]:
    """Comma-separated horizon minutes -> [(minutes, zero-based step index)]."""
    out = []
    for token in str(minutes_csv).split(","):
        minutes = float(token)
        steps = minutes / step_min
        if steps < 1 or abs(steps - round(steps)) > 1e-9:
            raise ValidationError(
                f"horizon {minutes} min is not a positive multiple of the "
                f"{step_min} min sampling step"
            )
        out.append((minutes, int(round(steps)) - 1))
    return out


# ---------------------------------------------------------------------------
# json / manifest helpers


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    return obj


def write_json(path, obj) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(to_jsonable(obj), fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.replace(tmp, path)


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir, command, config, seed, inputs, outputs) -> None:
    config_bytes = json.dumps(to_jsonable(config), sort_keys=True).encode()
    manifest = {
        "command": command,
        "config": to_jsonable(config),
        "config_sha256": hashlib.sha256(config_bytes).hexdigest(),
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {
            name: sha256_file(os.path.join(out_dir, name)) for name in sorted(outputs)
        },
        "toolkit_version": __version__,
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }
    write_json(os.path.join(out_dir, "manifest.json"), manifest)


# ---------------------------------------------------------------------------
# shared training pipeline


def build_error_model(
    kind: str,
    n: int,
    var_order: int,
    rank,
    graph: SensorGraph | None,
    mask_order: int,
    seed: int,
) -> ErrorModel | None:
    if kind == "none":
        return None
    if kind not in KINDS:
        raise ValidationError(f"unknown error-model kind {kind!r}")
    mask = None
    if kind == "structural":
        if graph is None:
            raise ConfigurationError("structural kind requires --adjacency")
        mask = structural_mask(graph, mask_order)
    if kind in ("low_rank", "low_rank_sparse") and rank is None:
        rank = min(DEFAULT_REGULARIZATION[kind]["rank"], n)
    return ErrorModel.for_training(
        kind, n, var_order=var_order, rank=rank, mask=mask, seed=seed
    )


def run_single_training(
    frame: SeriesFrame,
    graph: SensorGraph | None,
    config: dict,
    kind: str,
    horizon_step: int,
):
    """Split, normalize, window, fit, and score one configuration.

    Returns (metrics dict in original units, report, best blob, last blob).
    """
    train_frame, val_frame, test_frame = chronological_split(
        frame, config["train_frac"], config["val_frac"]
    )
    normalizer = Normalizer(config["normalize"]).fit(train_frame.values)
    norm = lambda f: SeriesFrame(normalizer.transform(f.values), f.step_minutes)
    train_n, val_n, test_n = norm(train_frame), norm(val_frame), norm(test_frame)

    train_ws = make_windows(train_n, config["history"], horizon_step)
    val_ws = make_windows(val_n, config["history"], horizon_step)
    test_ws = make_windows(test_n, config["history"], horizon_step)

    model = build_forecaster(
        config["model"],
        config["history"],
        frame.num_sensors,
        seed=config["seed"],
        graph=graph,
        hidden=config["hidden"],
    )
    em = build_error_model(
        kind,
        frame.num_sensors,
        config["var_order"],
        config["rank"],
        graph,
        config["mask_order"],
        config["seed"],
    )
    cfg = TrainConfig(
        epochs=config["epochs"],
        learning_rate=config["lr"],
        batch_size=config["batch"],
        optimizer=config["optimizer"],
        alpha=config["alpha"],
        beta=config["beta"],
        rank=config["rank"],
        history=config["history"],
        horizon_step=horizon_step,
        var_order=config["var_order"],
        seed=config["seed"],
        shuffle=bool(config["shuffle"]),
        grad_clip=config["grad_clip"],
    )
    report = fit(model, em, cfg, train_ws, val_ws)

    extra = {
        "horizon_step": horizon_step,
        "step_minutes": frame.step_minutes,
        "normalizer": normalizer.to_blob(),
    }
    best_blob = {**report.best_checkpoint, **extra}
    last_blob = {**report.final_checkpoint, **extra}

    metrics = {"kind": kind, "horizon_step": horizon_step}
    for label, blob in (("best", best_blob), ("last", last_blob)):
        preds = _predict_from_blob(blob, test_ws)
        truth = normalizer.inverse(test_ws.targets)
        guess = normalizer.inverse(preds)
        pct, masked = mape(truth, guess)
        metrics[f"test_{label}"] = {
            "mape_percent": pct,
            "mape_masked_count": masked,
            "rmse": rmse(truth, guess),
        }
    metrics["val_mse_best"] = report.best_val_mse
    metrics["best_epoch"] = report.best_epoch
    metrics["epochs_run"] = report.epochs_run
    metrics["diverged"] = report.diverged
    return metrics, report, best_blob, last_blob


def _predict_from_blob(blob: dict, ws) -> np.ndarray:
    model, em = load_checkpoint_blob(blob)
    return predict_windows(model, em, ws)


def _split_frame_for_eval(frame: SeriesFrame, split: str, train_frac, val_frac):
    parts = dict(zip(("train", "val", "test"), chronological_split(frame, train_frac, val_frac)))
    if split not in parts:
        raise ValidationError(f"split must be one of train/val/test, got {split!r}")
    return parts[split]


def _eval_checkpoint(checkpoint_path, series_path, split, train_frac, val_frac, history):
    """Shared by eval and diagnose: (truth, predictions) in original units."""
    with open(checkpoint_path, encoding="utf-8") as fh:
        blob = json.load(fh)
    model, em = load_checkpoint_blob(blob)
    normalizer = Normalizer.from_blob(blob.get("normalizer", {"mode": "none"}))
    horizon_step = int(blob.get("horizon_step", 0))
    frame = ingest_csv(series_path, step_minutes=blob.get("step_minutes", 5.0))
    part = _split_frame_for_eval(frame, split, train_frac, val_frac)
    part_n = SeriesFrame(normalizer.transform(part.values), part.step_minutes)
    ws = make_windows(part_n, history if history is not None else model.history, horizon_step)
    preds = predict_windows(model, em, ws)
    return normalizer.inverse(ws.targets), normalizer.inverse(preds), horizon_step


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    spec = GraphSpec(args.graph, args.n, p_edge=args.p_edge, seed=args.graph_seed)
    graph = spec.build()
    if args.phi_star:
        phi = np.loadtxt(args.phi_star, delimiter=",", ndmin=2)
    else:
        phi = args.phi_diag * np.eye(graph.n) + args.phi_hop * normalized_adjacency(graph)
        if args.phi_radius is not None:
            current = float(np.max(np.abs(np.linalg.eigvals(phi))))
            if current == 0:
                raise ValidationError("cannot rescale a zero coefficient matrix")
            phi *= args.phi_radius / current
    cfg = SynthConfig(
        graph=spec,
        steps=args.steps,
        dgp_self=tuple(float(c) for c in args.dgp_self.split(",")),
        dgp_hop=tuple(float(c) for c in args.dgp_hop.split(",")),
        phi_star=phi,
        sigma=args.sigma,
        quad_coeff=args.quad,
        seed=args.seed,
    )
    bundle = generate(cfg)
    save_series_csv(bundle.frame, os.path.join(args.out, "series.csv"))
    save_adjacency_csv(bundle.graph, os.path.join(args.out, "adjacency.csv"))
    with open(os.path.join(args.out, "phi_star.csv"), "w", encoding="utf-8") as fh:
        for row in bundle.phi_star:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    config = {**cfg.to_dict(), "floor": bundle.floor}
    write_manifest(
        args.out,
        "synth",
        config,
        args.seed,
        inputs=[args.phi_star] if args.phi_star else [],
        outputs=["series.csv", "adjacency.csv", "phi_star.csv"],
    )
    print(f"wrote synthetic bundle to {args.out} (floor RMSE {bundle.floor:.6g})")
    return 0


def _load_series_and_graph(args, step_minutes: float):
    frame = ingest_csv(args.series, step_minutes=step_minutes)
    graph = load_adjacency_csv(args.adjacency) if args.adjacency else None
    if graph is not None and graph.n != frame.num_sensors:
        raise ValidationError(
            f"adjacency has {graph.n} nodes but series has {frame.num_sensors} sensors"
        )
    return frame, graph


def _resolve_kind_defaults(config: dict, kind: str, n: int) -> None:
    """Fill alpha/beta/rank with the built-in defaults for the chosen kind so
    the manifest records the settings actually used."""
    if kind == "none":
        return
    defaults = DEFAULT_REGULARIZATION[kind]
    if config["alpha"] is None:
        config["alpha"] = defaults["alpha"]
    if config["beta"] is None and "beta" in defaults:
        config["beta"] = defaults["beta"]
    if config["rank"] is None and "rank" in defaults:
        config["rank"] = min(defaults["rank"], n)


def cmd_train(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    config = resolve_config(args, file_values)
    kind = config["kind"]
    frame, graph = _load_series_and_graph(args, config["step_min"])
    _resolve_kind_defaults(config, kind, frame.num_sensors)
    os.makedirs(args.out, exist_ok=True)

    horizons = parse_horizons(config["horizon_min"], config["step_min"])
    all_metrics, outputs = [], []
    for minutes, p in horizons:
        metrics, report, best_blob, last_blob = run_single_training(
            frame, graph, config, kind, p
        )
        tag = f"h{int(minutes)}min"
        for label, blob in (("best", best_blob), ("last", last_blob)):
            name = f"checkpoint_{tag}_{label}.json"
            tmp_path = os.path.join(args.out, name)
            with open(tmp_path + ".tmp", "w", encoding="utf-8") as fh:
                json.dump(to_jsonable(blob), fh, sort_keys=True)
            os.replace(tmp_path + ".tmp", tmp_path)
            outputs.append(name)
        report_name = f"train_report_{tag}.json"
        write_json(
            os.path.join(args.out, report_name),
            {
                "train_loss": report.train_loss,
                "val_mse": report.val_mse,
                "radius": report.radius,
                "epoch_seconds": report.epoch_seconds,
                "best_epoch": report.best_epoch,
                "diverged": report.diverged,
            },
        )
        outputs.append(report_name)
        all_metrics.append({**metrics, "horizon_min": minutes})
    write_json(
        os.path.join(args.out, "metrics.json"),
        {"selection": config["select"], "horizons": all_metrics},
    )
    outputs.append("metrics.json")
    inputs = [args.series] + ([args.adjacency] if args.adjacency else [])
    if args.config:
        inputs.append(args.config)
    write_manifest(args.out, "train", config, config["seed"], inputs, outputs)
    for m in all_metrics:
        chosen = m["test_best" if config["select"] == "best" else "test_last"]
        print(
            f"horizon {m['horizon_min']:g} min: test RMSE {chosen['rmse']:.6g}, "
            f"MAPE {chosen['mape_percent']:.4g}%"
        )
    return 0


def cmd_eval(args) -> int:
    truth, preds, horizon_step = _eval_checkpoint(
        args.checkpoint, args.series, args.split, args.train_frac, args.val_frac, None
    )
    pct, masked = mape(truth, preds)
    payload = {
        "split": args.split,
        "horizon_step": horizon_step,
        "mape_percent": pct,
        "mape_masked_count": masked,
        "rmse": rmse(truth, preds),
        "num_windows": int(truth.shape[0]),
    }
    os.makedirs(args.out, exist_ok=True)
    write_json(os.path.join(args.out, "metrics.json"), payload)
    write_manifest(
        args.out,
        "eval",
        {"split": args.split, "train_frac": args.train_frac, "val_frac": args.val_frac},
        0,
        inputs=[args.checkpoint, args.series],
        outputs=["metrics.json"],
    )
    print(f"{args.split} RMSE {payload['rmse']:.6g}, MAPE {pct:.4g}%")
    return 0


def cmd_diagnose(args) -> int:
    truth, preds, _ = _eval_checkpoint(
        args.checkpoint, args.series, args.split, args.train_frac, args.val_frac, None
    )
    ts_lags = tuple(int(t) for t in args.ts_lags.split(","))
    payload = residual_report(truth, preds, max_lag=args.max_lag, ts_lags=ts_lags)
    payload["split"] = args.split
    os.makedirs(args.out, exist_ok=True)
    write_json(os.path.join(args.out, "diagnostics.json"), payload)
    write_manifest(
        args.out,
        "diagnose",
        {"split": args.split, "max_lag": args.max_lag, "ts_lags": list(ts_lags)},
        0,
        inputs=[args.checkpoint, args.series],
        outputs=["diagnostics.json"],
    )
    print(
        f"spatial ECM off-diagonal energy {payload['ecm_spatial_offdiag_energy']:.4f}, "
        f"ACF band {payload['acf_band']:.4f}"
    )
    return 0


def cmd_compare(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    config = resolve_config(args, file_values)
    kinds = ALL_KINDS if args.kinds == "all" else tuple(args.kinds.split(","))
    for kind in kinds:
        if kind not in ALL_KINDS:
            raise ValidationError(f"unknown kind {kind!r}; expected subset of {ALL_KINDS}")
    frame, graph = _load_series_and_graph(args, config["step_min"])
    os.makedirs(args.out, exist_ok=True)
    horizons = parse_horizons(config["horizon_min"], config["step_min"])

    rows = []
    for kind in kinds:
        kind_config = dict(config)
        kind_config["kind"] = kind
        _resolve_kind_defaults(kind_config, kind, frame.num_sensors)
        for minutes, p in horizons:
            metrics, _, _, _ = run_single_training(frame, graph, kind_config, kind, p)
            chosen = metrics["test_best" if config["select"] == "best" else "test_last"]
            rows.append(
                {
                    "kind": kind,
                    "horizon_min": minutes,
                    "mape_percent": chosen["mape_percent"],
                    "rmse": chosen["rmse"],
                    "val_mse_best": metrics["val_mse_best"],
                }
            )
    write_json(
        os.path.join(args.out, "compare.json"),
        {"kinds": list(kinds), "horizons": [m for m, _ in horizons], "rows": rows},
    )
    with open(os.path.join(args.out, "compare.csv"), "w", encoding="utf-8") as fh:
        fh.write("kind,horizon_min,mape_percent,rmse\n")
        for row in rows:
            fh.write(
                f"{row['kind']},{row['horizon_min']:g},"
                f"{row['mape_percent']!r},{row['rmse']!r}\n"
            )
    inputs = [args.series] + ([args.adjacency] if args.adjacency else [])
    if args.config:
        inputs.append(args.config)
    write_manifest(
        args.out,
        "compare",
        {**config, "kinds": list(kinds)},
        config["seed"],
        inputs,
        ["compare.json", "compare.csv"],
    )
    for row in rows:
        print(
            f"{row['kind']:>16} h={row['horizon_min']:g}min "
            f"RMSE {row['rmse']:.6g} MAPE {row['mape_percent']:.4g}%"
        )
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_train_flags(parser, include_kind=True):
    parser.add_argument("--series", required=True, help="series CSV (header row)")
    parser.add_argument("--adjacency", help="headerless N x N adjacency CSV")
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--model", choices=MODEL_KINDS)
    parser.add_argument("--hidden", type=int)
    if include_kind:
        parser.add_argument("--kind", choices=ALL_KINDS)
    parser.add_argument("--mask-order", dest="mask_order", type=int, choices=(1, 2))
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--rank", type=int)
    parser.add_argument("--var-order", dest="var_order", type=int, choices=(1, 2))
    parser.add_argument("--horizon-min", dest="horizon_min", help="comma list of minutes")
    parser.add_argument("--step-min", dest="step_min", type=float)
    parser.add_argument("--history", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--optimizer", choices=("rmsprop", "sgd"))
    parser.add_argument("--train-frac", dest="train_frac", type=float)
    parser.add_argument("--val-frac", dest="val_frac", type=float)
    parser.add_argument("--normalize", choices=("none", "zscore"))
    parser.add_argument("--select", choices=("best", "last"))
    parser.add_argument("--grad-clip", dest="grad_clip", type=float)
    parser.add_argument("--out", required=True, help="run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saea",
        description="Forecasting with jointly learned autocorrelated-error adjustment",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="simulate a synthetic bundle")
    p_synth.add_argument("--graph", choices=("path", "ring", "erdos_renyi"), default="ring")
    p_synth.add_argument("--n", type=int, default=20)
    p_synth.add_argument("--p-edge", dest="p_edge", type=float)
    p_synth.add_argument("--graph-seed", dest="graph_seed", type=int, default=0)
    p_synth.add_argument("--steps", type=int, default=5000)
    p_synth.add_argument("--sigma", type=float, default=1.0)
    p_synth.add_argument("--dgp-self", dest="dgp_self", default="0.5,0.2")
    p_synth.add_argument("--dgp-hop", dest="dgp_hop", default="0.3,0.0")
    p_synth.add_argument("--quad", type=float, default=0.0)
    p_synth.add_argument("--phi-star", dest="phi_star", help="coefficient CSV")
    p_synth.add_argument("--phi-diag", dest="phi_diag", type=float, default=0.3)
    p_synth.add_argument("--phi-hop", dest="phi_hop", type=float, default=0.2)
    p_synth.add_argument("--phi-radius", dest="phi_radius", type=float)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="fit a model from CSV inputs")
    _add_train_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint on a split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--series", required=True)
    p_eval.add_argument("--split", choices=("train", "val", "test"), default="test")
    p_eval.add_argument("--train-frac", dest="train_frac", type=float, default=0.7)
    p_eval.add_argument("--val-frac", dest="val_frac", type=float, default=0.1)
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_diag = sub.add_parser("diagnose", help="residual correlation diagnostics")
    p_diag.add_argument("--checkpoint", required=True)
    p_diag.add_argument("--series", required=True)
    p_diag.add_argument("--split", choices=("train", "val", "test"), default="test")
    p_diag.add_argument("--train-frac", dest="train_frac", type=float, default=0.7)
    p_diag.add_argument("--val-frac", dest="val_frac", type=float, default=0.1)
    p_diag.add_argument("--max-lag", dest="max_lag", type=int, default=40)
    p_diag.add_argument("--ts-lags", dest="ts_lags", default="1")
    p_diag.add_argument("--out", required=True)
    p_diag.set_defaults(func=cmd_diagnose)

    p_cmp = sub.add_parser("compare", help="baseline vs parameterizations table")
    _add_train_flags(p_cmp, include_kind=False)
    p_cmp.add_argument("--kinds", default="all", help="'all' or comma list")
    p_cmp.set_defaults(func=cmd_compare)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SaeaError as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


def main() -> None:
    sys.exit(run())
