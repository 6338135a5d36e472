"""``hawkes-attention`` command line: one command per process, one config per run."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import infer, timeseries as ts, train as tr
from .classical_hawkes import HawkesParams, dataset_nll, simulate_dataset
from .config import RunConfig, load_config
from .data import EventDataset, load_dataset, split_indices, write_csv, write_dataset
from .data import batch as make_batch
from .errors import ConfigError, DataError, HawkesAttentionError
from .kernels import export_curves
from .model import ModelConfig, effective_kernel

COMMANDS = ("simulate", "train", "eval", "predict", "export-kernels", "grad-check", "ts-train", "ts-eval")


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out or "run")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e}") from e
    return out


def _checkpoint_path(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else out / "checkpoint.bin"


def _load(path: str | None, what: str) -> EventDataset:
    if not path:
        raise ConfigError(f"{what} path is not set (data.path)")
    return load_dataset(path)


def _splits(cfg: RunConfig) -> dict[str, EventDataset]:
    """train/valid/test either from explicit files or from a seeded split of data.path."""
    d = cfg.data
    full = _load(d.path, "dataset")
    if d.valid_path:
        out = {"train": full, "valid": load_dataset(d.valid_path, split="valid")}
        out["test"] = load_dataset(d.test_path, split="test") if d.test_path else out["valid"]
    else:
        idx = split_indices(full, tuple(d.split), seed=cfg.seed)
        out = {name: full.subset(i, name) for name, i in zip(("train", "valid", "test"), idx)}
    out["all"] = full
    return out


def _hawkes_params(cfg: RunConfig) -> HawkesParams:
    h = cfg.hawkes
    try:
        return HawkesParams(np.array(h.mu), np.array(h.alpha), np.array(h.beta))
    except ValueError as e:
        raise ConfigError(f"hawkes parameters: {e}") from e


def _model_config(cfg: RunConfig, num_types: int) -> ModelConfig:
    try:
        return ModelConfig(num_types=num_types, **cfg.model.model_dump())
    except ValueError as e:
        raise ConfigError(f"model: {e}") from e


def _train_config(cfg: RunConfig) -> tr.TrainConfig:
    d = cfg.train.model_dump()
    d["seed"] = cfg.seed if d["seed"] is None else d["seed"]
    return tr.TrainConfig(**d)


def _predict_config(cfg: RunConfig) -> infer.PredictionConfig:
    d = cfg.predict.model_dump()
    d["seed"] = cfg.seed if d["seed"] is None else d["seed"]
    return infer.PredictionConfig(**d)


# -- commands ---------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    p = _hawkes_params(cfg)
    h = cfg.hawkes
    ds = simulate_dataset(p, h.horizon, h.n_sequences, seed=cfg.seed, min_events=h.min_events)
    write_dataset(ds, out / "dataset.json")
    write_csv(ds, out / "dataset.csv")
    span = sum(float(s.times[-1]) for s in ds.sequences)
    write_json(out / "metrics.json", {
        "n_sequences": len(ds),
        "n_events": ds.n_events,
        "events_per_unit_time": ds.n_events / (h.horizon * len(ds)),
        "exact_nll_per_event": dataset_nll(p, ds) / ds.n_events,
        "observed_span": span,
        "spectral_radius": p.spectral_radius(),
    })
    return 0


def cmd_train(cfg: RunConfig, out: Path) -> int:
    splits = _splits(cfg)
    train_ds = splits["train"]
    model = tr.build_model(_model_config(cfg, train_ds.num_types), train_ds, seed=cfg.seed)
    tcfg = _train_config(cfg)
    ckpt = _checkpoint_path(cfg, out)
    report = tr.fit(model, train_ds, splits["valid"], tcfg, checkpoint_path=ckpt,
                    log=lambda s: print(s, file=sys.stderr))
    tr.save_checkpoint(model, ckpt)
    metrics = report.metrics()
    metrics["test_nll_per_event"] = tr.evaluate_nll(model, splits["test"], S=tcfg.S)
    metrics["n_parameters"] = model.n_parameters()
    metrics["n_kernel_parameters"] = model.n_kernel_parameters()
    write_json(out / "metrics.json", metrics)
    write_json(out / "train_report.json", report.to_dict())
    return 0


def _eval_dataset(cfg: RunConfig) -> EventDataset:
    return _splits(cfg)[cfg.data.eval_split]


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    model = tr.load_checkpoint(_checkpoint_path(cfg, out))
    ds = _eval_dataset(cfg)
    ds = ds.subset([i for i, s in enumerate(ds.sequences) if len(s) >= 2], ds.split)
    if len(ds) == 0:
        raise DataError("no sequence with at least two events to evaluate")
    report = infer.evaluate(model, ds, _predict_config(cfg), with_nll=True, S=cfg.train.S)
    write_json(out / "metrics.json", report.metrics())
    report.write_predictions(out / "predictions.csv")
    return 0


def cmd_predict(cfg: RunConfig, out: Path) -> int:
    """Next event after the end of every sequence in data.path."""
    model = tr.load_checkpoint(_checkpoint_path(cfg, out))
    ds = _load(cfg.data.path, "dataset")
    pcfg = _predict_config(cfg)
    truncs = []
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seq_id", "position", "true_time", "pred_time", "true_type", "pred_type"])
        for i, seq in enumerate(ds.sequences):
            pred = infer.predict_next(model, seq, pcfg, seed=infer.sequence_seed(pcfg.seed, i))
            truncs.append(pred.truncation_fraction)
            w.writerow([i, len(seq), "", repr(pred.time), "", pred.type])
    write_json(out / "metrics.json", {"n_predictions": len(ds),
                                      "truncation_fraction": float(np.mean(truncs)),
                                      "config": asdict(pcfg)})
    return 0


def cmd_export_kernels(cfg: RunConfig, out: Path) -> int:
    model = tr.load_checkpoint(_checkpoint_path(cfg, out))
    k = cfg.kernels
    grid_max = k.grid_max if k.grid_max is not None else 3.0 * model.bank.time_scale
    if grid_max <= 0 or k.grid_points < 2:
        raise ConfigError("kernels.grid_max must be positive and grid_points >= 2")
    grid = np.linspace(0.0, grid_max, k.grid_points)
    rows = export_curves(model.bank, grid, out / "kernels.csv")
    metrics = {"rows": rows, "grid_max": grid_max, "grid_points": k.grid_points}
    if cfg.data.path:
        ds = _load(cfg.data.path, "dataset")
        s = k.reference_sequence
        if not 0 <= s < len(ds):
            raise ConfigError(f"kernels.reference_sequence {s} outside [0, {len(ds)})")
        pos = len(ds.sequences[s]) - 1 if k.reference_position is None else k.reference_position
        b = make_batch(ds, [s], S=1)
        K = ds.num_types
        coeffs = {}
        with open(out / "effective_kernels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", "target", "dt", "kappa"])
            for a in range(K):
                for c in range(K):
                    try:
                        curve, co = effective_kernel(model, b, 0, pos, a, c, grid)
                    except ValueError as e:
                        raise ConfigError(str(e)) from e
                    coeffs[f"{a}->{c}"] = co.tolist()
                    for x, y in zip(grid, curve):
                        w.writerow([a, c, repr(float(x)), repr(float(y))])
        metrics["reference"] = {"sequence": s, "position": pos}
        metrics["effective_kernel_coefficients"] = coeffs
    write_json(out / "metrics.json", metrics)
    return 0


def cmd_grad_check(cfg: RunConfig, out: Path) -> int:
    config, ds = tr.toy_instance()
    model = tr.build_model(config, ds, seed=cfg.seed)
    report = tr.model_grad_check(model, ds)
    write_json(out / "grad_check.json", report.to_dict())
    write_json(out / "metrics.json", report.to_dict())
    return 0 if report.passed else 1


def _series(cfg: RunConfig) -> ts.SeriesDataset:
    t = cfg.timeseries
    kw = dict(input_len=t.input_len, horizon=t.horizon, ratios=tuple(t.split))
    if t.path:
        return ts.load_series(t.path, **kw)
    values, stamps = ts.synthetic_series(t.synthetic_length, t.synthetic_period, t.synthetic_trend,
                                         t.synthetic_noise, seed=cfg.seed)
    return ts.SeriesDataset(values, stamps, **kw)


def _ts_metrics(model: ts.TSModel, ds: ts.SeriesDataset) -> dict:
    w = ds.windows("test")
    mse, mae = ts.ts_metrics(ts.predict_windows(model, w), w.targets)
    n_mse, n_mae = ts.ts_metrics(ts.naive_last_value(w), w.targets)
    return {"test_mse": mse, "test_mae": mae, "naive_mse": n_mse, "naive_mae": n_mae,
            "n_test_windows": len(w)}


def cmd_ts_train(cfg: RunConfig, out: Path) -> int:
    t = cfg.timeseries
    ds = _series(cfg)
    mcfg = ts.TSConfig(channels=ds.n_channels, input_len=t.input_len, horizon=t.horizon,
                       d_model=t.d_model, d_k=t.d_k, d_v=t.d_v, n_heads=t.n_heads, n_layers=t.n_layers,
                       d_ff=t.d_ff, phi_width=t.phi_width, phi_depth=t.phi_depth, dropout=t.dropout)
    model = ts.build_ts_model(mcfg, ds, seed=cfg.seed)
    tcfg = ts.TSTrainConfig(lr=t.lr, batch_size=t.batch_size, max_epochs=t.max_epochs,
                            patience=t.patience, seed=cfg.seed, stride=t.stride)
    history = ts.ts_fit(model, ds, tcfg, log=lambda s: print(s, file=sys.stderr))
    ts.save_ts_checkpoint(model, _checkpoint_path(cfg, out))
    metrics = _ts_metrics(model, ds)
    metrics["history"] = history
    write_json(out / "metrics.json", metrics)
    return 0


def cmd_ts_eval(cfg: RunConfig, out: Path) -> int:
    model = ts.load_ts_checkpoint(_checkpoint_path(cfg, out))
    write_json(out / "metrics.json", _ts_metrics(model, _series(cfg)))
    return 0


HANDLERS = {
    "simulate": cmd_simulate, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
    "export-kernels": cmd_export_kernels, "grad-check": cmd_grad_check,
    "ts-train": cmd_ts_train, "ts-eval": cmd_ts_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hawkes-attention", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set train.lr=5e-4 (repeatable)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="global seed")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides, seed=args.seed, out=args.out)
        out = _out_dir(cfg)
        (out / "config.echo").write_text(cfg.echo())
        return HANDLERS[args.command](cfg, out)
    except HawkesAttentionError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
