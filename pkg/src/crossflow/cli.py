"""Command-line harness: synthesize data, train, evaluate, and export
attention maps or prediction series.

Exit codes: 0 success, 2 usage, 3 data/format/config error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np

from .data import SyntheticSpec, gen_synthetic, read_bundle, write_bundle
from .errors import (ConfigError, CrossflowError, DataError, FormatError,
                     NumericError)
from .model import (ModelConfig, ModelStatics, load_checkpoint,
                    model_forward_batch, restore_model, save_checkpoint)
from .training import (GRAPH_SPLIT, GRID_SPLIT, Normalizer, SplitSpec,
                       TrainConfig, make_windows, train_loop, trace_csv_lines,
                       evaluate, predict_windows, _window_arrays)

ATTENTION_KINDS = ("ressa", "retsa", "redasa")


def _write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _load_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


def _parse_configs(args) -> tuple[ModelConfig, TrainConfig]:
    raw = _load_json(args.config) if args.config else {}
    model_kv = dict(raw.get("model", {}))
    train_kv = dict(raw.get("train", {}))
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise ConfigError(f"config file has unknown sections: {sorted(unknown)}")
    if args.seed is not None:
        model_kv["seed"] = args.seed
    if getattr(args, "variant", None):
        model_kv["ablation"] = args.variant
    split = train_kv.pop("split", None)
    try:
        cfg = ModelConfig(**model_kv)
        tcfg = TrainConfig(**train_kv)
    except TypeError as exc:
        raise ConfigError(f"bad config file: {exc}") from exc
    if split is not None:
        tcfg.split = SplitSpec(*split)
    return cfg, tcfg


def _split_for(mode: str, tcfg: TrainConfig | None = None) -> SplitSpec:
    if tcfg is not None and tcfg.split is not None:
        return tcfg.split
    return GRID_SPLIT if mode == "grid" else GRAPH_SPLIT


def _mode_for(net, override: str | None) -> str:
    return override or ("grid" if net.layout == "grid" else "graph")


def _restore_for_data(checkpoint_path: str, data_dir: str, mode_flag: str | None):
    """Load a checkpoint plus its dataset, rebuilding normalizer and statics
    the same way training did."""
    ckpt = load_checkpoint(checkpoint_path)
    store, params, extras = restore_model(ckpt)
    net, series = read_bundle(data_dir)
    if series.num_channels != ckpt.channels:
        raise DataError(
            f"checkpoint was trained on {ckpt.channels} channels, "
            f"bundle has {series.num_channels}")
    mode = _mode_for(net, mode_flag)
    split = _split_for(mode)
    train_s, val_s, test_s = split.split(series)
    norm = Normalizer.fit(train_s.values)
    statics = ModelStatics.build(net, train_s, ckpt.config)
    t1, t2 = split.boundaries(series.num_steps)
    return (ckpt, store, params, extras, net, series, mode, norm, statics,
            train_s, val_s, test_s, t2)


def cmd_gen_synthetic(args) -> int:
    spec_kv = _load_json(args.spec) if args.spec else {}
    if args.seed is not None:
        spec_kv["seed"] = args.seed
    try:
        spec = SyntheticSpec(**spec_kv)
    except TypeError as exc:
        raise ConfigError(f"bad synthetic spec: {exc}") from exc
    net, series = gen_synthetic(spec)
    write_bundle(args.out, net, series)
    print(f"wrote bundle with N={net.node_count}, T={series.num_steps} to {args.out}")
    return 0


def _run_training(args) -> int:
    cfg, tcfg = _parse_configs(args)
    net, series = read_bundle(args.data)
    result = train_loop(net, series, cfg, tcfg)
    os.makedirs(args.out, exist_ok=True)

    ckpt_path = os.path.join(args.out, "checkpoint.ckpt")
    final_values = result.store.values_dict()
    result.store.load_values(result.best_values)
    save_checkpoint(ckpt_path, result.store, cfg, series.num_channels,
                    extras=result.adam.to_arrays())
    result.store.load_values(final_values)
    _write_text(os.path.join(args.out, "trace.csv"),
                "\n".join(trace_csv_lines(result.trace)) + "\n")
    r = result.test_report
    print(f"steps={result.steps_done} best_val_mae={result.best_val_mae:.6f} "
          f"test_mae={r.mae:.6f} test_mape={r.mape:.6f} test_rmse={r.rmse:.6f}")
    return 0


def cmd_train(args) -> int:
    return _run_training(args)


def cmd_ablate(args) -> int:
    return _run_training(args)


def cmd_eval(args) -> int:
    (ckpt, _store, params, _extras, _net, series, mode, norm, statics,
     _train_s, _val_s, test_s, t2) = _restore_for_data(
        args.checkpoint, args.data, args.mode)
    cfg = ckpt.config

    def norm_series(s):
        from .series import TrafficTensor
        return TrafficTensor(norm.apply(s.values), s.interval_minutes,
                             s.start_timestamp)

    windows = make_windows(norm_series(test_s), cfg.input_len, cfg.horizon)
    x, _, wk, dy = _window_arrays(windows, series, t2)
    raw = make_windows(test_s, cfg.input_len, cfg.horizon)
    y_raw = np.stack([w.target for w in raw])
    preds = norm.invert(predict_windows(x, wk, dy, statics, cfg, params))
    report = evaluate(preds, y_raw, mode)
    csv = ("mae,mape,rmse,count\n"
           f"{report.mae!r},{report.mape!r},{report.rmse!r},{report.count}\n")
    if args.out:
        _write_text(args.out, csv)
    sys.stdout.write(csv)
    return 0


def _write_pgm(path: str, matrix: np.ndarray) -> None:
    """8-bit ASCII PGM, linearly scaled from [0, max score]."""
    peak = float(matrix.max())
    pixels = np.zeros_like(matrix, dtype=np.int64) if peak <= 0 else \
        np.rint(matrix / peak * 255.0).astype(np.int64)
    h, w = matrix.shape
    lines = [f"P2", f"{w} {h}", "255"]
    lines += [" ".join(str(int(v)) for v in row) for row in pixels]
    _write_text(path, "\n".join(lines) + "\n")


def cmd_dump_attention(args) -> int:
    if args.kind not in ATTENTION_KINDS:
        raise ConfigError(f"kind must be one of {ATTENTION_KINDS}")
    (ckpt, _store, params, _extras, _net, series, mode, norm, statics,
     _train_s, _val_s, test_s, t2) = _restore_for_data(
        args.checkpoint, args.data, args.mode)
    cfg = ckpt.config

    from .series import TrafficTensor
    normalized = TrafficTensor(norm.apply(test_s.values),
                               test_s.interval_minutes, test_s.start_timestamp)
    windows = make_windows(normalized, cfg.input_len, cfg.horizon)
    x, _, wk, dy = _window_arrays(windows[:1], series, t2)
    capture: dict = {}
    model_forward_batch(x, wk, dy, statics, cfg, params, capture=capture)

    key = (args.layer, args.kind, args.stage, args.head)
    if key not in capture:
        available = sorted(capture)
        raise DataError(
            f"no attention map for layer={args.layer} kind={args.kind} "
            f"stage={args.stage} head={args.head}; available: {available}")
    matrix = capture[key][0]

    os.makedirs(args.out, exist_ok=True)
    stem = f"attention_L{args.layer}_{args.kind}_S{args.stage}_H{args.head}"
    csv_lines = [",".join(repr(float(v)) for v in row) for row in matrix]
    _write_text(os.path.join(args.out, stem + ".csv"), "\n".join(csv_lines) + "\n")
    _write_pgm(os.path.join(args.out, stem + ".pgm"), matrix)
    print(f"wrote {stem}.csv and {stem}.pgm ({matrix.shape[0]}x{matrix.shape[1]})")
    return 0


def cmd_export_series(args) -> int:
    (ckpt, _store, params, _extras, _net, series, mode, norm, statics,
     _train_s, _val_s, test_s, t2) = _restore_for_data(
        args.checkpoint, args.data, args.mode)
    cfg = ckpt.config
    if not 0 <= args.node < series.num_nodes:
        raise DataError(f"node {args.node} outside 0..{series.num_nodes - 1}")

    from .series import TrafficTensor
    normalized = TrafficTensor(norm.apply(test_s.values),
                               test_s.interval_minutes, test_s.start_timestamp)
    # Non-overlapping horizons give one prediction per covered test step.
    windows = make_windows(normalized, cfg.input_len, cfg.horizon,
                           stride=cfg.horizon)
    x, _, wk, dy = _window_arrays(windows, series, t2)
    preds = norm.invert(predict_windows(x, wk, dy, statics, cfg, params))

    c = series.num_channels
    header = "step," + ",".join(f"truth_c{i},pred_c{i}" for i in range(c))
    lines = [header]
    for w_idx, w in enumerate(windows):
        for j in range(cfg.horizon):
            step = t2 + w.start_step + cfg.input_len + j
            cells = []
            for ch in range(c):
                truth = series.values[step, args.node, ch]
                cells.append(f"{truth!r},{preds[w_idx, j, args.node, ch]!r}")
            lines.append(f"{step}," + ",".join(cells))
    _write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {len(lines) - 1} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossflow",
        description="Criss-crossed rectified-attention traffic forecasting.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_seed(p):
        p.add_argument("--seed", type=int, default=None,
                       help="override the configured seed")

    p = sub.add_parser("gen-synthetic", help="generate a synthetic bundle")
    p.add_argument("--spec", help="JSON file with synthetic-spec fields")
    p.add_argument("--out", required=True, help="bundle directory to write")
    add_seed(p)
    p.set_defaults(func=cmd_gen_synthetic)

    for name, func in (("train", cmd_train), ("ablate", cmd_ablate)):
        p = sub.add_parser(name, help=f"{name} a model on a bundle")
        p.add_argument("--data", required=True, help="bundle directory")
        p.add_argument("--config", help="JSON with 'model' and 'train' sections")
        p.add_argument("--out", required=True, help="output directory")
        if name == "ablate":
            p.add_argument("--variant", required=True,
                           choices=("no_relsa", "no_encov", "no_ccds"))
        add_seed(p)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("graph", "grid"), default=None)
    p.add_argument("--out", help="also write the metrics CSV here")
    add_seed(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-attention",
                       help="export one attention map as CSV + PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--stage", type=int, required=True, choices=(1, 2),
                   help="1 = first attention of a stream; 2 = the crossed stage")
    p.add_argument("--head", type=int, required=True)
    p.add_argument("--kind", required=True, choices=ATTENTION_KINDS,
                   help="matrix type: ressa/redasa are node x node, retsa is "
                        "time x time")
    p.add_argument("--mode", choices=("graph", "grid"), default=None)
    p.add_argument("--out", required=True)
    add_seed(p)
    p.set_defaults(func=cmd_dump_attention)

    p = sub.add_parser("export-series",
                       help="prediction vs truth CSV for one node")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--node", type=int, required=True)
    p.add_argument("--mode", choices=("graph", "grid"), default=None)
    p.add_argument("--out", required=True)
    add_seed(p)
    p.set_defaults(func=cmd_export_series)
    return parser


def cli_dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except (DataError, FormatError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except CrossflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
