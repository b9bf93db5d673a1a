"""Command-line entry point: ``dsrnowcast <subcommand> [flags]``.

Every subcommand first prints one ``config`` line holding all resolved
settings as JSON, so a run can be repeated from its log.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time

import numpy as np

from . import baseline, gridio, network, train
from .eval import (EvalReport, compare_reports, format_comparison, format_table, read_sites,
                   site_eval, stratified_rmse, validate_report_dict)

CELL_ALIASES = {"convlstm": "convlstm", "peephole": "convlstm_peephole", "convgru": "convgru"}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


def _ints(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _frame_range(text):
    lo, sep, hi = text.partition(":")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected START:END, got {text!r}")
    try:
        return (int(lo) if lo else None, int(hi) if hi else None)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integer START:END, got {text!r}") from None


def _print_config(name, args, **extra):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg.update(extra)
    cfg["threads"] = os.environ.get("NOWCAST_THREADS")
    print(f"config {name} " + json.dumps(cfg, sort_keys=True, default=_jsonable), flush=True)


def _jsonable(v):
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    if isinstance(v, tuple):
        return list(v)
    return str(v)


def _require(path):
    if not os.path.exists(path):
        raise CliError(f"file not found: {path}")
    return path


def _load_sequence(path, frames=None):
    seq = gridio.read_sequence(_require(path))
    if frames is not None:
        sel = seq.frames[slice(*frames)]
        if not sel:
            raise CliError(f"frame range {frames[0]}:{frames[1]} selects nothing from {len(seq)} frames")
        seq = gridio.GridSequence(sel, seq.cadence_seconds)
    return seq


def _load_any_model(path, shape=None):
    with open(_require(path), "rb") as fh:
        magic = fh.read(4)
    if magic == baseline.CHECKPOINT_MAGIC:
        return baseline.load_linear(path)
    return network.load_model(path, expected_shape=shape)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    params = gridio.SyntheticParams(
        rows=args.rows, cols=args.cols, hours=args.hours, start=args.start, n_clouds=args.clouds,
        velocity=args.velocity, peak=args.peak, dsr_max=args.dsr_max, extent=args.extent,
    )
    _print_config("generate", args)
    seq = gridio.generate_synthetic(params, seed=args.seed)
    n = gridio.write_sequence(seq, args.out)
    print(f"wrote {len(seq)} frames ({n} bytes) to {args.out}")


def cmd_import(args):
    _print_config("import", args)
    seq = gridio.read_csv(_require(args.csv), args.rows, args.cols, args.extent)
    n = gridio.write_sequence(seq, args.out)
    print(f"wrote {len(seq)} frames {seq.shape[0]}x{seq.shape[1]} ({n} bytes) to {args.out}")


def cmd_train(args):
    seq = _load_sequence(args.data, args.frames)
    spec = gridio.NormalizationSpec(args.dsr_max)
    if args.cell == "linear":
        _print_config("train", args, grid=list(seq.shape))
        X, y, _ = baseline.extract_patch_samples(seq, args.region, args.patch_size, args.max_samples,
                                                 args.seed, lead=args.horizon)
        model = baseline.fit_linear(X, y, args.ridge, args.patch_size, spec, horizon=args.horizon)
        n = baseline.save_linear(model, args.out)
        print(f"fitted linear baseline on {len(y)} samples; wrote {n} bytes to {args.out}")
        return
    cfg = train.TrainConfig.from_file(args.config) if args.config else train.TrainConfig()
    overrides = {k: getattr(args, k) for k in ("learning_rate", "batch_size", "max_epochs", "seed",
                                               "patience", "validation_fraction", "optimizer")
                 if getattr(args, k) is not None}
    cfg = train.TrainConfig(**{**cfg.__dict__, **overrides})
    net = network.NetworkConfig(
        seq.shape[0], seq.shape[1], args.horizon, args.channels, (args.kernel, args.kernel),
        CELL_ALIASES[args.cell], args.activation, input_channels=1 if args.no_time_features else 37,
    )
    _print_config("train", args, network=net.__dict__, training=cfg.__dict__)
    windows = gridio.build_windows(seq)
    if len(windows) < 2:
        raise CliError(f"{args.data}: need at least 2 six-hour windows for training, found {len(windows)}")
    model = network.NowcastModel.initialize(net, seed=cfg.seed, normalization=spec)
    t0 = time.time()
    result = train.train_model(
        model, windows, cfg,
        callback=lambda e, a, b: print(f"epoch {e:3d}  train {a:.6f}  val {b:.6f}  {time.time() - t0:7.1f}s",
                                       flush=True),
    )
    if args.history:
        train.write_history_csv(result.history, args.history)
    n = network.save_model(result.model, args.out)
    print(f"best epoch {result.best_epoch}; wrote {n} bytes to {args.out}")


def cmd_predict(args):
    seq = _load_sequence(args.data)
    models = [_load_any_model(p, seq.shape) for p in args.checkpoint]
    if any(isinstance(m, baseline.LinearPixelModel) for m in models):
        raise CliError("predict needs network checkpoints; linear baselines are evaluated with 'eval'")
    t = len(seq) - 1 if args.index is None else args.index
    _print_config("predict", args, index=t)
    if not 2 <= t < len(seq):
        raise CliError(f"--index {t} needs two prior frames within the {len(seq)}-frame sequence")
    frames = seq.frames[t - 2:t + 1]
    if np.any(np.diff([f.timestamp for f in frames]) != gridio.HOUR):
        raise CliError(f"frames {t - 2}..{t} are not consecutive hours")
    preds = network.predict_window(models, frames)
    n = gridio.write_sequence(gridio.GridSequence(tuple(preds)), args.out)
    print(f"wrote 3 forecast frames ({n} bytes) to {args.out}")
    if args.pgm:
        for h, f in enumerate(preds, 1):
            path = f"{args.pgm}_h{h}.pgm"
            gridio.write_pgm(f, path, models[0].normalization.dsr_max)
            print(f"wrote preview {path}")


def _forecast(model, seq, windows, times):
    """Predictions and truths (n, rows, cols) for the usable windows."""
    if isinstance(model, baseline.LinearPixelModel):
        h = model.horizon
        pred = np.stack([baseline.predict_linear(model, seq, None, t).values for t in times])
        truth = np.stack([seq[t + h].values for t in times])
        return h, pred, truth
    h = model.config.horizon
    pred = network.predict_windows(model, windows)
    truth = np.stack([w.targets[h - 1].values for w in windows])
    return h, pred, truth


def cmd_eval(args):
    seq = _load_sequence(args.data, args.frames)
    _print_config("eval", args, grid=list(seq.shape))
    windows = gridio.build_windows(seq)
    if not windows:
        raise CliError(f"{args.data}: no complete six-hour window to evaluate")
    index = {f.timestamp: i for i, f in enumerate(seq)}
    times = [index[w.timestamp] for w in windows]
    entries = []
    for path in args.checkpoint:
        m = _load_any_model(path, seq.shape)
        h, pred, truth = _forecast(m, seq, windows, times)
        entries.append((os.path.basename(path), h, pred, truth))
    if args.persistence:
        for h in (1, 2, 3):
            pred = np.stack([w.inputs[-1].values for w in windows])
            truth = np.stack([w.targets[h - 1].values for w in windows])
            entries.append(("persistence", h, pred, truth))
    if not entries:
        raise CliError("nothing to evaluate: pass --checkpoint and/or --persistence")
    sites = None
    if args.sites:
        window = dict(start_hour=args.hours[0], end_hour=args.hours[1], utc_offset=args.utc_offset)
        sites = read_sites(_require(args.sites), seq.extent, seq.shape, **window)
    mask = None
    if args.region:
        r0, r1, c0, c1 = args.region
        mask = np.zeros(seq.shape, dtype=bool)
        mask[r0:r1, c0:c1] = True
    reports = []
    for name, h, pred, truth in entries:
        meta = {"model": name, "data": os.path.basename(args.data),
                "start": int(windows[0].timestamp), "end": int(windows[-1].timestamp), "windows": len(windows)}
        if sites is not None:
            valid_t = [w.timestamp + h * gridio.HOUR for w in windows]
            pf = [gridio.GridFrame(t, p, seq.extent) for t, p in zip(valid_t, pred)]
            tf = [gridio.GridFrame(t, v, seq.extent) for t, v in zip(valid_t, truth)]
            reports.append(site_eval(pf, tf, sites, horizon=h, meta=meta))
        else:
            reports.append(stratified_rmse(pred, truth, horizon=h, mask=mask,
                                           daylight_only=args.daylight_only, meta=meta))
    print(format_table(reports))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump([r.to_dict() for r in reports], fh, indent=2)
        print(f"wrote {args.json}")


def _load_reports(path):
    with open(_require(path)) as fh:
        data = json.load(fh)
    items = data if isinstance(data, list) else [data]
    for d in items:
        validate_report_dict(d)
    return [EvalReport.from_dict(d) for d in items]


def cmd_compare(args):
    _print_config("compare", args)
    a, b = _load_reports(args.a), _load_reports(args.b)
    by_h = {r.horizon: r for r in b}
    done = False
    out = []
    for ra in a:
        rb = by_h.get(ra.horizon)
        if rb is None:
            continue
        deltas = compare_reports(ra, rb)
        print(f"horizon t+{ra.horizon}: {ra.meta.get('model', args.a)} -> {rb.meta.get('model', args.b)} "
              "(positive = second has lower RMSE)")
        print(format_comparison(deltas))
        out.append({"horizon": ra.horizon, "delta_percent": {k: (None if math.isnan(v) else v)
                                                             for k, v in deltas.items()}})
        done = True
    if not done:
        raise CliError("the two reports share no horizon")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(out, fh, indent=2)


def cmd_serve(args):
    from .serve import ForecastService, make_server

    _print_config("serve", args)
    models = [network.load_model(_require(p)) for p in args.checkpoint]
    service = ForecastService(models, snapshot_path=args.snapshot)
    server = make_server(service, args.host, args.port)
    print(f"serving on http://{server.server_address[0]}:{server.server_address[1]} "
          f"({service.health()['status']})", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dsrnowcast", description="Gridded solar-irradiance nowcasting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("generate", help="write a synthetic cloud-advection sequence")
    g.add_argument("--out", required=True)
    g.add_argument("--rows", type=int, default=64)
    g.add_argument("--cols", type=int, default=64)
    g.add_argument("--hours", type=int, default=48)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--start", type=int, default=gridio.SyntheticParams.start, help="UTC epoch of frame 0")
    g.add_argument("--clouds", type=int, default=gridio.SyntheticParams.n_clouds)
    g.add_argument("--velocity", type=_floats, default=(0.0, 1.0), help="d_row,d_col in pixels/hour")
    g.add_argument("--peak", type=float, default=1000.0)
    g.add_argument("--dsr-max", type=float, default=1200.0)
    g.add_argument("--extent", type=_floats, default=gridio.SyntheticParams.extent,
                   help="lat_min,lat_max,lon_min,lon_max")
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("import", help="convert timestamp,row,col,value CSV to DSRG")
    i.add_argument("--csv", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--rows", type=int)
    i.add_argument("--cols", type=int)
    i.add_argument("--extent", type=_floats, default=gridio.DEFAULT_EXTENT)
    i.set_defaults(func=cmd_import)

    t = sub.add_parser("train", help="train one horizon model (or fit the linear baseline)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--horizon", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--cell", choices=tuple(CELL_ALIASES) + ("linear",), default="convlstm")
    t.add_argument("--frames", type=_frame_range, help="START:END slice of frames to use")
    t.add_argument("--channels", type=_ints, default=(128, 128, 64), help="hidden channels per layer")
    t.add_argument("--kernel", type=int, default=5)
    t.add_argument("--activation", choices=("relu", "tanh"), default="relu")
    t.add_argument("--no-time-features", action="store_true", help="feed only the DSR channel")
    t.add_argument("--dsr-max", type=float, default=1200.0)
    t.add_argument("--config", help="key = value file of training settings")
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--validation-fraction", type=float)
    t.add_argument("--optimizer", choices=("adam", "sgd"))
    t.add_argument("--history", help="write per-epoch losses as CSV")
    t.add_argument("--region", type=_ints, help="linear: row0,row1,col0,col1 training region")
    t.add_argument("--patch-size", type=int, default=40)
    t.add_argument("--ridge", type=float, default=1e-3)
    t.add_argument("--max-samples", type=int, default=200_000)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="forecast t+1..t+3 from the last three frames")
    pr.add_argument("--data", required=True)
    pr.add_argument("--checkpoint", action="append", default=[], help="one per horizon")
    pr.add_argument("--out", required=True)
    pr.add_argument("--index", type=int, help="frame index t (default: last)")
    pr.add_argument("--pgm", help="write PREFIX_h{1,2,3}.pgm previews")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="stratified RMSE report")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", action="append", default=[])
    e.add_argument("--persistence", action="store_true", help="also score persistence")
    e.add_argument("--frames", type=_frame_range)
    e.add_argument("--region", type=_ints, help="row0,row1,col0,col1 evaluation region")
    e.add_argument("--daylight-only", action="store_true", help="drop pixels whose truth is 0")
    e.add_argument("--sites", help="CSV of name,lat,lon for site evaluation")
    e.add_argument("--hours", type=_ints, default=(10, 15), help="local window START,END (inclusive)")
    e.add_argument("--utc-offset", type=float, default=-8.0)
    e.add_argument("--json")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="relative RMSE change between two reports")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--json")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("serve", help="HTTP forecast service")
    s.add_argument("--checkpoint", action="append", default=[], help="one per horizon")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8080)
    s.add_argument("--snapshot", help="persist and reload the latest forecasts here")
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        threads = os.environ.get("NOWCAST_THREADS")
        if threads is not None and not (threads.isdigit() and int(threads) > 0):
            raise CliError(f"NOWCAST_THREADS must be a positive integer, got {threads!r}")
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(message)s")
        args.func(args)
        return 0
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, FloatingPointError, np.linalg.LinAlgError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
