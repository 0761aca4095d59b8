"""Command line entry point: ``dyadimp {gen,prep,train,eval,ablate,gradcheck}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .dyadgen import GenConfig, ParseError, generate_session, read_session, write_session, write_sidecar
from .model import Ablation, ConfigError, ModelConfig, init_params, load_checkpoint, save_checkpoint
from .signalprep import (ALLOWED, RawStream, ResampleError, SchemaError, SessionBundle, align_to_labels,
                         check_totals, column_stats, normalize, window_count, zscore)
from .trainer import (DEFAULT_ABLATION, DivergenceError, TrainConfig, build_windows, compute_losses,
                      evaluate, run_ablation, split_by_session, split_indices, train, write_ablation_csv,
                      zero_modalities)

log = logging.getLogger("dyadimp")

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------- gen / prep

def cmd_gen(args) -> int:
    try:
        cfg = GenConfig(seed=args.seed, num_sessions=args.sessions, timeline_length=args.timeline,
                        relatedness=args.relatedness, receiver_lag=args.lag, noise_std=args.noise_std,
                        label_step_prob=args.label_step_prob, label_step_scale=args.label_step_scale)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(cfg.num_sessions):
        b = generate_session(cfg, i)
        write_session(out / f"{b.session_id}.session", b)
        write_sidecar(out / f"{b.session_id}.json", b)
    (out / "manifest.json").write_text(json.dumps({"generator": asdict(cfg), "sessions": cfg.num_sessions},
                                                  indent=1))
    print(f"wrote {cfg.num_sessions} sessions to {out}")
    return 0


def _read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] != len(header):
        raise DataError(f"{path}: expected rows of {len(header)} values")
    return header, data


def load_raw_session(session_dir: Path) -> SessionBundle:
    """Read ``<source>_<modality>.csv`` streams plus ``labels.csv`` and align them."""
    names, labels = _read_csv(session_dir / "labels.csv")
    if names[:2] != ["competence", "warmth"]:
        raise DataError(f"{session_dir}/labels.csv: header must be competence,warmth")
    T = labels.shape[0]
    mats = {}
    for source, modalities in ALLOWED.items():
        streams = []
        for modality in modalities:
            path = session_dir / f"{source}_{modality}.csv"
            if path.exists():
                header, data = _read_csv(path)
                streams.append(RawStream(source, modality, header, data))
        if not streams:
            raise DataError(f"{session_dir}: no {source} streams")
        mats[source] = align_to_labels(streams, T)
    bundle = SessionBundle(session_dir.name, mats["emitter"], mats["receiver"], labels[:, :2])
    check_totals(bundle)
    return bundle


def cmd_prep(args) -> int:
    src, out = Path(args.input_dir), Path(args.output_dir)
    dirs = sorted(p for p in src.iterdir() if p.is_dir())
    if not dirs:
        raise DataError(f"{src}: no session directories")
    bundles = [load_raw_session(d) for d in dirs]
    if args.normalize == "on":
        stats = {
            "emitter": column_stats(np.concatenate([b.emitter.features for b in bundles])),
            "receiver": column_stats(np.concatenate([b.receiver.features for b in bundles])),
        }
        bundles = [normalize(b, stats) for b in bundles]
    out.mkdir(parents=True, exist_ok=True)
    total = 0
    for b in bundles:
        if b.T < args.window_width:
            raise DataError(f"session {b.session_id}: {b.T} labels < window width {args.window_width}")
        total += window_count(b.T, args.window_width, args.stride)
        write_session(out / f"{b.session_id}.session", b)
        write_sidecar(out / f"{b.session_id}.json", b)
    (out / "manifest.json").write_text(json.dumps(
        {"sessions": len(bundles), "window_width": args.window_width, "stride": args.stride,
         "normalize": args.normalize}, indent=1))
    print(f"prepared {len(bundles)} sessions, {total} windows, into {out}")
    return 0


# ---------------------------------------------------------------- configs

def load_configs(args) -> tuple[TrainConfig, ModelConfig]:
    tdict, mdict = {}, {}
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text())
        unknown = set(raw) - {"train", "model"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        tdict, mdict = raw.get("train", {}), raw.get("model", {})
    manifest = Path(args.data_dir) / "manifest.json"
    if manifest.exists():
        m = json.loads(manifest.read_text())
        for key in ("window_width", "stride"):
            if key in m:
                tdict.setdefault(key, m[key])
    tcfg = TrainConfig.from_dict(tdict)
    mcfg = ModelConfig.from_dict(mdict)
    over = {}
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("lr", "lr0"), ("batch_size", "batch_size")):
        if getattr(args, flag, None) is not None:
            over[key] = getattr(args, flag)
    if getattr(args, "no_kd", False):
        over["kd_on"] = False
    if getattr(args, "no_se", False):
        over["se_on"] = False
    if getattr(args, "split_by_session", False):
        over["split_by_session"] = True
    tcfg = replace(tcfg, **over)
    if getattr(args, "no_inter", False) or getattr(args, "no_intra", False):
        mcfg = replace(mcfg, ablation=Ablation(use_inter=not args.no_inter, use_intra=not args.no_intra))
    if getattr(args, "seed", None) is not None:
        mcfg = replace(mcfg, seed=args.seed)
    return tcfg, mcfg


def load_sessions(data_dir) -> list[SessionBundle]:
    files = sorted(Path(data_dir).glob("*.session"))
    if not files:
        raise DataError(f"{data_dir}: no .session files")
    return [read_session(f) for f in files]


def plot_losses(report, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    ep = report.column("epoch")
    ax.plot(ep, report.column("kd"), label="KD")
    ax.plot(ep, report.column("se"), label="SE")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# ---------------------------------------------------------------- train / eval

def cmd_train(args) -> int:
    tcfg, mcfg = load_configs(args)
    ws = build_windows(load_sessions(args.data_dir), tcfg.window_width, tcfg.stride)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = train(tcfg, mcfg, ws)
    except DivergenceError as exc:
        if exc.report is not None:
            exc.report.write_csv(out / "report.csv")
        raise
    rep = result.report
    rep.write_csv(out / "report.csv")
    save_checkpoint(out / "checkpoint.bin", result.params, mcfg,
                    {"train_config": tcfg.to_dict(), "normalization_stats": result.normalization_stats,
                     "best_epoch": rep.best_epoch})
    (out / "summary.json").write_text(json.dumps(rep.summary(), indent=1))
    if args.plot:
        plot_losses(rep, out / "losses.svg")
    c, w = rep.test_ccc
    print(f"best epoch {rep.best_epoch}: test CCC competence {c:.4f} warmth {w:.4f}")
    return 0


def cmd_eval(args) -> int:
    params, mcfg, extra = load_checkpoint(args.checkpoint)
    tcfg = TrainConfig.from_dict(extra.get("train_config", {}))
    ws = build_windows(load_sessions(args.data_dir), tcfg.window_width, tcfg.stride)
    if args.split != "all":
        idx = (split_by_session(ws, tcfg.seed, tcfg.split) if tcfg.split_by_session
               else split_indices(len(ws), tcfg.seed, tcfg.split))
        ws = ws.take(idx[("train", "val", "test").index(args.split)])
    stats = extra.get("normalization_stats")
    if stats:
        ws = replace(ws, e=zscore(ws.e, stats["emitter"]), r=zscore(ws.r, stats["receiver"]))
    ws = zero_modalities(ws, tcfg.zero_modalities)
    c, w = evaluate(params, mcfg, ws)
    print(json.dumps({"split": args.split, "windows": len(ws), "ccc_competence": c, "ccc_warmth": w}))
    return 0


def cmd_ablate(args) -> int:
    tcfg, mcfg = load_configs(args)
    ws = build_windows(load_sessions(args.data_dir), tcfg.window_width, tcfg.stride)
    runs = DEFAULT_ABLATION if not args.runs else tuple(r.strip() for r in args.runs.split(","))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def keep(name, result):
        d = out / name
        d.mkdir(exist_ok=True)
        result.report.write_csv(d / "report.csv")
        (d / "summary.json").write_text(json.dumps(result.report.summary(), indent=1))
        print(f"{name}: test CCC {result.report.test_ccc[0]:.4f} / {result.report.test_ccc[1]:.4f}")

    rows, _ = run_ablation(runs, tcfg, mcfg, ws, on_run=keep)
    write_ablation_csv(out / "ablation.csv", rows)
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def gradcheck_model(seed: int = 0, max_coords: int | None = None, width: int = 5, batch: int = 2) -> float:
    """Relative gradient error of the summed objective on the tiny configuration
    (d_model 8, d_lstm 4, 16 heads of width 1), dropout off."""
    mcfg = ModelConfig(d_model=8, d_lstm=4, d_attn=16, n_heads=16, dropout_rate=0.0, seed=seed)
    tcfg = TrainConfig()
    rng = np.random.default_rng(seed)
    # matrices scaled x3 so attention scores are O(1): with near-uniform softmax
    # the key gradients fall below the finite-difference noise floor
    params = {k: (3.0 * v if v.ndim == 2 else rng.normal(scale=0.3, size=v.shape))
              for k, v in init_params(mcfg, seed).items()}
    names = list(params)
    e = rng.normal(size=(batch, width, mcfg.emitter_dim))
    r = rng.normal(size=(batch, width, mcfg.receiver_dim))
    y = rng.normal(size=(batch, 2))
    f = lambda ts: compute_losses(dict(zip(names, ts)), mcfg, tcfg, e, r, y, "eval")[0]
    return dc.grad_check(f, [params[n] for n in names], max_coords=max_coords, rng=rng)


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for s in range(args.seeds):
        err = gradcheck_model(seed=args.seed + s, max_coords=args.max_coords)
        print(f"seed {args.seed + s}: max relative error {err:.3e}")
        worst = max(worst, err)
    ok = worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst:.3e} (tolerance {args.tol:g})")
    return 0 if ok else EXIT_DIVERGED


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dyadimp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write synthetic sessions")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--sessions", type=int, default=8)
    g.add_argument("--timeline", type=int, default=2000)
    g.add_argument("--relatedness", type=float, default=0.8)
    g.add_argument("--lag", type=int, default=0)
    g.add_argument("--noise-std", type=float, default=1.0)
    g.add_argument("--label-step-prob", type=float, default=0.02)
    g.add_argument("--label-step-scale", type=float, default=1.0)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_gen)

    pr = sub.add_parser("prep", help="align raw CSV streams to the label timeline")
    pr.add_argument("--input-dir", required=True)
    pr.add_argument("--output-dir", required=True)
    pr.add_argument("--normalize", choices=("on", "off"), default="off")
    pr.add_argument("--window-width", type=int, default=20)
    pr.add_argument("--stride", type=int, default=10)
    pr.set_defaults(func=cmd_prep)

    def train_flags(sp):
        sp.add_argument("--data-dir", required=True)
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--split-by-session", action="store_true")
        sp.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one model")
    train_flags(t)
    for flag in ("--no-kd", "--no-se", "--no-inter", "--no-intra"):
        t.add_argument(flag, action="store_true")
    t.add_argument("--plot", action="store_true", help="also write losses.svg")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-dir", required=True)
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the ablation campaign")
    train_flags(a)
    a.add_argument("--runs", help=f"comma-separated subset of: {','.join(DEFAULT_ABLATION)}")
    a.set_defaults(func=cmd_ablate)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--seeds", type=int, default=1)
    gc.add_argument("--max-coords", type=int, default=None)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SchemaError, ResampleError, ParseError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
