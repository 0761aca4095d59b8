"""Training, evaluation and ablation campaigns."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Sequence

import numpy as np

from . import diffcore as dc
from .losses import ccc, regularizers, task_loss, total_loss
from .model import Ablation, ConfigError, ModelConfig, forward, init_params, predict
from .signalprep import SessionBundle, column_stats, window_arrays, zscore

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("epoch", "lr", "task", "kd", "se", "total",
                  "ccc_c_train", "ccc_w_train", "ccc_c_val", "ccc_w_val")


class DivergenceError(RuntimeError):
    def __init__(self, message: str, report: "RunReport | None" = None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    halve_every: int = 20
    epochs: int = 40
    batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    kd_on: bool = True
    se_on: bool = True
    window_width: int = 20
    stride: int = 10
    normalize: bool = True
    split_by_session: bool = False
    per_timestep_losses: bool = False
    swap_losses: bool = False
    zero_modalities: tuple = ()  # ((source, modality), ...)

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-9 or len(self.split) != 3:
            raise ConfigError(f"split fractions must be three values summing to 1, got {self.split}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.halve_every < 1:
            raise ConfigError("halve_every must be >= 1")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        d["zero_modalities"] = [list(p) for p in self.zero_modalities]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "split" in d:
            d["split"] = tuple(d["split"])
        if "zero_modalities" in d:
            d["zero_modalities"] = tuple(tuple(p) for p in d["zero_modalities"])
        return cls(**d)


def lr_schedule(epoch: int, lr0: float = 1e-3, halve_every: int = 20) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * 0.5 ** (epoch // halve_every)


class Adam:
    """Adam with bias-corrected moments, no weight decay."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in parameter group {name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------- data

@dataclass
class WindowSet:
    e: np.ndarray  # (N, W, 412)
    r: np.ndarray  # (N, W, 68)
    y: np.ndarray  # (N, 2)
    session: np.ndarray  # (N,) session index
    blocks: Dict[str, Dict[str, tuple[int, int]]] = field(default_factory=dict)

    def __len__(self):
        return len(self.y)

    def take(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowSet(self.e[idx], self.r[idx], self.y[idx], self.session[idx], self.blocks)


def build_windows(bundles: Sequence[SessionBundle], width: int = 20, stride: int = 10) -> WindowSet:
    if not bundles:
        raise ValueError("no sessions")
    es, rs, ys, ss = [], [], [], []
    for i, b in enumerate(bundles):
        e, r, y = window_arrays(b, width, stride)
        es.append(e), rs.append(r), ys.append(y), ss.append(np.full(len(y), i))
    blocks = {"emitter": dict(bundles[0].emitter.blocks), "receiver": dict(bundles[0].receiver.blocks)}
    return WindowSet(np.concatenate(es), np.concatenate(rs), np.concatenate(ys), np.concatenate(ss), blocks)


def split_counts(n: int, fractions=(0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    n_train = int(math.floor(n * fractions[0] + 1e-9))
    n_val = int(math.floor(n * fractions[1] + 1e-9))
    return n_train, n_val, n - n_train - n_val


def split_indices(n: int, seed: int, fractions=(0.8, 0.1, 0.1)):
    if n < 10:
        raise ValueError(f"need at least 10 windows to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    a, b, _ = split_counts(n, fractions)
    return perm[:a], perm[a:a + b], perm[a + b:]


def split_data(windows: Sequence, seed: int, fractions=(0.8, 0.1, 0.1)):
    """Seeded shuffle of all windows, then contiguous train/val/test partition."""
    tr, va, te = split_indices(len(windows), seed, fractions)
    pick = lambda idx: [windows[i] for i in idx]
    return pick(tr), pick(va), pick(te)


def split_by_session(ws: WindowSet, seed: int, fractions=(0.8, 0.1, 0.1)):
    sessions = np.unique(ws.session)
    if len(sessions) < 3:
        raise ValueError("session-level split needs at least 3 sessions")
    perm = np.random.default_rng(seed).permutation(sessions)
    n = len(sessions)
    a, b, _ = split_counts(n, fractions)
    b = max(b, 1)
    a = n - b - max(n - a - b, 1)  # every group keeps at least one session
    groups = perm[:a], perm[a:a + b], perm[a + b:]
    return tuple(np.flatnonzero(np.isin(ws.session, g)) for g in groups)


def zero_modalities(ws: WindowSet, pairs) -> WindowSet:
    """Zero the columns of each ``(source, modality)``; input width is unchanged."""
    if not pairs:
        return ws
    e, r = ws.e.copy(), ws.r.copy()
    for source, modality in pairs:
        blocks = ws.blocks.get(source, {})
        if modality not in blocks:
            raise ConfigError(f"no {modality!r} columns for the {source}")
        a, b = blocks[modality]
        (e if source == "emitter" else r)[..., a:b] = 0.0
    return replace(ws, e=e, r=r)


# ---------------------------------------------------------------- training

@dataclass
class RunReport:
    rows: List[dict] = field(default_factory=list)
    best_epoch: int = -1
    test_ccc: tuple[float, float] = (float("nan"), float("nan"))
    test_ccc_last: tuple[float, float] = (float("nan"), float("nan"))
    baseline_val_ccc: tuple[float, float] = (float("nan"), float("nan"))
    config: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def column(self, name: str) -> list:
        return [row[name] for row in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in REPORT_COLUMNS})

    def summary(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "test_ccc_competence": self.test_ccc[0],
            "test_ccc_warmth": self.test_ccc[1],
            "test_ccc_last_competence": self.test_ccc_last[0],
            "test_ccc_last_warmth": self.test_ccc_last[1],
            "baseline_val_ccc": list(self.baseline_val_ccc),
            "wall_time": self.wall_time,
            "config": self.config,
        }


@dataclass
class TrainResult:
    params: Dict[str, np.ndarray]
    last_params: Dict[str, np.ndarray]
    model_config: ModelConfig
    report: RunReport
    splits: Dict[str, WindowSet]
    normalization_stats: dict | None


def compute_losses(params, mcfg: ModelConfig, tcfg: TrainConfig, e, r, y, mode="train", rng=None):
    """One forward pass plus loss graph. ``params`` may hold tape variables."""
    cache = forward(e, r, params, mcfg, mode, rng)
    task = task_loss(cache.C_p, cache.W_p, y[:, 0], y[:, 1])
    kd, se = regularizers(cache, tcfg.per_timestep_losses, tcfg.swap_losses)
    total, breakdown = total_loss(task, kd, se, tcfg.kd_on, tcfg.se_on)
    return total, breakdown, cache


def gradients(params, mcfg: ModelConfig, tcfg: TrainConfig, e, r, y, mode="train", rng=None):
    tape = dc.Tape()
    leaves = {k: tape.variable(v, k) for k, v in params.items()}
    total, breakdown, _ = compute_losses(leaves, mcfg, tcfg, e, r, y, mode, rng)
    dc.backward(tape, total)
    return {k: tape.grad(v) for k, v in leaves.items()}, breakdown


def evaluate(params, mcfg: ModelConfig, ws: WindowSet) -> tuple[float, float]:
    """CCC per dimension (competence, warmth) over all windows, eval mode."""
    if len(ws) == 0:
        raise ValueError("evaluate: empty window set")
    pred = predict(params, mcfg, ws.e, ws.r)
    return ccc(pred[:, 0], ws.y[:, 0]), ccc(pred[:, 1], ws.y[:, 1])


def prepare_splits(ws: WindowSet, tcfg: TrainConfig):
    if tcfg.split_by_session:
        idx = split_by_session(ws, tcfg.seed, tcfg.split)
    else:
        idx = split_indices(len(ws), tcfg.seed, tcfg.split)
    splits = dict(zip(("train", "val", "test"), (ws.take(i) for i in idx)))
    stats = None
    if tcfg.normalize:
        tr = splits["train"]
        stats = {"emitter": column_stats(tr.e.reshape(-1, tr.e.shape[-1])),
                 "receiver": column_stats(tr.r.reshape(-1, tr.r.shape[-1]))}
        splits = {k: replace(s, e=zscore(s.e, stats["emitter"]), r=zscore(s.r, stats["receiver"]))
                  for k, s in splits.items()}
    splits = {k: zero_modalities(s, tcfg.zero_modalities) for k, s in splits.items()}
    return splits, stats


def train(tcfg: TrainConfig, mcfg: ModelConfig, data: WindowSet | Dict[str, WindowSet]) -> TrainResult:
    """Adam on the summed objective; per-epoch logging; keeps the best-validation weights.

    ``data`` is either a pooled :class:`WindowSet` (split and normalised here) or
    a ready ``{"train", "val", "test"}`` mapping used as is.
    """
    t0 = time.perf_counter()
    if isinstance(data, WindowSet):
        splits, stats = prepare_splits(data, tcfg)
    else:
        splits, stats = dict(data), None
    train_ws = splits["train"]
    if len(train_ws) == 0:
        raise ValueError("empty training split")
    val_ws = splits.get("val") if splits.get("val") is not None and len(splits["val"]) else train_ws
    test_ws = splits.get("test")

    params = init_params(mcfg)
    rng = np.random.default_rng([tcfg.seed, 1])
    adam = Adam(tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)
    report = RunReport(config={"train": tcfg.to_dict(), "model": mcfg.to_dict()})
    report.baseline_val_ccc = evaluate(params, mcfg, val_ws)
    best, best_score = None, -math.inf
    n = len(train_ws)

    for epoch in range(tcfg.epochs):
        lr = lr_schedule(epoch, tcfg.lr0, tcfg.halve_every)
        order = rng.permutation(n)
        sums = np.zeros(4)
        batches = 0
        for s in range(0, n, tcfg.batch_size):
            b = order[s:s + tcfg.batch_size]
            grads, bd = gradients(params, mcfg, tcfg, train_ws.e[b], train_ws.r[b], train_ws.y[b], "train", rng)
            if not math.isfinite(bd.total):
                report.wall_time = time.perf_counter() - t0
                raise DivergenceError(f"total loss became {bd.total} at epoch {epoch}", report)
            adam.step(params, grads, lr)
            sums += (bd.task, bd.kd, bd.se, bd.total)
            batches += 1
        means = sums / batches
        c_tr = evaluate(params, mcfg, train_ws)
        c_va = evaluate(params, mcfg, val_ws)
        report.rows.append({
            "epoch": epoch, "lr": lr, "task": float(means[0]), "kd": float(means[1]), "se": float(means[2]),
            "total": float(means[3]),
            "ccc_c_train": c_tr[0], "ccc_w_train": c_tr[1], "ccc_c_val": c_va[0], "ccc_w_val": c_va[1],
        })
        logger.info("epoch %d lr %.2e total %.4f ccc val %.3f/%.3f", epoch, lr, means[3], *c_va)
        score = 0.5 * (c_va[0] + c_va[1])
        if score > best_score or best is None:
            best_score, best = score, {k: v.copy() for k, v in params.items()}
            report.best_epoch = epoch

    if test_ws is not None and len(test_ws):
        report.test_ccc = evaluate(best, mcfg, test_ws)
        report.test_ccc_last = evaluate(params, mcfg, test_ws)
    report.wall_time = time.perf_counter() - t0
    return TrainResult(best, params, mcfg, report, splits, stats)


# ---------------------------------------------------------------- ablation

MODALITY_RUNS = (
    ("facial", "emitter", "(-) facial (E)"),
    ("audio", "emitter", "(-) audio (E)"),
    ("eye", "emitter", "(-) eye (E)"),
    ("facial", "receiver", "(-) facial (R)"),
    ("physio", "receiver", "(-) physio (R)"),
    ("eye", "receiver", "(-) eye (R)"),
)

ABLATION_LABELS = {
    "full": "Full",
    "minus-inter": "(-) inter-attn.",
    "minus-intra": "(-) intra-attn.",
    "minus-kd": "(-) KD loss",
    "minus-se": "(-) SE loss",
}
for _mod, _src, _label in MODALITY_RUNS:
    ABLATION_LABELS[f"minus-{_mod}-{_src[0]}"] = _label

DEFAULT_ABLATION = tuple(k for k in ABLATION_LABELS if k != "full")


def ablation_configs(name: str, tcfg: TrainConfig, mcfg: ModelConfig) -> tuple[TrainConfig, ModelConfig]:
    """Configs for one named run; each differs from ``full`` in one toggle."""
    if name == "full":
        return tcfg, mcfg
    if name == "minus-inter":
        return tcfg, replace(mcfg, ablation=Ablation(use_inter=False, use_intra=True))
    if name == "minus-intra":
        return tcfg, replace(mcfg, ablation=Ablation(use_inter=True, use_intra=False))
    if name == "minus-kd":
        return replace(tcfg, kd_on=False), mcfg
    if name == "minus-se":
        return replace(tcfg, se_on=False), mcfg
    for mod, src, _ in MODALITY_RUNS:
        if name == f"minus-{mod}-{src[0]}":
            return replace(tcfg, zero_modalities=((src, mod),)), mcfg
    raise ConfigError(f"unknown ablation run {name!r}; known: {sorted(ABLATION_LABELS)}")


def run_ablation(runs: Sequence[str], tcfg: TrainConfig, mcfg: ModelConfig, data: WindowSet,
                 on_run=None) -> tuple[list[dict], Dict[str, TrainResult]]:
    """Train ``full`` plus every named run from the same seed; return the table rows.

    Each row holds test CCCs and ``delta_* = full - ablated`` (positive means the
    removal hurt).
    """
    names = ["full"] + [r for r in runs if r != "full"]
    for r in names:
        ablation_configs(r, tcfg, mcfg)  # validate names before spending time
    results: Dict[str, TrainResult] = {}
    for name in names:
        t, m = ablation_configs(name, tcfg, mcfg)
        results[name] = train(t, m, data)
        if on_run is not None:
            on_run(name, results[name])
    full = results["full"].report.test_ccc
    rows = []
    for name in names:
        c, w = results[name].report.test_ccc
        rows.append({"run": name, "label": ABLATION_LABELS[name], "competence": c, "warmth": w,
                     "delta_competence": full[0] - c, "delta_warmth": full[1] - w})
    return rows, results


ABLATION_COLUMNS = ("run", "label", "competence", "warmth", "delta_competence", "delta_warmth")


def write_ablation_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
