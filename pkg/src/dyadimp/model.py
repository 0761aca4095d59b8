"""Cross-domain emitter/receiver regression network.

Data flow for a batch of windows (B windows, W timesteps each)::

    emitter (B,W,412) --enc_e--> Z_e --blstm_e--> Hb_e --intra_e------------> H_e
    receiver (B,W,68) --enc_r--> Z_r --blstm_r--> Hb_r --intra_r------------> H_r
                                 inter_er: Q=Hb_r, K/V=Hb_e              --> H_er
                                 inter_re: Q=Hb_e, K/V=Hb_r              --> H_re
    mean over time, concat enabled [H_e, H_r, H_er, H_re] -> FC trunk -> (C_p, W_p)

Parameter shape table (``d_in = 2 * d_lstm``)::

    enc_e.w  (emitter_dim, d_model)     enc_e.b  (d_model,)
    enc_r.w  (receiver_dim, d_model)    enc_r.b  (d_model,)
    blstm_{e,r}.{fwd,bwd}.w_ih  (d_model, 4*d_lstm)   gate order i, f, o, g
    blstm_{e,r}.{fwd,bwd}.w_hh  (d_lstm, 4*d_lstm)
    blstm_{e,r}.{fwd,bwd}.b     (4*d_lstm,)
    attn_{intra_e,intra_r,inter_er,inter_re}.{wq,wk,wv}  (d_in, d_attn)
    attn_*.wo  (d_attn, d_attn)
    fc.w1 (n_enabled * d_attn, fc_hidden)  fc.b1 (fc_hidden,)
    fc.w2 (fc_hidden, 2)                   fc.b2 (2,)

The per-head projections W_i^Q, W_i^K, W_i^V are the column blocks
``[:, i*d_head:(i+1)*d_head]`` of ``wq``, ``wk`` and ``wv``. Column 0 of
``fc.w2`` is the competence neuron, column 1 the warmth neuron.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, Tensor

REPRESENTATIONS = ("H_e", "H_r", "H_er", "H_re")
ATTN_BLOCKS = ("intra_e", "intra_r", "inter_er", "inter_re")

CHECKPOINT_MAGIC = b"DYADCKPT"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Ablation:
    use_inter: bool = True
    use_intra: bool = True


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    d_lstm: int = 32
    n_heads: int = 16
    d_attn: int = 64
    fc_hidden: int = 16
    dropout_rate: float = 0.3
    ablation: Ablation = field(default_factory=Ablation)
    seed: int = 0
    emitter_dim: int = 412
    receiver_dim: int = 68

    def __post_init__(self):
        if self.d_attn % self.n_heads:
            raise ConfigError(f"d_attn={self.d_attn} not divisible by n_heads={self.n_heads}")
        if not (self.ablation.use_inter or self.ablation.use_intra):
            raise ConfigError("at least one of use_inter/use_intra must be enabled")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        for name in ("d_model", "d_lstm", "n_heads", "d_attn", "fc_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def d_head(self) -> int:
        return self.d_attn // self.n_heads

    @property
    def enabled(self) -> tuple[str, ...]:
        """Representations that enter the FC head, in fixed order."""
        keep = []
        if self.ablation.use_intra:
            keep += ["H_e", "H_r"]
        if self.ablation.use_inter:
            keep += ["H_er", "H_re"]
        return tuple(r for r in REPRESENTATIONS if r in keep)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        if "ablation" in d and isinstance(d["ablation"], dict):
            ab = d["ablation"]
            bad = set(ab) - {"use_inter", "use_intra"}
            if bad:
                raise ConfigError(f"unknown ablation keys: {sorted(bad)}")
            d["ablation"] = Ablation(**ab)
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> Dict[str, tuple[int, ...]]:
    """Ordered name -> shape table; this order is also the checkpoint payload order."""
    shapes: Dict[str, tuple[int, ...]] = {
        "enc_e.w": (cfg.emitter_dim, cfg.d_model),
        "enc_e.b": (cfg.d_model,),
        "enc_r.w": (cfg.receiver_dim, cfg.d_model),
        "enc_r.b": (cfg.d_model,),
    }
    h = cfg.d_lstm
    for dom in ("e", "r"):
        for direction in ("fwd", "bwd"):
            p = f"blstm_{dom}.{direction}"
            shapes[f"{p}.w_ih"] = (cfg.d_model, 4 * h)
            shapes[f"{p}.w_hh"] = (h, 4 * h)
            shapes[f"{p}.b"] = (4 * h,)
    d_in = 2 * h
    for blk in ATTN_BLOCKS:
        for w in ("wq", "wk", "wv"):
            shapes[f"attn_{blk}.{w}"] = (d_in, cfg.d_attn)
        shapes[f"attn_{blk}.wo"] = (cfg.d_attn, cfg.d_attn)
    shapes["fc.w1"] = (len(cfg.enabled) * cfg.d_attn, cfg.fc_hidden)
    shapes["fc.b1"] = (cfg.fc_hidden,)
    shapes["fc.w2"] = (cfg.fc_hidden, 2)
    shapes["fc.b2"] = (2,)
    return shapes


def init_params(cfg: ModelConfig, seed: int | None = None) -> Dict[str, np.ndarray]:
    """Glorot-uniform matrices, zero biases, forget-gate bias 1."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 2:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-a, a, size=shape)
        else:
            b = np.zeros(shape)
            if name.startswith("blstm_") and name.endswith(".b"):
                h = cfg.d_lstm
                b[h:2 * h] = 1.0
            params[name] = b
    return params


# ---------------------------------------------------------------- layers

def _affine(x, w, b) -> Tensor:
    return dc.add(dc.matmul(x, w), b)


def encode_inputs(e_window, r_window, params, cfg: ModelConfig | None = None):
    """Per-timestep ``tanh(x W + b)`` into the shared width, for both domains."""
    e_window, r_window = dc._as_tensor(e_window), dc._as_tensor(r_window)
    k = params["enc_e.w"].shape[0]
    l = params["enc_r.w"].shape[0]
    if e_window.shape[-1] != k:
        raise DimensionError(f"emitter features have {e_window.shape[-1]} columns, expected {k}")
    if r_window.shape[-1] != l:
        raise DimensionError(f"receiver features have {r_window.shape[-1]} columns, expected {l}")
    if e_window.shape[-2] < 1:
        raise DimensionError("window width must be at least 1")
    z_e = dc.tanh(_affine(e_window, params["enc_e.w"], params["enc_e.b"]))
    z_r = dc.tanh(_affine(r_window, params["enc_r.w"], params["enc_r.b"]))
    return z_e, z_r


def _lstm_direction(x_proj: Tensor, w_hh, hidden: int, reverse: bool) -> list[Tensor]:
    """Run one LSTM direction over pre-projected inputs ``(B, W, 4h)``.

    Returns hidden states indexed by original time position.
    """
    steps = x_proj.shape[-2]
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    h = c = None
    out: list[Tensor | None] = [None] * steps
    for t in order:
        gates = dc.slice_axis(x_proj, -2, t)
        if h is not None:
            gates = dc.add(gates, dc.matmul(h, w_hh))
        sig = dc.sigmoid(dc.slice_axis(gates, -1, 0, 3 * hidden))
        i = dc.slice_axis(sig, -1, 0, hidden)
        f = dc.slice_axis(sig, -1, hidden, 2 * hidden)
        o = dc.slice_axis(sig, -1, 2 * hidden, 3 * hidden)
        g = dc.tanh(dc.slice_axis(gates, -1, 3 * hidden, 4 * hidden))
        c = dc.mul(i, g) if c is None else dc.add(dc.mul(f, c), dc.mul(i, g))
        h = dc.mul(o, dc.tanh(c))
        out[t] = h
    return out


def blstm_forward(z, cell_params: dict) -> Tensor:
    """Bidirectional LSTM over ``z`` of shape ``(..., W, d_model)``.

    ``cell_params`` maps ``fwd.w_ih``, ``fwd.w_hh``, ``fwd.b`` and the ``bwd.*``
    equivalents. Zero initial state. Output ``(..., W, 2*d_lstm)`` with the
    forward half first.
    """
    z = dc._as_tensor(z)
    if z.ndim == 2:
        w, d = z.shape
        return dc.reshape(blstm_forward(dc.reshape(z, (1, w, d)), cell_params), (w, -1))
    hidden = cell_params["fwd.w_hh"].shape[0]
    halves = []
    for direction, reverse in (("fwd", False), ("bwd", True)):
        x_proj = _affine(z, cell_params[f"{direction}.w_ih"], cell_params[f"{direction}.b"])
        hs = _lstm_direction(x_proj, cell_params[f"{direction}.w_hh"], hidden, reverse)
        halves.append(dc.stack(hs, axis=-2))
    return dc.concat(halves, axis=-1)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, w, d = x.shape
    x = dc.reshape(x, (*lead, w, n_heads, d // n_heads))
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return dc.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    x = dc.transpose(x, axes)
    *lead, w, n, dh = x.shape
    return dc.reshape(x, (*lead, w, n * dh))


def multi_head_attention(q_in, kv_in, block: dict, n_heads: int, return_weights: bool = False):
    """Scaled dot-product attention with ``n_heads`` heads and output projection.

    ``q_in`` is ``(..., W_q, d_in)``, ``kv_in`` is ``(..., W_k, d_in)``; ``block``
    holds ``wq``, ``wk``, ``wv`` ``(d_in, d_attn)`` and ``wo`` ``(d_attn, d_attn)``.
    Scores are divided by ``sqrt(d_attn / n_heads)``. No positional encoding.
    """
    q_in, kv_in = dc._as_tensor(q_in), dc._as_tensor(kv_in)
    if q_in.shape[-1] != kv_in.shape[-1] or q_in.shape[:-2] != kv_in.shape[:-2]:
        raise DimensionError(f"attention: query {q_in.shape} and key/value {kv_in.shape} disagree")
    d_attn = block["wq"].shape[-1]
    if d_attn % n_heads:
        raise DimensionError(f"attention width {d_attn} not divisible by {n_heads} heads")
    d_head = d_attn // n_heads
    q = _split_heads(dc.matmul(q_in, block["wq"]), n_heads)
    k = _split_heads(dc.matmul(kv_in, block["wk"]), n_heads)
    v = _split_heads(dc.matmul(kv_in, block["wv"]), n_heads)
    nd = k.ndim
    kt = dc.transpose(k, list(range(nd - 2)) + [nd - 1, nd - 2])
    scores = dc.scale(dc.matmul(q, kt), 1.0 / math.sqrt(d_head))
    weights = dc.softmax(scores, axis=-1)
    heads = dc.matmul(weights, v)
    out = dc.matmul(_merge_heads(heads), block["wo"])
    return (out, weights) if return_weights else out


def intra_attention(h_blstm, block: dict, n_heads: int = 16, return_weights: bool = False):
    return multi_head_attention(h_blstm, h_blstm, block, n_heads, return_weights)


def inter_attention(h_query, h_kv, block: dict, n_heads: int = 16, return_weights: bool = False):
    """Query from one domain, keys/values from the other; output has the query's length."""
    return multi_head_attention(h_query, h_kv, block, n_heads, return_weights)


def pool_and_concat(cache: "ForwardCache", ablation: Ablation) -> Tensor:
    keep = [name for name, on in (("H_e", ablation.use_intra), ("H_r", ablation.use_intra),
                                  ("H_er", ablation.use_inter), ("H_re", ablation.use_inter)) if on]
    if not keep:
        raise ConfigError("pool_and_concat: every representation is disabled")
    return dc.concat([cache.pooled[name] for name in keep], axis=-1)


def fc_head(fused, params, dropout_mask=None):
    """16-unit ReLU trunk, optional (pre-scaled) dropout mask, two linear neurons.

    Returns ``(C_p, W_p)`` each of shape ``fused.shape[:-1]``.
    """
    hidden = dc.relu(_affine(fused, params["fc.w1"], params["fc.b1"]))
    if dropout_mask is not None:
        hidden = dc.mul(hidden, dropout_mask)
    out = _affine(hidden, params["fc.w2"], params["fc.b2"])
    return dc.slice_axis(out, -1, 0), dc.slice_axis(out, -1, 1)


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: kept units scaled by 1/(1-rate)."""
    if rate <= 0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


@dataclass
class ForwardCache:
    H_blstm_e: Tensor
    H_blstm_r: Tensor
    sequences: Dict[str, Tensor]
    pooled: Dict[str, Tensor]
    fused: Tensor
    C_p: Tensor
    W_p: Tensor
    attention_weights: Dict[str, Tensor]


def forward(e_window, r_window, params, cfg: ModelConfig, mode: str = "eval",
            rng: np.random.Generator | None = None) -> ForwardCache:
    """Full forward pass. ``params`` values may be tape variables or arrays.

    All four representations are computed whatever the ablation; only the FC
    input is affected. Unbatched ``(W, D)`` windows are treated as a batch of
    one. ``mode="train"`` draws a dropout mask from ``rng``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    e_window, r_window = dc._as_tensor(e_window), dc._as_tensor(r_window)
    if e_window.ndim == 2:
        e_window = dc.reshape(e_window, (1,) + e_window.shape)
    if r_window.ndim == 2:
        r_window = dc.reshape(r_window, (1,) + r_window.shape)
    if e_window.shape[:-1] != r_window.shape[:-1]:
        raise DimensionError(f"emitter window {e_window.shape} and receiver window {r_window.shape} differ in width")
    z_e, z_r = encode_inputs(e_window, r_window, params, cfg)
    hb_e = blstm_forward(z_e, _sub(params, "blstm_e."))
    hb_r = blstm_forward(z_r, _sub(params, "blstm_r."))
    n = cfg.n_heads
    seqs, weights = {}, {}
    seqs["H_e"], weights["intra_e"] = intra_attention(hb_e, _sub(params, "attn_intra_e."), n, True)
    seqs["H_r"], weights["intra_r"] = intra_attention(hb_r, _sub(params, "attn_intra_r."), n, True)
    seqs["H_er"], weights["inter_er"] = inter_attention(hb_r, hb_e, _sub(params, "attn_inter_er."), n, True)
    seqs["H_re"], weights["inter_re"] = inter_attention(hb_e, hb_r, _sub(params, "attn_inter_re."), n, True)
    pooled = {name: dc.mean_pool(seqs[name], axis=-2) for name in REPRESENTATIONS}
    cache = ForwardCache(hb_e, hb_r, seqs, pooled, None, None, None, weights)
    cache.fused = pool_and_concat(cache, cfg.ablation)
    mask = None
    if mode == "train" and cfg.dropout_rate > 0:
        if rng is None:
            raise ValueError("train mode needs an rng for dropout")
        mask = dropout_mask(cache.fused.shape[:-1] + (cfg.fc_hidden,), cfg.dropout_rate, rng)
    cache.C_p, cache.W_p = fc_head(cache.fused, params, mask)
    return cache


def _sub(params, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def predict(params, cfg: ModelConfig, e: np.ndarray, r: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode predictions ``(N, 2)`` for stacked windows."""
    out = []
    for s in range(0, len(e), batch_size):
        cache = forward(e[s:s + batch_size], r[s:s + batch_size], params, cfg, "eval")
        out.append(np.stack([cache.C_p.data, cache.W_p.data], axis=-1))
    return np.concatenate(out, axis=0) if out else np.zeros((0, 2))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: Dict[str, np.ndarray], cfg: ModelConfig, extra: dict | None = None) -> None:
    """JSON header (config, shape table, version) then float64 little-endian payload."""
    shapes = param_shapes(cfg)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "shapes": [[name, list(shape)] for name, shape in shapes.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(params[name], dtype="<f8").tobytes() for name in shapes)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> tuple[Dict[str, np.ndarray], ModelConfig, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic at byte 0)")
    (n,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + n])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    cfg = ModelConfig.from_dict(header["config"])
    offset = 12 + n
    params = {}
    for name, shape in header["shapes"]:
        count = int(np.prod(shape))
        if offset + 8 * count > len(raw):
            raise ValueError(f"{path}: payload truncated at byte {len(raw)} while reading {name}")
        params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    return params, cfg, header.get("extra", {})
