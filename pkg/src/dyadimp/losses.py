"""Training objectives and the concordance correlation coefficient.

Loss functions take and return :class:`~dyadimp.diffcore.Tensor` so they can sit
on a tape. Representations are batched: a leading batch axis is averaged, the
last axis holds the representation's elements.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, DimensionError, Tensor


@dataclass
class LossBreakdown:
    task: float
    kd: float
    se: float
    total: float
    kd_on: bool = True
    se_on: bool = True


def mse(a, b) -> Tensor:
    """Mean of squared differences over every element."""
    a, b = dc._as_tensor(a), dc._as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = dc.sub(a, b)
    return dc.mean_all(dc.mul(d, d))


def kd_loss(h_e, h_r) -> Tensor:
    # both directions kept literally; equals 2 * mse(h_e, h_r)
    return dc.add(mse(h_e, h_r), mse(h_r, h_e))


def seq_softmax_prob(h, axis: int = -1) -> Tensor:
    return dc.softmax(h, axis=axis)


def kl_div(p_a, p_b, axis: int = -1) -> Tensor:
    """``sum p_a * log(p_a / p_b)`` along ``axis``, averaged over the other axes."""
    p_a, p_b = dc._as_tensor(p_a), dc._as_tensor(p_b)
    if p_a.shape != p_b.shape:
        raise DimensionError(f"kl_div: shapes {p_a.shape} and {p_b.shape} differ")
    for name, p in (("p_a", p_a), ("p_b", p_b)):
        dev = np.abs(p.data.sum(axis=axis) - 1.0).max()
        if dev > 1e-6:
            raise ContractError(f"kl_div: {name} is not normalised (sum deviates by {dev:.3g})")
    terms = dc.mul(p_a, dc.sub(dc.log(p_a), dc.log(p_b)))
    n = p_a.shape[axis]
    return dc.scale(dc.mean_all(terms), n)


def se_loss(h_er, h_e, h_re, h_r, axis: int = -1) -> Tensor:
    """``KL(P(h_er) || P(h_e)) + KL(P(h_re) || P(h_r))``; not symmetric."""
    p = lambda h: seq_softmax_prob(h, axis)
    return dc.add(kl_div(p(h_er), p(h_e), axis), kl_div(p(h_re), p(h_r), axis))


def task_loss(c_p, w_p, c_l, w_l) -> Tensor:
    c_p, w_p = dc._as_tensor(c_p), dc._as_tensor(w_p)
    if c_p.shape != np.shape(c_l) or w_p.shape != np.shape(w_l):
        raise DimensionError(
            f"task_loss: predictions {c_p.shape}/{w_p.shape} vs labels {np.shape(c_l)}/{np.shape(w_l)}")
    return dc.add(mse(c_p, c_l), mse(w_p, w_l))


def regularizers(cache, per_timestep: bool = False, swap: bool = False) -> tuple[Tensor, Tensor]:
    """KD and SE terms from a forward cache.

    ``per_timestep`` uses the pre-pool sequences (SE softmax then runs along
    time per feature channel); ``swap`` exchanges MSE and KL between the two.
    """
    src = cache.sequences if per_timestep else cache.pooled
    axis = -2 if per_timestep else -1
    he, hr, her, hre = src["H_e"], src["H_r"], src["H_er"], src["H_re"]
    if not swap:
        return kd_loss(he, hr), se_loss(her, he, hre, hr, axis)
    p = lambda h: seq_softmax_prob(h, axis)
    kd = dc.add(kl_div(p(he), p(hr), axis), kl_div(p(hr), p(he), axis))
    se = dc.add(mse(her, he), mse(hre, hr))
    return kd, se


def total_loss(task: Tensor, kd: Tensor, se: Tensor, kd_on: bool = True,
               se_on: bool = True) -> tuple[Tensor, LossBreakdown]:
    """Unweighted sum of the enabled parts.

    A disabled part is still reported in the breakdown but is not an ancestor
    of the returned total, so it contributes no gradient at all.
    """
    total = task
    if kd_on:
        total = dc.add(total, kd)
    if se_on:
        total = dc.add(total, se)
    breakdown = LossBreakdown(task.item(), kd.item(), se.item(), total.item(), kd_on, se_on)
    return total, breakdown


def ccc(pred, label) -> float:
    """Lin's concordance correlation coefficient with population moments.

    Two constant series score 1 when equal and 0 otherwise.
    """
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(label, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DimensionError(f"ccc: lengths {x.size} and {y.size} differ")
    if x.size < 2:
        raise ContractError("ccc: need at least two samples")
    mx, my = x.mean(), y.mean()
    vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
    cov = ((x - mx) * (y - my)).mean()
    denom = vx + vy + (mx - my) ** 2
    if denom == 0.0:
        return 1.0
    if vx == 0.0 and vy == 0.0:
        return 0.0
    return float(2.0 * cov / denom)
