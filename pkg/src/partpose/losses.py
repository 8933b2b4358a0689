"""Training objectives.

Every function takes already-computed network outputs and returns a scalar
tensor; batch statistics are averaged over the leading instance axis.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, input_gradient_penalty, where

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    rec: float = 0.01
    rec_c: float = 0.001
    dev: float = 0.1
    var_s: float = 0.1
    loc: float = 100.0
    var_q: float = 0.01
    vol: float = 1000.0
    adv_g: float = 0.65
    adv_d: float = 0.35
    v: float = 0.01
    h_revolute: float = float(np.pi / 2)
    h_prismatic: float = 0.4
    vq_pull: float = 1.0
    std_eps: float = 1e-4
    bce_clamp: float = 1e-7
    loc_fallback: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {k} must be finite and non-negative, got {v}")


def bce(p: Tensor, target, clamp: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy with ``p`` clamped to ``[clamp, 1 - clamp]``."""
    t = np.asarray(target, dtype=p.dtype)
    p = p.clip(clamp, 1.0 - clamp)
    ll = p.log() * Tensor(t) + (1.0 - p).log() * Tensor(1.0 - t)
    return -ll.mean()


def reconstruction_loss(o_hat: Tensor, o_hat_c: Tensor, target, w: LossWeights) -> Tensor:
    return w.rec * bce(o_hat, target, w.bce_clamp) + w.rec_c * bce(o_hat_c, target, w.bce_clamp)


def volume_loss(posed_logits: Tensor, rest_logits: Tensor, w: LossWeights) -> Tensor:
    """Squared change of the mean positive part of the max instance logit.

    Inputs are ``(N, B, M)`` instance-decoder logits at the same uniform
    points, with (posed) and without (rest) the inverse part transforms. The
    mean is per instance; the squared difference is averaged over the batch.
    """
    posed = posed_logits.max(axis=0).relu().mean(axis=-1)
    rest = rest_logits.max(axis=0).relu().mean(axis=-1)
    d = posed - rest
    return w.vol * (d * d).mean()


def vq_loss(z_pc: Tensor, code: np.ndarray) -> Tensor:
    """``|| z_pc - sg(c) ||``, batch mean; ``code`` is a constant."""
    return (z_pc - Tensor(np.asarray(code, dtype=z_pc.dtype))).norm(axis=-1).mean()


def codebook_loss(z_pc: Tensor, codebook: Tensor, index: np.ndarray, w: LossWeights) -> Tensor:
    """``|| sg(z_pc) - c ||``: pulls the selected codewords towards the encodings."""
    c = codebook[np.asarray(index)]
    return w.vq_pull * (Tensor(z_pc.data) - c).norm(axis=-1).mean()


def deviation_loss(q_z: Sequence[Tensor], r_z: Sequence[Tensor], w: LossWeights) -> Tensor:
    """Residual magnitudes, each averaged over its index set and the batch."""
    terms = []
    if q_z:
        terms.append(sum(q.norm(axis=-1).mean() for q in q_z) / len(q_z))
    if r_z:
        terms.append(sum(r.norm(axis=-1).mean() for r in r_z) / len(r_z))
    if not terms:
        return Tensor(0.0)
    return w.dev * sum(terms[1:], terms[0])


def _nearest_distance(q: Tensor, points: np.ndarray, mask: np.ndarray, fallback: float) -> Tensor:
    """Per-instance distance from ``q (B, 3)`` to its nearest masked point of ``points (B, M, 3)``.

    The nearest point is found on the values and then held constant, so the
    gradient flows into ``q`` only. Instances with an empty set get ``fallback``.
    """
    qd = q.data.astype(np.float64)
    d2 = ((points - qd[:, None, :]) ** 2).sum(axis=-1)
    d2 = np.where(mask, d2, np.inf)
    idx = d2.argmin(axis=1)
    empty = ~mask.any(axis=1)
    nearest = points[np.arange(len(points)), idx].astype(q.dtype)
    nearest[empty] = qd[empty]
    dist = (q - Tensor(nearest)).norm(axis=-1)
    return where(empty, Tensor(np.full(len(points), fallback, dtype=q.dtype)), dist)


def location_loss(pivots: Sequence[Tensor], points: np.ndarray, gt_inside: np.ndarray,
                  part_inside: Sequence[np.ndarray], w: LossWeights) -> Tensor:
    """Keeps every revolute pivot near the shape and between two parts.

    ``pivots[k]`` is the ``(B, 3)`` pivot of the k-th revolute part,
    ``points`` the ``(B, M, 3)`` world-space sample coordinates, ``gt_inside``
    the ``(B, M)`` ground-truth indicators and ``part_inside[k]`` the ``(B, M)``
    mask where that part's indicator exceeds 0.5.
    """
    n_r = len(pivots)
    if n_r == 0:
        return Tensor(0.0)
    points = np.asarray(points, dtype=np.float64)
    gt = np.asarray(gt_inside) > 0.5
    inside = [np.asarray(m, dtype=bool) for m in part_inside]
    total = None
    for k, q in enumerate(pivots):
        others = np.zeros_like(gt)
        for j in range(n_r):
            if j != k:
                others |= inside[j]
        d_gt = _nearest_distance(q, points, gt, w.loc_fallback)
        d_self = _nearest_distance(q, points, inside[k], w.loc_fallback)
        d_other = _nearest_distance(q, points, others, w.loc_fallback)
        term = (d_gt + 0.5 * (d_self + d_other)).mean()
        total = term if total is None else total + term
    return (w.loc / n_r) * total


def variance_loss(states: Sequence[Tensor], pivots: Sequence[Tensor], w: LossWeights) -> Tensor:
    """Inverse batch spread of joint states plus a pivot-repulsion term.

    ``states`` holds the ``(B,)`` states of all non-fixed parts; ``pivots`` the
    ``(B, 3)`` pivots of the revolute parts. Both sums are divided by the number
    of non-fixed parts.
    """
    n_p = len(states)
    if n_p == 0:
        return Tensor(0.0)
    terms = []
    batch = states[0].shape[0]
    if batch < 2:
        log.warning("batch size %d: joint-state spread term skipped", batch)
    else:
        for s in states:
            terms.append(w.var_s / (s.std(axis=0) + w.std_eps))
    for i, qi in enumerate(pivots):
        for j, qj in enumerate(pivots):
            if i != j:
                terms.append(w.var_q * ((qi - qj).norm(axis=-1) * (-1.0 / w.v)).exp().mean())
    if not terms:
        return Tensor(0.0)
    return sum(terms[1:], terms[0]) / n_p


def interpolates(real: np.ndarray, fake: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random per-cloud convex combinations of real and fake clouds."""
    alpha = rng.random((real.shape[0],) + (1,) * (real.ndim - 1))
    return alpha * real + (1.0 - alpha) * fake


def discriminator_loss(disc: Callable, real, fake, x_hat, w: LossWeights) -> Tensor:
    """Critic loss: weighted Wasserstein estimate plus an unweighted gradient penalty.

    ``fake`` should be detached from the generator graph by the caller.
    """
    d_fake = disc(fake).mean()
    d_real = disc(real).mean()
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(np.asarray(x_hat))
    penalty = input_gradient_penalty(disc, x_hat).mean()
    return w.adv_d * (d_fake - d_real) + penalty


def generator_adv_loss(disc: Callable, fake, w: LossWeights) -> Tensor:
    return w.adv_g * -disc(fake).mean()


def sum_losses(parts: dict[str, Tensor]) -> Tensor:
    vals = list(parts.values())
    return sum(vals[1:], vals[0])

