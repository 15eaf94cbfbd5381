"""Loss functions and the two-pass segment training objective.

The reconstruction term is negated scale-invariant SNR with the usual
numerical guards: both signals are zero-meaned, the error norm carries a
small epsilon, and the power ratio is capped so a perfect reconstruction
reads as -80 dB instead of -inf. Speaker classification is plain softmax
cross-entropy through each block's classifier matrix, and the attention
penalty discourages leaning on the stored anchor when the live embedding
is usable.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nm
from .model import ModelParams, frame_window, forward
from .numerics import Tensor

log = logging.getLogger(__name__)

SI_SNR_EPS = 1e-8
SI_SNR_CAP_DB = 80.0


class InvalidTargetError(ValueError):
    """Reference signal is constant (zero after mean removal)."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.3       # whole-utterance term
    beta: float = 0.7        # two-segment term
    gamma: float = 0.05      # anchor-attention penalty
    ce_lambda: float = 0.1   # speaker CE inside the first two terms

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "ce_lambda"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def si_snr_loss(x: np.ndarray, x_hat: Tensor) -> Tensor:
    """Negated SI-SNR in dB between a reference waveform and an estimate.

    Both are zero-meaned; the estimate is projected onto the reference and
    the loss is -10 log10(|proj|^2 / (|residual|^2 + eps)), capped below at
    -80 dB.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    est = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
    n = int(np.prod(est.data.shape))
    if x.size != n:
        raise nm.ShapeError(f"length mismatch: reference {x.size} vs estimate {n}")
    if n < 2:
        raise ValueError("signals must have at least 2 samples")
    xm = x - x.mean()
    if not xm.any():
        raise InvalidTargetError("reference is constant; SI-SNR undefined")
    ref = Tensor(xm.reshape(est.data.shape))

    est0 = nm.sub_scalar(est, nm.tmean(est))
    coef = nm.div(nm.dot(est0, ref), nm.dot(ref, ref))
    proj = nm.scale(ref, coef)
    resid = nm.sub(est0, proj)
    num = nm.sadd(nm.dot(proj, proj), 1e-12)
    den = nm.sadd(nm.dot(resid, resid), SI_SNR_EPS)
    ratio = nm.clip_max(nm.div(num, den), 10.0 ** (SI_SNR_CAP_DB / 10.0))
    return nm.smul(nm.log(ratio), -10.0 / math.log(10.0))


def ce_loss(e_cur: Tensor, w: Tensor, label: int) -> Tensor:
    """Cross-entropy of the classifier logits w @ e against the class index."""
    return nm.ce_from_logits(nm.linear(e_cur, w), label)


def penalty_loss(a_anc_per_block: list[Tensor]) -> Tensor:
    """Sum over blocks of the mean anchor-attention weight; lies in [0, R]."""
    total = None
    for a in a_anc_per_block:
        m = nm.tmean(a)
        total = m if total is None else nm.add(total, m)
    if total is None:
        raise ValueError("no attention rows given")
    return total


def utt_loss(p: ModelParams, y: np.ndarray, frames: np.ndarray, target: np.ndarray,
             label: int, ce_lambda: float = 0.1):
    """Whole-utterance pass (no memory bank): SI-SNR + lambda * sum CE."""
    out = forward(p, y, frames)
    n_out = out.x_hat.data.shape[1]
    loss = si_snr_loss(np.asarray(target)[:n_out], out.x_hat)
    si_db = -loss.item()
    ce_total = None
    for r, blk in enumerate(out.blocks):
        term = ce_loss(blk.e_cur, p[f"block{r}.cls.w"], label)
        ce_total = term if ce_total is None else nm.add(ce_total, term)
    loss = nm.add(loss, nm.smul(ce_total, ce_lambda))
    return loss, {"si_snr_db": si_db, "ce": ce_total.item()}


@dataclass(frozen=True)
class SegLayout:
    """Two-segment window layout, in samples."""
    init_n: int
    shift_n: int
    win_n: int


class SegSampler:
    """Draws window/shift/init lengths uniformly from configurable ranges."""

    def __init__(self, win_range=(1.05, 3.2), shift_range=(0.05, 0.2),
                 init_range=(0.05, 3.0), seed: int = 0):
        self.win_range = win_range
        self.shift_range = shift_range
        self.init_range = init_range
        self._rng = np.random.default_rng(seed)

    def sample(self, sample_rate: int) -> SegLayout:
        win = self._rng.uniform(*self.win_range)
        shift = self._rng.uniform(*self.shift_range)
        init = self._rng.uniform(*self.init_range)
        return SegLayout(init_n=round(init * sample_rate),
                         shift_n=round(shift * sample_rate),
                         win_n=round(win * sample_rate))


@dataclass
class SegAux:
    layout: SegLayout
    a_anc: list = field(default_factory=list)   # per-block 1 x L anchor weights
    si_snr_db: float = 0.0
    ce: float = 0.0


def seg_loss(p: ModelParams, y: np.ndarray, frames: np.ndarray, target: np.ndarray,
             label: int, ce_lambda: float = 0.1,
             sampler: Optional[SegSampler] = None,
             layout: Optional[SegLayout] = None):
    """Two-segment pass: init the bank from segment 1, score segment 2.

    Gradients flow through the bank write, so the attention fusion trains
    end to end. Returns (None, None) with a warning when the utterance is
    too short for the drawn layout.
    """
    cfg = p.cfg
    if layout is None:
        if sampler is None:
            raise ValueError("need a sampler or an explicit layout")
        layout = sampler.sample(cfg.sample_rate)
    y = np.asarray(y).reshape(-1)
    end2 = layout.init_n + layout.shift_n
    start2 = max(0, end2 - layout.win_n)
    if end2 >= y.size or layout.init_n < cfg.kernel or end2 - start2 < cfg.kernel:
        log.warning("utterance too short for segment layout %s (T=%d); skipping",
                    layout, y.size)
        return None, None

    frames1, _ = frame_window(frames, 0, layout.init_n, cfg)
    out1 = forward(p, y[:layout.init_n], frames1)
    anchors = [blk.e_cur for blk in out1.blocks]   # bank write, gradients kept

    frames2, skip2 = frame_window(frames, start2, end2, cfg)
    out2 = forward(p, y[start2:end2], frames2, anchors=anchors, frame_skip=skip2)
    n_out = out2.x_hat.data.shape[1]
    loss = si_snr_loss(np.asarray(target)[start2:start2 + n_out], out2.x_hat)
    aux = SegAux(layout=layout, si_snr_db=-loss.item())
    ce_total = None
    for r, blk in enumerate(out2.blocks):
        term = ce_loss(nm.mean_over_time(blk.fused), p[f"block{r}.cls.w"], label)
        ce_total = term if ce_total is None else nm.add(ce_total, term)
        aux.a_anc.append(blk.a_anc)
    aux.ce = ce_total.item()
    return nm.add(loss, nm.smul(ce_total, ce_lambda)), aux


def total_loss(utt: Tensor, seg: Tensor, pe: Tensor, w: LossWeights) -> Tensor:
    """alpha * L_utt + beta * L_seg + gamma * L_pe."""
    return nm.add(nm.add(nm.smul(utt, w.alpha), nm.smul(seg, w.beta)),
                  nm.smul(pe, w.gamma))
