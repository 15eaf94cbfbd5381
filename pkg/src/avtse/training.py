"""Optimization machinery: Adam, the plateau schedule, pretrained init.

Also hosts the self-contained overfit demo (one fixed simulated mixture,
whole-utterance + two-segment objective) and the full-model gradient-check
harness used by the `gradcheck` CLI command.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import datasim, numerics as nm
from .losses import (LossWeights, SegLayout, SegSampler, penalty_loss, seg_loss,
                     total_loss, utt_loss)
from .model import ModelConfig, ModelParams, is_anchor_fusion

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
PLATEAU_PATIENCE = 6      # epochs without BVL improvement before halving lr
STOP_PATIENCE = 10        # epochs without BVL improvement before stopping
MAX_EPOCHS = 100
PRETRAINED_LR = 1e-4
SCRATCH_LR = 1e-3


@dataclass
class OptimState:
    lr: float = SCRATCH_LR
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    plateau_count: int = 0
    stop_count: int = 0
    best_val_loss: float = math.inf


def adam_step(params: ModelParams, opt: OptimState):
    """One Adam update from the accumulated gradients."""
    opt.step += 1
    c1 = 1.0 - ADAM_BETA1 ** opt.step
    c2 = 1.0 - ADAM_BETA2 ** opt.step
    for name, p in params.params.items():
        if not p.trainable:
            continue
        g = p.grad
        m = opt.m.setdefault(name, np.zeros_like(p.data))
        v = opt.v.setdefault(name, np.zeros_like(p.data))
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.data -= opt.lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def lr_schedule(opt: OptimState, val_loss: float) -> str:
    """Plateau policy: halve after 6 stale epochs, stop after 10.

    Returns "continue", "halve" or "stop".
    """
    if val_loss < opt.best_val_loss:
        opt.best_val_loss = val_loss
        opt.plateau_count = 0
        opt.stop_count = 0
        return "continue"
    opt.plateau_count += 1
    opt.stop_count += 1
    if opt.stop_count >= STOP_PATIENCE:
        return "stop"
    if opt.plateau_count >= PLATEAU_PATIENCE:
        opt.lr *= 0.5
        opt.plateau_count = 0
        return "halve"
    return "continue"


class CheckpointMismatch(ValueError):
    """Pretrained tensors do not line up with the model's parameter table."""


def param_init_from_checkpoint(params: ModelParams, tensors: dict[str, np.ndarray],
                               opt: OptimState | None = None):
    """Load every non-attention-fusion parameter from a pretrained snapshot.

    The attention-fusion weights keep their fresh seeded values. Name or
    shape disagreements raise with the offending names listed. When an
    optimizer state is given its lr drops to the pretrained-init rate.
    """
    expected = {n for n in params.names() if not is_anchor_fusion(n)}
    got = set(tensors)
    missing = sorted(expected - got)
    extra = sorted(got - expected)
    if missing or extra:
        raise CheckpointMismatch(
            f"checkpoint does not match model: missing={missing} extra={extra}")
    bad = [f"{n}: checkpoint {tensors[n].shape} vs model {params[n].data.shape}"
           for n in sorted(expected) if tuple(tensors[n].shape) != params[n].data.shape]
    if bad:
        raise CheckpointMismatch("shape mismatches: " + "; ".join(bad))
    for n in expected:
        params[n].data[...] = tensors[n]
    if opt is not None:
        opt.lr = PRETRAINED_LR


# ---------------------------------------------------------------------------
# Full-model gradient check harness
# ---------------------------------------------------------------------------

GRADCHECK_CONFIG = ModelConfig(h=8, kernel=8, stride=4, blocks=2, visual_dim=4,
                               tcn_depth=2, speakers=4, sample_rate=1600,
                               video_fps=25)
GRADCHECK_SAMPLES = 256


def gradcheck_losses(cfg: ModelConfig = GRADCHECK_CONFIG,
                     n_samples: int = GRADCHECK_SAMPLES, seed: int = 0):
    """Build a model plus deterministic L_utt / L_seg closures for grad_check.

    Constructed under the caller's working dtype; run inside
    `numerics.use_dtype(np.float64)` for meaningful finite differences on
    the full graph.
    """
    params = ModelParams(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    y = rng.standard_normal(n_samples) * 0.1
    target = rng.standard_normal(n_samples) * 0.1
    n_frames = round(n_samples / cfg.samples_per_frame)
    frames = rng.standard_normal((cfg.visual_dim, n_frames))
    label = int(rng.integers(cfg.speakers))
    layout = SegLayout(init_n=int(0.375 * n_samples), shift_n=int(0.125 * n_samples),
                       win_n=int(0.5 * n_samples))

    def f_utt():
        loss, _ = utt_loss(params, y, frames, target, label)
        return loss

    def f_seg():
        loss, _ = seg_loss(params, y, frames, target, label, layout=layout)
        return loss

    return params, f_utt, f_seg


def run_gradcheck(cfg: ModelConfig = GRADCHECK_CONFIG,
                  n_samples: int = GRADCHECK_SAMPLES, seed: int = 0,
                  eps: float = 1e-4) -> dict[str, float]:
    """Max relative FD error of every trainable parameter, per loss."""
    with nm.use_dtype(np.float64):
        params, f_utt, f_seg = gradcheck_losses(cfg, n_samples, seed)
        out = {"utt": nm.grad_check(f_utt, params.trainable(), eps=eps)}
        params.zero_grads()
        out["seg"] = nm.grad_check(f_seg, params.trainable(), eps=eps)
    return out


# ---------------------------------------------------------------------------
# Overfit demo: one fixed simulated mixture
# ---------------------------------------------------------------------------

@dataclass
class DemoSample:
    mixture: np.ndarray
    target: np.ndarray
    frames_clean: np.ndarray     # visual features of the clean target
    frames_impaired: np.ndarray  # same, zeroed after the impairment boundary
    label: int
    impair_after_s: float


def build_demo_sample(cfg: ModelConfig, seed: int = 0, duration_s: float = 4.0,
                      snr_db: float = 2.0, impair_after_s: float = 1.0) -> DemoSample:
    """One fixed two-speaker mixture with synthetic visuals.

    The impaired feature track zeroes every frame after `impair_after_s`,
    the training-time counterpart of streaming with visuals that die after
    the initialization window.
    """
    rng = np.random.default_rng(seed)
    f0s = rng.uniform(90.0, 240.0, size=2)
    target = datasim.synth_speech(duration_s, cfg.sample_rate, f0s[0], seed=seed * 2 + 1)
    interf = datasim.synth_speech(duration_s, cfg.sample_rate, f0s[1], seed=seed * 2 + 2)
    mix = datasim.mix_at_snr(target, interf, snr_db)
    frames = datasim.synth_visual_features(mix.target, cfg.sample_rate, cfg.video_fps,
                                           cfg.visual_dim)
    impaired = frames.copy()
    impaired[:, round(impair_after_s * cfg.video_fps):] = 0.0
    return DemoSample(mixture=mix.mixture, target=mix.target, frames_clean=frames,
                      frames_impaired=impaired, label=int(rng.integers(cfg.speakers)),
                      impair_after_s=impair_after_s)


@dataclass
class TrainRecord:
    step: int
    utt: float
    seg: float
    pe: float
    total: float


def train_demo(params: ModelParams, sample: DemoSample, steps: int,
               weights: LossWeights = LossWeights(), lr: float = SCRATCH_LR,
               seed: int = 0) -> list[TrainRecord]:
    """Overfit the model on one fixed sample for `steps` Adam updates.

    The whole-utterance pass sees clean visuals; the two-segment pass sees
    the impaired track, so the anchor-fusion path is the one trained for
    the visuals-lost regime. The segment layout is drawn once per run from
    the seeded sampler, keeping the per-step loss a deterministic function
    of the weights (and its moving average monotone as training converges).
    """
    sampler = SegSampler(seed=seed)
    cfg = params.cfg
    layout = sampler.sample(cfg.sample_rate)
    opt = OptimState(lr=lr)
    records = []
    for step in range(1, steps + 1):
        params.zero_grads()
        with nm.Tape() as tape:
            l_utt, _ = utt_loss(params, sample.mixture, sample.frames_clean,
                                sample.target, sample.label, weights.ce_lambda)
            l_seg, aux = seg_loss(params, sample.mixture, sample.frames_impaired,
                                  sample.target, sample.label, weights.ce_lambda,
                                  layout=layout)
            l_pe = penalty_loss(aux.a_anc)
            loss = total_loss(l_utt, l_seg, l_pe, weights)
            tape.backward(loss)
        adam_step(params, opt)
        records.append(TrainRecord(step=step, utt=l_utt.item(), seg=l_seg.item(),
                                   pe=l_pe.item(), total=loss.item()))
    return records
