"""Desk-scale data pipeline: mixtures, synthetic visual features, impairments.

Waveform math here runs in float64 (the model casts to its working dtype at
the boundary); that keeps SNR bookkeeping exact to well below 1e-6 dB.
Synthetic "speech" is a sum of amplitude-modulated harmonics with a
per-speaker fundamental, so the visual features (frame log-energy plus a few
band energies of the target) carry a real audio-visual correlation for the
model to exploit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import InvalidTargetError, si_snr_loss
from .numerics import Tensor

IMPAIRMENT_KINDS = ("visual_missing", "lip_concealment", "low_resolution")

SDR_CAP_DB = 80.0


@dataclass
class Utterance:
    target: np.ndarray
    interferer: np.ndarray
    label: int
    sample_rate: int


@dataclass(frozen=True)
class ImpairmentSpec:
    kind: str
    ratio: float
    seed: int

    def __post_init__(self):
        if self.kind not in IMPAIRMENT_KINDS:
            raise ValueError(f"unknown impairment kind {self.kind!r}")
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"ratio must lie in [0, 1), got {self.ratio}")


@dataclass
class Mixture:
    mixture: np.ndarray
    target: np.ndarray        # reference target after the shared output gain
    interferer: np.ndarray
    snr_db: float


def loop_to_length(x: np.ndarray, n: int) -> np.ndarray:
    """Loop or truncate a waveform to exactly n samples."""
    x = np.asarray(x).reshape(-1)
    if x.size == 0:
        raise ValueError("empty waveform")
    reps = -(-n // x.size)
    return np.tile(x, reps)[:n]


def mix_at_snr(target: np.ndarray, interferer: np.ndarray, snr_db: float) -> Mixture:
    """Scale the interferer for the requested SNR and peak-normalize to 0.9.

    The normalization gain is shared by the stored reference target, so
    re-measuring the SNR of the output pair returns snr_db exactly.
    """
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    i = np.asarray(interferer, dtype=np.float64).reshape(-1)
    if t.shape != i.shape:
        raise ValueError(f"length mismatch: target {t.size} vs interferer {i.size}")
    pt = float(np.dot(t, t))
    pi = float(np.dot(i, i))
    if pt == 0.0 or pi == 0.0:
        raise ValueError("zero-energy input")
    i = i * np.sqrt(pt / (pi * 10.0 ** (snr_db / 10.0)))
    mix = t + i
    peak = np.abs(mix).max()
    if peak > 0.9:
        g = 0.9 / peak
        mix, t, i = mix * g, t * g, i * g
    return Mixture(mixture=mix, target=t, interferer=i, snr_db=float(snr_db))


def measure_snr_db(target: np.ndarray, interferer: np.ndarray) -> float:
    pt = float(np.dot(target, target))
    pi = float(np.dot(interferer, interferer))
    return 10.0 * np.log10(pt / pi)


def synth_speech(duration_s: float, sample_rate: int, f0: float, seed: int,
                 n_harmonics: int = 8) -> np.ndarray:
    """Amplitude-modulated harmonic stack with a slow random envelope."""
    rng = np.random.default_rng(seed)
    n = round(duration_s * sample_rate)
    t = np.arange(n) / sample_rate
    voiced = np.zeros(n)
    for k in range(1, n_harmonics + 1):
        voiced += (1.0 / k) * np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi))
    # envelope: smoothed rectified noise at a syllable-ish rate
    ctrl_rate = 25
    ctrl = np.abs(rng.standard_normal(max(2, round(duration_s * ctrl_rate)) + 2))
    kernel = np.ones(3) / 3.0
    ctrl = np.convolve(ctrl, kernel, mode="same")
    env = np.interp(np.linspace(0, ctrl.size - 1, n), np.arange(ctrl.size), ctrl)
    x = voiced * env
    return 0.7 * x / np.abs(x).max()


def frame_energies(x: np.ndarray, sample_rate: int, fps: int) -> np.ndarray:
    """Per-video-frame log energy of a waveform (independent envelope probe)."""
    spf = sample_rate // fps
    n_frames = round(x.size / spf)
    out = np.empty(n_frames)
    for i in range(n_frames):
        seg = x[i * spf:(i + 1) * spf]
        out[i] = np.log(np.dot(seg, seg) + 1e-8)
    return out


def synth_visual_features(target: np.ndarray, sample_rate: int, fps: int,
                          n_features: int) -> np.ndarray:
    """Per-frame features: [log energy, first n-1 band energies], standardized.

    Deterministic given the input; a silent target yields standardized-zero
    (constant) features.
    """
    x = np.asarray(target, dtype=np.float64).reshape(-1)
    spf = sample_rate // fps
    n_frames = round(x.size / spf)
    feats = np.zeros((n_features, n_frames))
    n_bands = n_features - 1
    for i in range(n_frames):
        seg = x[i * spf:(i + 1) * spf]
        if seg.size < spf:
            seg = np.pad(seg, (0, spf - seg.size))
        feats[0, i] = np.log(np.dot(seg, seg) + 1e-8)
        if n_bands:
            spec = np.abs(np.fft.rfft(seg)) ** 2
            bands = np.array_split(spec[1:], n_bands)
            feats[1:, i] = [np.log(b.sum() + 1e-8) for b in bands]
    mean = feats.mean(axis=1, keepdims=True)
    std = feats.std(axis=1, keepdims=True)
    return (feats - mean) / (std + 1e-8)


def apply_impairment(frames: np.ndarray, spec: ImpairmentSpec):
    """Corrupt one contiguous frame span; returns (frames, realized_ratio).

    Frames outside the span are bit-identical to the input; everything is
    deterministic per spec.seed.
    """
    frames = np.asarray(frames)
    n_feat, n_frames = frames.shape
    span = round(spec.ratio * n_frames)
    out = frames.copy()
    if span == 0:
        return out, 0.0
    rng = np.random.default_rng(spec.seed)
    start = int(rng.integers(0, n_frames - span + 1))
    stop = start + span
    if spec.kind == "visual_missing":
        out[:, start:stop] = 0.0
    elif spec.kind == "lip_concealment":
        out[n_feat // 2:, start:stop] = 0.0
    else:  # low_resolution: temporal blur plus sensor-ish noise
        kernel = np.ones(5) / 5.0
        pad = np.pad(frames, ((0, 0), (2, 2)), mode="edge")
        blurred = np.stack([np.convolve(pad[c], kernel, mode="valid")
                            for c in range(n_feat)])
        noise = rng.normal(0.0, 0.1, (n_feat, span))
        out[:, start:stop] = blurred[:, start:stop] + noise
    return out, span / n_frames


def si_snr_metric(x: np.ndarray, x_hat: np.ndarray) -> float:
    """SI-SNR in dB (higher is better); +80 dB cap for perfect estimates."""
    return -si_snr_loss(x, Tensor(np.asarray(x_hat, dtype=np.float64).reshape(1, -1))).item()


def sdr_metric(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Simple energy-ratio SDR in dB: 10 log10(|x|^2 / |x - x_hat|^2).

    This is not BSS-Eval SDR; outputs are labeled "simple SDR" wherever
    printed.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    xh = np.asarray(x_hat, dtype=np.float64).reshape(-1)
    if x.shape != xh.shape:
        raise ValueError(f"length mismatch: {x.size} vs {xh.size}")
    px = float(np.dot(x, x))
    if px == 0.0:
        raise InvalidTargetError("reference is silent; SDR undefined")
    err = x - xh
    ratio = px / (float(np.dot(err, err)) + 1e-8)
    return min(10.0 * np.log10(ratio + 1e-12), SDR_CAP_DB)
