"""The extraction network.

A strided conv encoder lifts the time-domain mixture into a latent sequence
Y (H x L at sample_rate / stride frames per second); a transposed conv
decoder maps masked latents back to a waveform. Visual feature frames are
projected to H and repeated to the latent rate. R refinement blocks each
re-estimate a speaker embedding from the previous block's output, optionally
fuse it with a stored anchor embedding through additive attention, and
produce a nonnegative mask over Y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nm
from .numerics import Param, Tensor


class AlignmentError(ValueError):
    """Audio and visual streams disagree beyond the allowed slack."""


@dataclass(frozen=True)
class ModelConfig:
    h: int = 64                 # latent feature channels
    kernel: int = 40            # encoder kernel, samples
    stride: int = 20            # encoder stride, samples
    blocks: int = 4             # refinement blocks
    visual_dim: int = 8         # feature channels per video frame
    tcn_depth: int = 4          # dilated conv blocks per mask estimator
    speakers: int = 8           # training classifier classes
    sample_rate: int = 16000
    video_fps: int = 25
    spk_kernel: int = 3         # speaker-encoder conv stack kernel width

    def __post_init__(self):
        if self.h < 4:
            raise ValueError(f"h must be >= 4, got {self.h}")
        if self.blocks < 1:
            raise ValueError(f"blocks must be >= 1, got {self.blocks}")
        if not 1 <= self.stride <= self.kernel:
            raise ValueError(f"need 1 <= stride <= kernel, got {self.stride}/{self.kernel}")
        if self.sample_rate % self.video_fps:
            raise ValueError(
                f"sample_rate {self.sample_rate} not divisible by fps {self.video_fps}")
        if self.samples_per_frame % self.stride:
            raise ValueError(
                f"upsample factor {self.sample_rate}/({self.stride}*{self.video_fps}) "
                "is not a positive integer")
        if self.spk_kernel < 1 or self.spk_kernel % 2 == 0:
            raise ValueError(f"spk_kernel must be odd and >= 1, got {self.spk_kernel}")

    @property
    def samples_per_frame(self) -> int:
        return self.sample_rate // self.video_fps

    @property
    def upsample(self) -> int:
        """Latent steps covered by one video frame."""
        return self.samples_per_frame // self.stride

    def latent_len(self, n_samples: int) -> int:
        if n_samples < self.kernel:
            raise ValueError(f"input too short: {n_samples} samples < kernel {self.kernel}")
        return (n_samples - self.kernel) // self.stride + 1

    def decoded_len(self, latent: int) -> int:
        return (latent - 1) * self.stride + self.kernel


_SPK_STACK_DEPTH = 2


def _shapes(cfg: ModelConfig):
    """Parameter name -> (shape, fan_in), in a fixed construction order."""
    h, fv, n = cfg.h, cfg.visual_dim, cfg.speakers
    kw = cfg.spk_kernel
    out = {
        "audio_enc.w": ((h, 1, cfg.kernel), cfg.kernel),
        "audio_dec.w": ((h, 1, cfg.kernel), h),
        "visual.w": ((h, fv), fv),
        "visual.b": ((h,), fv),
    }
    for r in range(cfg.blocks):
        p = f"block{r}"
        out[f"{p}.spk.proj.w"] = ((h, 2 * h), 2 * h)
        out[f"{p}.spk.proj.b"] = ((h,), 2 * h)
        for j in range(_SPK_STACK_DEPTH):
            out[f"{p}.spk.conv{j}.w"] = ((h, h, kw), h * kw)
        for branch in ("cur", "anc"):
            out[f"{p}.af.embed_{branch}.w"] = ((h, h), h)
            out[f"{p}.af.embed_{branch}.b"] = ((h,), h)
        out[f"{p}.af.vis.w"] = ((h, h), h)
        out[f"{p}.af.vis.b"] = ((h,), h)
        for branch in ("cur", "anc"):
            out[f"{p}.af.score_{branch}.w"] = ((1, h), h)
            out[f"{p}.af.score_{branch}.b"] = ((1,), h)
        out[f"{p}.mask.proj.w"] = ((h, 2 * h), 2 * h)
        out[f"{p}.mask.proj.b"] = ((h,), 2 * h)
        for d in range(cfg.tcn_depth):
            out[f"{p}.mask.tcn{d}.w"] = ((h, h, 3), h * 3)
        out[f"{p}.mask.out.w"] = ((h, h), h)
        out[f"{p}.mask.out.b"] = ((h,), h)
        out[f"{p}.cls.w"] = ((n, h), h)
    return out


def is_anchor_fusion(name: str) -> bool:
    """True for parameters of the attention-fusion sub-module."""
    return ".af." in name


class ModelParams:
    """All trainable weights, in a flat name -> Param map.

    Initialization is uniform +/- 1/sqrt(fan_in), drawn from a single seeded
    generator in a fixed order, so a seed pins every weight bit-exactly.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.params: dict[str, Param] = {}
        for name, (shape, fan_in) in _shapes(cfg).items():
            bound = 1.0 / math.sqrt(fan_in)
            self.params[name] = Param(rng.uniform(-bound, bound, shape))

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def names(self):
        return list(self.params)

    def trainable(self):
        return [p for p in self.params.values() if p.trainable]

    def zero_grads(self):
        nm.zero_grads(self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}


@dataclass
class BlockOutput:
    latent: Tensor                    # masked latent H x L after this block
    e_cur: Tensor                     # current speaker embedding, H x 1
    a_cur: Optional[Tensor] = None    # attention weight on the current branch, 1 x L
    a_anc: Optional[Tensor] = None    # attention weight on the anchor branch, 1 x L
    fused: Optional[Tensor] = None    # fused embedding sequence, H x L


@dataclass
class ForwardOutput:
    x_hat: Tensor                     # decoded waveform, 1 x T'
    blocks: list[BlockOutput]
    latent_len: int


# ---------------------------------------------------------------------------
# Sub-networks
# ---------------------------------------------------------------------------

def encode_audio(p: ModelParams, y: np.ndarray | Tensor) -> Tensor:
    """Waveform (T,) -> latent H x L, L = (T - K) // S + 1."""
    t = y if isinstance(y, Tensor) else Tensor(np.asarray(y).reshape(1, -1))
    return nm.relu(nm.conv1d(t, p["audio_enc.w"], stride=p.cfg.stride))


def decode_audio(p: ModelParams, latent: Tensor) -> Tensor:
    """Latent H x L -> waveform 1 x T', T' = (L - 1) * S + K."""
    return nm.conv_transpose1d(latent, p["audio_dec.w"], stride=p.cfg.stride)


def encode_visual(p: ModelParams, frames: np.ndarray, out_len: int,
                  skip_steps: int = 0) -> Tensor:
    """Feature frames (F_v x L_frames) -> latent-rate sequence H x out_len.

    Frames are projected to H per frame and each repeated `upsample` times
    along time; `skip_steps` leading columns are dropped (the window offset
    inside its first frame) and the result is truncated or zero-padded to
    exactly out_len.
    """
    cfg = p.cfg
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] != cfg.visual_dim:
        raise AlignmentError(
            f"expected {cfg.visual_dim} feature channels, got shape {frames.shape}")
    u = cfg.upsample
    avail = frames.shape[1] * u - skip_steps
    slack = u + math.ceil(cfg.kernel / cfg.stride)
    if abs(avail - out_len) > slack:
        raise AlignmentError(
            f"visual frames cover {avail} latent steps, audio needs {out_len} "
            f"(slack {slack})")
    proj = nm.linear(Tensor(frames), p["visual.w"], p["visual.b"])
    up = nm.upsample_columns(proj, u)
    v = nm.slice_columns(up, skip_steps, skip_steps + min(out_len, avail))
    if avail < out_len:
        v = nm.pad_time(v, 0, out_len - avail, mode="zero")
    return v


def speaker_encode(p: ModelParams, r: int, x_prev: Tensor, v: Tensor) -> Tensor:
    """Fuse the running latent estimate with the visual sequence into H x 1."""
    cfg = p.cfg
    h = nm.tanh(nm.linear(nm.concat_channels(x_prev, v),
                          p[f"block{r}.spk.proj.w"], p[f"block{r}.spk.proj.b"]))
    half = (cfg.spk_kernel - 1) // 2
    for j in range(_SPK_STACK_DEPTH):
        if half:
            h = nm.pad_time(h, half, half, mode="edge")
        h = nm.tanh(nm.conv1d(h, p[f"block{r}.spk.conv{j}.w"]))
    return nm.mean_over_time(h)


def attention_scores(p: ModelParams, r: int, e_seq: Tensor, v: Tensor,
                     branch: str) -> Tensor:
    """Additive-attention score row 1 x L for one branch ("cur" or "anc").

    The visual projection is shared between branches; the embedding
    projection and the score head are per-branch.
    """
    pre = nm.add(nm.linear(e_seq, p[f"block{r}.af.embed_{branch}.w"],
                           p[f"block{r}.af.embed_{branch}.b"]),
                 nm.linear(v, p[f"block{r}.af.vis.w"], p[f"block{r}.af.vis.b"]))
    return nm.linear(nm.tanh(pre), p[f"block{r}.af.score_{branch}.w"],
                     p[f"block{r}.af.score_{branch}.b"])


def attention_weights(s_cur: Tensor, s_anc: Tensor) -> tuple[Tensor, Tensor]:
    """Two-way softmax over the score rows; sums to 1 per time step."""
    return nm.pair_softmax(s_cur, s_anc), nm.pair_softmax(s_anc, s_cur)


def fuse_embeddings(a_cur: Tensor, a_anc: Tensor, e_cur_seq: Tensor,
                    e_anc_seq: Tensor) -> Tensor:
    """Convex per-step combination of the two embedding sequences."""
    return nm.add(nm.scale_columns(e_cur_seq, a_cur), nm.scale_columns(e_anc_seq, a_anc))


def estimate_mask(p: ModelParams, r: int, y: Tensor, e_seq: Tensor) -> Tensor:
    """Nonnegative mask H x L from the mixture latent and the conditioning."""
    cfg = p.cfg
    x = nm.linear(nm.concat_channels(y, e_seq),
                  p[f"block{r}.mask.proj.w"], p[f"block{r}.mask.proj.b"])
    for d in range(cfg.tcn_depth):
        dil = 2 ** d
        branch = nm.tanh(nm.conv1d(nm.pad_time(x, dil, dil, mode="zero"),
                                   p[f"block{r}.mask.tcn{d}.w"], dilation=dil))
        x = nm.add(x, branch)
    return nm.relu(nm.linear(x, p[f"block{r}.mask.out.w"], p[f"block{r}.mask.out.b"]))


# ---------------------------------------------------------------------------
# Full forward pass
# ---------------------------------------------------------------------------

def forward(p: ModelParams, y: np.ndarray, frames: np.ndarray,
            anchors: Optional[list] = None, frame_skip: int = 0) -> ForwardOutput:
    """Run the whole network on one window.

    anchors: per-block stored speaker embeddings (numpy (H, 1) arrays or
    Tensors). When absent the attention fusion is bypassed and each block
    conditions on its own current embedding.
    """
    cfg = p.cfg
    y = np.asarray(y, dtype=nm.default_dtype()).reshape(-1)
    yl = encode_audio(p, y)
    n_lat = yl.data.shape[1]
    v = encode_visual(p, frames, n_lat, frame_skip)
    if anchors is not None and len(anchors) != cfg.blocks:
        raise ValueError(f"expected {cfg.blocks} anchors, got {len(anchors)}")

    x_prev = yl
    blocks: list[BlockOutput] = []
    for r in range(cfg.blocks):
        e_cur = speaker_encode(p, r, x_prev, v)
        if anchors is None:
            cond = nm.repeat_columns(e_cur, n_lat)
            out = BlockOutput(latent=x_prev, e_cur=e_cur)
        else:
            e_cur_seq = nm.repeat_columns(e_cur, n_lat)
            e_anc_seq = nm.repeat_columns(nm.as_tensor(anchors[r]), n_lat)
            s_cur = attention_scores(p, r, e_cur_seq, v, "cur")
            s_anc = attention_scores(p, r, e_anc_seq, v, "anc")
            a_cur, a_anc = attention_weights(s_cur, s_anc)
            cond = fuse_embeddings(a_cur, a_anc, e_cur_seq, e_anc_seq)
            out = BlockOutput(latent=x_prev, e_cur=e_cur, a_cur=a_cur,
                              a_anc=a_anc, fused=cond)
        mask = estimate_mask(p, r, yl, cond)
        x_prev = nm.mul(mask, yl)
        out.latent = x_prev
        blocks.append(out)

    return ForwardOutput(x_hat=decode_audio(p, x_prev), blocks=blocks, latent_len=n_lat)


def frame_window(frames: np.ndarray, start: int, end: int,
                 cfg: ModelConfig) -> tuple[np.ndarray, int]:
    """Visual frames whose timestamps fall inside sample span [start, end).

    Boundary frames resolve by floor on the start, ceil on the end; a single
    missing trailing frame (audio/visual rates differ by a partial frame) is
    zero-filled. Returns the frame slice and the leading latent-step skip of
    the window inside its first frame.
    """
    spf = cfg.samples_per_frame
    f0 = start // spf
    f1 = -(-end // spf)
    have = frames.shape[1]
    if f1 > have:
        if f1 - have > 1:
            raise AlignmentError(f"window needs frames up to {f1}, only {have} buffered")
        pad = np.zeros((frames.shape[0], f1 - have), dtype=frames.dtype)
        sub = np.concatenate([frames[:, f0:], pad], axis=1)
    else:
        sub = frames[:, f0:f1]
    skip = int(round((start - f0 * spf) / cfg.stride))
    return sub, skip
