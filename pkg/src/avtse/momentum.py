"""Speaker-identity memory bank.

One bank per stream: it stores one anchor embedding per refinement block
plus a fixed confidence threshold. Anchors are written once from the first
window's embeddings and afterwards replaced only when the mean attention
weight on the current branch exceeds the threshold, i.e. when the network
itself judges the fresh embedding more reliable than the stored one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class BankStateError(RuntimeError):
    """The bank was driven outside its init-then-update protocol."""


@dataclass
class UpdateDecision:
    block: int
    a_cur_mean: float
    replaced: bool


class MemoryBank:
    """R anchor embeddings plus the update threshold theta."""

    def __init__(self, theta: float, n_blocks: int):
        if not 0.0 < theta < 1.0:
            raise ValueError(f"theta must lie in (0, 1), got {theta}")
        if n_blocks < 1:
            raise ValueError(f"n_blocks must be >= 1, got {n_blocks}")
        self.theta = float(theta)
        self.n_blocks = n_blocks
        self.anchors: list[np.ndarray] | None = None
        self.last_update_step: list[int] | None = None

    @property
    def initialized(self) -> bool:
        return self.anchors is not None


def init_bank(bank: MemoryBank, embeddings: list[np.ndarray], step: int = 1) -> MemoryBank:
    """Write the first-window embeddings as the initial anchors (value copies)."""
    if bank.initialized:
        raise BankStateError("memory bank is already initialized")
    if len(embeddings) != bank.n_blocks:
        raise ValueError(f"expected {bank.n_blocks} embeddings, got {len(embeddings)}")
    bank.anchors = [np.array(e, copy=True) for e in embeddings]
    bank.last_update_step = [step] * bank.n_blocks
    return bank


def mean_attention(a_cur: np.ndarray) -> float:
    """Arithmetic mean of a 1 x L attention row."""
    a = np.asarray(a_cur)
    if a.size == 0:
        raise ValueError("empty attention row")
    return float(np.mean(a, dtype=np.float64))


def maybe_update(bank: MemoryBank, block: int, e_cur: np.ndarray,
                 a_cur_mean: float, step: int) -> UpdateDecision:
    """Replace the block's anchor iff a_cur_mean strictly exceeds theta.

    Step 1 belongs to init_bank; calling this with step < 2 is a protocol
    error. The comparison is strict, so a_cur_mean == theta keeps the anchor.
    """
    if not bank.initialized:
        raise BankStateError("memory bank not initialized")
    if step < 2:
        raise BankStateError(f"updates start at step 2, got step {step}")
    if not 0 <= block < bank.n_blocks:
        raise ValueError(f"block {block} out of range for {bank.n_blocks} blocks")
    replaced = a_cur_mean > bank.theta
    if replaced:
        bank.anchors[block] = np.array(e_cur, copy=True)
        bank.last_update_step[block] = step
    return UpdateDecision(block=block, a_cur_mean=a_cur_mean, replaced=replaced)
