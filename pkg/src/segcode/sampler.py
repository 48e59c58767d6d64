"""Fixed-length temporal sub-sampling of clips.

A clip of N frames is reduced to k frames taken every tau = N // k frames,
starting at a random offset in [1, tau]. Clips shorter than k are padded by
repeating their last frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

DEFAULT_K = 40

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 (Steele, Lea & Flood), the seeding generator used by xoshiro.

    Fully specified by the 64-bit seed, so sequences are reproducible in any
    language implementing the same three constants.
    """

    def __init__(self, seed: int = 0):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed interval [lo, hi] (rejection sampling, unbiased)."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        span = hi - lo + 1
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            r = self.next_u64()
            if r < limit:
                return lo + r % span

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]

    def fork(self) -> "SplitMix64":
        return SplitMix64(self.next_u64())


@dataclass(frozen=True)
class SampleIndices:
    k: int
    tau: int
    i_rand: int
    indices: tuple[int, ...]  # 1-based frame numbers

    def zero_based(self) -> list[int]:
        return [i - 1 for i in self.indices]


def subsample_indices(n_frames: int, k: int, rng: SplitMix64) -> SampleIndices:
    if n_frames < 1 or k < 1:
        raise ValueError(f"need N >= 1 and k >= 1, got N={n_frames}, k={k}")
    if n_frames < k:
        idx = tuple(range(1, n_frames + 1)) + (n_frames,) * (k - n_frames)
        return SampleIndices(k, 0, 1, idx)
    tau = n_frames // k
    i_rand = rng.randint(1, tau)
    return SampleIndices(k, tau, i_rand, tuple(i_rand + i * tau for i in range(k)))


def subsample_clip(frames: Sequence, k: int, rng: SplitMix64, *others: Sequence):
    """Pick k frames; every stream in ``others`` is indexed identically.

    Returns the sub-sampled ``frames`` alone, or a tuple with one entry per stream
    when ``others`` are given.
    """
    for o in others:
        if len(o) != len(frames):
            raise ValueError(f"paired streams differ in length: {len(frames)} vs {len(o)}")
    sel = subsample_indices(len(frames), k, rng).zero_based()
    picked = [[s[i] for i in sel] for s in (frames, *others)]
    return picked[0] if not others else tuple(picked)
