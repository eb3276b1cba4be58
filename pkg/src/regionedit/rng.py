"""Counter-based random number generation.

All randomness in the package flows through `Rng`, a thin wrapper around
numpy's Philox bit generator keyed by (seed, stream). Philox is a
counter-based generator: the output depends only on the 128-bit key and
the counter position, so independent streams never overlap and the full
state can be captured and restored exactly for bitwise-reproducible
resume.

Convention for stream ids: 0 model init, 1 training loop, 2 dataset
synthesis, 3 sampling noise, 4+ scratch. Callers construct one Rng per
concern instead of sharing a global generator.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError

_MASK64 = (1 << 64) - 1


class Rng:
    """Deterministic random stream identified by (seed, stream).

    Draw methods return float32 arrays so downstream tensors never see a
    silent float64 upcast.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)
        self._gen = np.random.Generator(self._bitgen)

    def spawn(self, stream: int) -> "Rng":
        """Fresh generator with the same seed on a different stream."""
        return Rng(self.seed, stream)

    def normal(self, shape=(), loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        out = self._gen.standard_normal(shape, dtype=np.float32)
        if scale != 1.0:
            out = out * np.float32(scale)
        if loc != 0.0:
            out = out + np.float32(loc)
        return out

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        out = self._gen.random(shape, dtype=np.float32)
        if low != 0.0 or high != 1.0:
            out = out * np.float32(high - low) + np.float32(low)
        return out

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=shape)

    def shuffle(self, n: int) -> np.ndarray:
        """Random permutation of range(n)."""
        return self._gen.permutation(n)

    # -- exact state capture ------------------------------------------------

    def get_state(self) -> dict:
        """JSON-serializable snapshot of the full generator state."""
        st = self._bitgen.state
        return {
            "seed": self.seed,
            "stream": self.stream,
            "counter": [int(x) for x in st["state"]["counter"]],
            "key": [int(x) for x in st["state"]["key"]],
            "buffer": [int(x) for x in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, snap: dict) -> None:
        try:
            st = self._bitgen.state
            st["state"]["counter"] = np.array(snap["counter"], dtype=np.uint64)
            st["state"]["key"] = np.array(snap["key"], dtype=np.uint64)
            st["buffer"] = np.array(snap["buffer"], dtype=np.uint64)
            st["buffer_pos"] = int(snap["buffer_pos"])
            st["has_uint32"] = int(snap["has_uint32"])
            st["uinteger"] = int(snap["uinteger"])
            self._bitgen.state = st
            self.seed = int(snap["seed"])
            self.stream = int(snap["stream"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed rng state snapshot: {exc}") from exc
