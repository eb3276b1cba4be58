"""Two-axis rotary position embeddings over a token grid.

Each attention head dimension is split into row pairs and column pairs.
A token at (row, col) rotates its row pairs by angles proportional to
`row` and its column pairs by angles proportional to `col`, with the
usual geometric frequency ladder. Rotations are norm-preserving and the
score between two rotated vectors depends only on their coordinate
difference, which is what makes reusing one attention stack across
resolutions workable.

Coordinates are real-valued, so auxiliary token groups can be placed on
scaled or offset lattices:

* low-resolution anchor tokens sit on (rho*m, rho*n), deliberately
  interleaved with the image extent so each anchor lands on the patch
  of full-resolution tokens it summarizes;
* reference and control groups sit on rho_prime*((m, n) + delta), and
  must land entirely outside the image extent; a collision raises
  PlacementError.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, PlacementError
from .tensor import Tensor, rotate_pairs


@dataclass(frozen=True)
class RopeParams:
    """Frequency layout for one head dimension."""

    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim % 4:
            raise DimensionError(
                f"head_dim must be divisible by 4 for two axes, got {self.head_dim}")
        if self.base <= 1.0:
            raise DimensionError(f"rope base must exceed 1, got {self.base}")

    @property
    def pairs(self) -> int:
        return self.head_dim // 2

    @property
    def row_pairs(self) -> int:
        return self.pairs // 2

    @property
    def col_pairs(self) -> int:
        return self.pairs - self.row_pairs


def _axis_freqs(pairs: int, base: float) -> np.ndarray:
    return base ** (-np.arange(pairs, dtype=np.float64) / pairs)


def rope_angles(coords: np.ndarray, params: RopeParams):
    """coords (n, 2) -> (cos, sin), each (n, head_dim/2) float32.

    Pair k < row_pairs rotates by coords[:, 0] * freq_row[k]; the
    remaining pairs rotate by coords[:, 1] * freq_col[k].
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DimensionError(f"coords must be (n, 2), got {coords.shape}")
    ang_r = coords[:, :1] * _axis_freqs(params.row_pairs, params.base)
    ang_c = coords[:, 1:] * _axis_freqs(params.col_pairs, params.base)
    ang = np.concatenate([ang_r, ang_c], axis=1)
    return np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)


def rope_rotate(x: Tensor, coords: np.ndarray, params: RopeParams) -> Tensor:
    """Rotate head vectors x (h, n, d) or (n, d) by grid coordinates."""
    if x.shape[-1] != params.head_dim:
        raise DimensionError(
            f"rope_rotate: width {x.shape[-1]} vs head_dim {params.head_dim}")
    if x.shape[-2] != len(coords):
        raise DimensionError(
            f"rope_rotate: {x.shape[-2]} tokens vs {len(coords)} coords")
    cos, sin = rope_angles(coords, params)
    return rotate_pairs(x, cos, sin)


def grid_coords(rows: int, cols: int) -> np.ndarray:
    """Row-major (rows*cols, 2) integer lattice as float64."""
    if rows <= 0 or cols <= 0:
        raise DimensionError(f"empty grid {rows}x{cols}")
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([r.ravel(), c.ravel()], axis=1).astype(np.float64)


def anchor_coords(rows: int, cols: int, rho: float = 4.0) -> np.ndarray:
    """Coordinates (rho*m, rho*n) for a low-resolution anchor grid.

    The anchors overlap the image extent on purpose: anchor (m, n)
    shares its position with the top-left of the rho x rho patch of
    full-resolution tokens it corresponds to.
    """
    if rho <= 0:
        raise PlacementError(f"rho must be positive, got {rho}")
    return grid_coords(rows, cols) * float(rho)


def reference_coords(rows: int, cols: int, rho_prime: float,
                     delta: tuple, image_extent: tuple) -> np.ndarray:
    """Coordinates rho_prime*((m, n) + delta) for an off-image group.

    image_extent is the (rows, cols) size of the image lattice, which
    occupies [0, rows) x [0, cols). Every produced coordinate must fall
    outside that rectangle; otherwise PlacementError.
    """
    if rho_prime <= 0:
        raise PlacementError(f"rho_prime must be positive, got {rho_prime}")
    dr, dc = float(delta[0]), float(delta[1])
    coords = (grid_coords(rows, cols) + np.array([dr, dc])) * float(rho_prime)
    h, w = image_extent
    inside = ((coords[:, 0] >= 0) & (coords[:, 0] < h)
              & (coords[:, 1] >= 0) & (coords[:, 1] < w))
    if inside.any():
        k = int(np.argmax(inside))
        raise PlacementError(
            f"reference coordinate {tuple(coords[k])} collides with image "
            f"extent {h}x{w}; adjust delta or rho_prime")
    return coords


def text_coords(count: int, row_offset: float) -> np.ndarray:
    """Sequential coordinates (row_offset + i, 0) for text tokens."""
    if count < 0:
        raise DimensionError(f"negative text length {count}")
    out = np.zeros((count, 2), dtype=np.float64)
    out[:, 0] = row_offset + np.arange(count)
    return out
