import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regionedit.errors import DimensionError, PlacementError
from regionedit.rope import (RopeParams, anchor_coords, grid_coords,
                             reference_coords, rope_angles, rope_rotate,
                             text_coords)
from regionedit.tensor import Tensor

PARAMS = RopeParams(head_dim=16)


def _score(q, k, qc, kc, params=PARAMS):
    qr = rope_rotate(Tensor(q[None]), np.array([qc], dtype=np.float64),
                     params).data[0]
    kr = rope_rotate(Tensor(k[None]), np.array([kc], dtype=np.float64),
                     params).data[0]
    return float(np.dot(qr.astype(np.float64), kr.astype(np.float64)))


def test_params_validation():
    with pytest.raises(DimensionError):
        RopeParams(head_dim=6)          # two axes need a multiple of 4
    with pytest.raises(DimensionError):
        RopeParams(head_dim=16, base=1.0)


def test_rotation_preserves_norm():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 12, 16)).astype(np.float32)
    coords = grid_coords(3, 4)
    y = rope_rotate(Tensor(x), coords, PARAMS).data
    assert np.allclose(np.linalg.norm(y, axis=-1),
                       np.linalg.norm(x, axis=-1), atol=1e-4)


def test_zero_coordinate_is_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 16)).astype(np.float32)
    y = rope_rotate(Tensor(x), np.zeros((1, 2)), PARAMS).data
    assert np.allclose(y, x, atol=1e-7)


@settings(max_examples=40, deadline=None)
@given(st.integers(-8, 8), st.integers(-8, 8), st.integers(-6, 6),
       st.integers(-6, 6), st.integers(0, 10 ** 6))
def test_scores_depend_only_on_relative_position(dr, dc, sr, sc, seed):
    """Shifting both tokens by the same offset leaves the score unchanged."""
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(16).astype(np.float32)
    k = rng.standard_normal(16).astype(np.float32)
    base_q, base_k = (1.0, 2.0), (1.0 + dr, 2.0 + dc)
    s1 = _score(q, k, base_q, base_k)
    s2 = _score(q, k, (base_q[0] + sr, base_q[1] + sc),
                (base_k[0] + sr, base_k[1] + sc))
    assert abs(s1 - s2) < 1e-3 * max(1.0, abs(s1))


def test_row_and_column_axes_are_independent():
    rng = np.random.default_rng(2)
    q = rng.standard_normal(16).astype(np.float32)
    k = rng.standard_normal(16).astype(np.float32)
    # moving only the row coordinate must not change column-pair angles
    c1, s1 = rope_angles(np.array([[3.0, 5.0]]), PARAMS)
    c2, s2 = rope_angles(np.array([[9.0, 5.0]]), PARAMS)
    rp = PARAMS.row_pairs
    assert np.array_equal(c1[0, rp:], c2[0, rp:])
    assert np.array_equal(s1[0, rp:], s2[0, rp:])
    assert not np.array_equal(c1[0, :rp], c2[0, :rp])


def test_angle_frequency_ladder():
    (cos, sin) = rope_angles(np.array([[1.0, 0.0]]), PARAMS)
    ang = np.arctan2(sin[0].astype(np.float64), cos[0].astype(np.float64))
    rp = PARAMS.row_pairs
    freqs = ang[:rp]
    assert np.isclose(freqs[0], 1.0, atol=1e-6)        # k=0: angle = coord
    ratios = freqs[1:] / freqs[:-1]
    assert np.allclose(ratios, ratios[0], atol=1e-6)   # geometric ladder
    assert np.allclose(ang[rp:], 0.0, atol=1e-9)       # col coord is 0


def test_grid_coords_layout():
    g = grid_coords(2, 3)
    want = np.array([[0, 0], [0, 1], [0, 2], [1, 0], [1, 1], [1, 2]],
                    dtype=np.float64)
    assert np.array_equal(g, want)
    with pytest.raises(DimensionError):
        grid_coords(0, 3)


def test_anchor_coords_scale_and_overlap():
    a = anchor_coords(2, 2, rho=4.0)
    assert np.array_equal(a, np.array([[0, 0], [0, 4], [4, 0], [4, 4]],
                                      dtype=np.float64))
    # overlap with the image extent is intentional for anchors
    assert (a < 8).all()


def test_reference_coords_must_leave_image():
    out = reference_coords(2, 2, rho_prime=1.0, delta=(0, 10),
                           image_extent=(8, 8))
    assert (out[:, 1] >= 8).all()
    with pytest.raises(PlacementError):
        reference_coords(2, 2, rho_prime=1.0, delta=(0, 0),
                         image_extent=(8, 8))
    with pytest.raises(PlacementError):
        # scaled far lattice pulled back inside by a tiny rho_prime
        reference_coords(2, 2, rho_prime=0.1, delta=(0, 10),
                         image_extent=(8, 8))


def test_text_coords_offset_rows():
    t = text_coords(3, row_offset=12)
    assert np.array_equal(t, np.array([[12, 0], [13, 0], [14, 0]],
                                      dtype=np.float64))


def test_rope_rotate_shape_errors():
    x = Tensor(np.ones((2, 4, 16), dtype=np.float32))
    with pytest.raises(DimensionError):
        rope_rotate(x, grid_coords(2, 3), PARAMS)      # 6 coords vs 4 tokens
    with pytest.raises(DimensionError):
        rope_rotate(Tensor(np.ones((2, 4, 12), dtype=np.float32)),
                    grid_coords(2, 2), PARAMS)         # width mismatch
