"""Role-aware attention over a token grid, dense and windowed.

Token roles and who may attend to whom (query role -> visible key roles):

    NOISY     -> every role
    TEXT      -> TEXT, NOISY
    CONDITION -> CONDITION
    ANCHOR    -> ANCHOR
    CONTROL   -> CONTROL

Visibility is enforced with an additive -1e9 score bias, which drives
the post-softmax weight of a forbidden key below float32 resolution, so
isolated streams (condition, anchor, control) are bitwise independent of
everything they cannot see.

The windowed path partitions the image grid into window x window tiles
(ragged at the edges, no padding tokens). A query tile attends to its
own tile plus a halo ring of neighboring tokens; non-grid tokens (text,
anchors, control) are appended to every tile's key list and to each
other, with the role bias deciding what actually connects. Tiles can be
deactivated, in which case their queries are skipped entirely and their
output rows are zero with computed=False.

`masked_equivalent_dense` builds, by direct enumeration, the full bias
matrix under which ordinary dense attention reproduces the windowed
result row for row. It is deliberately written against the rules above
rather than against the windowed implementation, so the two paths check
each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import ContractError, DimensionError, PlanError, StalenessError
from .tensor import Tensor, add, concat_rows, gather_rows, matmul, scale as scale_op, \
    softmax_rows, transpose_last2

NEG_BIAS = np.float32(-1e9)


class TokenRole(IntEnum):
    NOISY = 0
    TEXT = 1
    CONDITION = 2
    ANCHOR = 3
    CONTROL = 4


_NUM_ROLES = 5
_ALLOW = np.zeros((_NUM_ROLES, _NUM_ROLES), dtype=bool)
_ALLOW[TokenRole.NOISY, :] = True
_ALLOW[TokenRole.TEXT, TokenRole.TEXT] = True
_ALLOW[TokenRole.TEXT, TokenRole.NOISY] = True
_ALLOW[TokenRole.CONDITION, TokenRole.CONDITION] = True
_ALLOW[TokenRole.ANCHOR, TokenRole.ANCHOR] = True
_ALLOW[TokenRole.CONTROL, TokenRole.CONTROL] = True


def _roles_array(roles) -> np.ndarray:
    arr = np.asarray(roles, dtype=np.int64)
    if arr.ndim != 1:
        raise DimensionError(f"roles must be 1-D, got {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() >= _NUM_ROLES):
        raise DimensionError("unknown role id in roles array")
    return arr


def role_allow_matrix(q_roles, k_roles) -> np.ndarray:
    """bool (m, n): True where query role may attend key role."""
    q = _roles_array(q_roles)
    k = _roles_array(k_roles)
    return _ALLOW[q[:, None], k[None, :]]


def role_bias(q_roles, k_roles) -> np.ndarray:
    """float32 (m, n) additive bias: 0 allowed, -1e9 forbidden."""
    return np.where(role_allow_matrix(q_roles, k_roles), np.float32(0), NEG_BIAS)


# -- window partition -------------------------------------------------------

@dataclass(frozen=True)
class Window:
    """One tile: interior token ids and the halo-expanded key set."""

    wid: int
    row0: int
    col0: int
    interior: np.ndarray
    keys: np.ndarray


@dataclass(frozen=True)
class AttentionPlan:
    """Static description of the tiling of a rows x cols token grid."""

    rows: int
    cols: int
    window: int
    halo: int
    windows: tuple
    active: np.ndarray
    window_of: np.ndarray = field(repr=False)

    @property
    def grid_size(self) -> int:
        return self.rows * self.cols

    @property
    def num_windows(self) -> int:
        return len(self.windows)

    def permutation(self) -> np.ndarray:
        """Grid ids reordered window-first (tile-major, row-major inside)."""
        return np.concatenate([w.interior for w in self.windows])

    def active_token_mask(self) -> np.ndarray:
        """bool (grid_size,): token sits in an active window."""
        return self.active[self.window_of]

    def with_active(self, active) -> "AttentionPlan":
        active = np.asarray(active, dtype=bool)
        if active.shape != (self.num_windows,):
            raise PlanError(
                f"active flags {active.shape} vs {self.num_windows} windows")
        return AttentionPlan(self.rows, self.cols, self.window, self.halo,
                             self.windows, active.copy(), self.window_of)


def build_window_plan(rows: int, cols: int, window: int, halo: int = 1,
                      active=None) -> AttentionPlan:
    """Tile a rows x cols grid into window x window tiles.

    Edge tiles are clipped, not padded. Key sets extend the tile rect by
    `halo` tokens on each side, clipped to the grid. `active` is an
    optional bool array over tiles; default all active.
    """
    if rows <= 0 or cols <= 0:
        raise PlanError(f"empty grid {rows}x{cols}")
    if window <= 0:
        raise PlanError(f"window must be positive, got {window}")
    if halo < 0:
        raise PlanError(f"halo must be non-negative, got {halo}")
    grid = np.arange(rows * cols, dtype=np.int64).reshape(rows, cols)
    windows = []
    window_of = np.empty(rows * cols, dtype=np.int64)
    for r0 in range(0, rows, window):
        for c0 in range(0, cols, window):
            r1 = min(r0 + window, rows)
            c1 = min(c0 + window, cols)
            interior = grid[r0:r1, c0:c1].ravel()
            kr0, kc0 = max(r0 - halo, 0), max(c0 - halo, 0)
            kr1, kc1 = min(r1 + halo, rows), min(c1 + halo, cols)
            keys = grid[kr0:kr1, kc0:kc1].ravel()
            wid = len(windows)
            windows.append(Window(wid, r0, c0, interior, keys))
            window_of[interior] = wid
    if active is None:
        flags = np.ones(len(windows), dtype=bool)
    else:
        flags = np.asarray(active, dtype=bool)
        if flags.shape != (len(windows),):
            raise PlanError(f"active flags {flags.shape} vs {len(windows)} windows")
        flags = flags.copy()
    return AttentionPlan(rows, cols, window, halo, tuple(windows), flags, window_of)


# -- dense attention --------------------------------------------------------

def _check_heads(q: Tensor, k: Tensor, v: Tensor):
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise DimensionError("attention expects (heads, tokens, dim) tensors")
    if q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise DimensionError(f"q {q.shape} vs k {k.shape}")
    if k.shape[:2] != v.shape[:2]:
        raise DimensionError(f"k {k.shape} vs v {v.shape}")


def dense_mma(q: Tensor, k: Tensor, v: Tensor, q_roles, k_roles, *,
              extra_bias=None, scale: float = None) -> Tensor:
    """Role-masked attention: q (h, m, d), k/v (h, n, d) -> (h, m, d).

    extra_bias (m, n) is added on top of the role bias; rows left with
    no visible key at all are a caller bug and raise ContractError.
    """
    _check_heads(q, k, v)
    q_roles = _roles_array(q_roles)
    k_roles = _roles_array(k_roles)
    if q_roles.size != q.shape[1] or k_roles.size != k.shape[1]:
        raise DimensionError("role arrays do not match token counts")
    bias = role_bias(q_roles, k_roles)
    if extra_bias is not None:
        extra_bias = np.asarray(extra_bias, dtype=np.float32)
        if extra_bias.shape != bias.shape:
            raise DimensionError(
                f"extra_bias {extra_bias.shape} vs scores {bias.shape}")
        bias = bias + extra_bias
    if q.shape[1] and not (bias > NEG_BIAS / 2).any(axis=1).all():
        raise ContractError("attention query with no visible keys")
    if scale is None:
        scale = 1.0 / float(np.sqrt(q.shape[2]))
    scores = scale_op(matmul(q, transpose_last2(k)), scale)
    scores = add(scores, Tensor(np.broadcast_to(bias, scores.shape).copy()))
    weights = softmax_rows(scores)
    return matmul(weights, v)


def attend(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray = None,
           scale: float = None) -> Tensor:
    """Plain scaled-dot attention with an optional additive bias."""
    _check_heads(q, k, v)
    if scale is None:
        scale = 1.0 / float(np.sqrt(q.shape[2]))
    scores = scale_op(matmul(q, transpose_last2(k)), scale)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float32)
        if bias.shape != scores.shape[1:]:
            raise DimensionError(f"bias {bias.shape} vs scores {scores.shape}")
        scores = add(scores, Tensor(np.broadcast_to(bias, scores.shape).copy()))
    return matmul(softmax_rows(scores), v)


def _grid_array(grid_id, n: int) -> np.ndarray:
    g = np.asarray(grid_id, dtype=np.int64)
    if g.shape != (n,):
        raise DimensionError(f"grid_id shape {g.shape}, expected ({n},)")
    return g


def _live_array(live, n: int) -> np.ndarray:
    if live is None:
        return np.ones(n, dtype=bool)
    lv = np.asarray(live, dtype=bool)
    if lv.shape != (n,):
        raise DimensionError(f"live shape {lv.shape}, expected ({n},)")
    return lv


def _validate_layout(roles: np.ndarray, grid: np.ndarray,
                     plan: AttentionPlan) -> np.ndarray:
    """Grid slots carry NOISY/CONDITION, off-grid slots the global roles."""
    on_grid = grid >= 0
    if on_grid.any() and grid[on_grid].max() >= plan.grid_size:
        raise PlanError("grid_id exceeds plan grid size")
    grid_roles = roles[on_grid]
    if grid_roles.size and not np.isin(
            grid_roles, (TokenRole.NOISY, TokenRole.CONDITION)).all():
        raise PlanError("on-grid tokens must be NOISY or CONDITION")
    off_roles = roles[~on_grid]
    if off_roles.size and np.isin(
            off_roles, (TokenRole.NOISY, TokenRole.CONDITION)).any():
        raise PlanError("off-grid tokens must be TEXT, ANCHOR, or CONTROL")
    return on_grid


def windowed_mma(q: Tensor, k: Tensor, v: Tensor, roles, grid_id,
                 plan: AttentionPlan, *, live=None, scale: float = None):
    """Window-scheduled role-masked attention over a mixed sequence.

    grid_id maps each token to its flat grid position, or -1 for tokens
    that live off the grid (text, anchor, control). Off-grid tokens are
    global: they key into every window and attend across the whole
    sequence under the role rules. Grid tokens attend inside their
    window's key set plus the global tokens. Queries in inactive windows
    are not computed.

    live marks dead duplicate tokens: a dead key is masked for every
    query, and dead queries are skipped like inactive-window queries.

    Returns (out, computed): out (h, n, d) with zero rows where
    computed is False.
    """
    _check_heads(q, k, v)
    n = q.shape[1]
    if k.shape[1] != n or v.shape[1] != n:
        raise DimensionError("windowed_mma is self-attention: q/k/v same length")
    roles = _roles_array(roles)
    if roles.size != n:
        raise DimensionError("roles do not match token count")
    grid = _grid_array(grid_id, n)
    lv = _live_array(live, n)
    on_grid = _validate_layout(roles, grid, plan)
    global_pos = np.flatnonzero(~on_grid)
    noisy_pos = np.flatnonzero(on_grid & (roles == TokenRole.NOISY))

    # seq positions bucketed by grid id (duplicates allowed)
    order = np.flatnonzero(on_grid)
    order = order[np.argsort(grid[order], kind="stable")]
    sorted_gid = grid[order]
    starts = np.searchsorted(sorted_gid, np.arange(plan.grid_size))
    ends = np.searchsorted(sorted_gid, np.arange(plan.grid_size), side="right")

    def positions_of(grid_ids: np.ndarray) -> np.ndarray:
        chunks = [order[starts[g]:ends[g]] for g in grid_ids]
        if not chunks:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(chunks)

    computed = np.zeros(n, dtype=bool)
    chunk_outs = []
    chunk_pos = []

    def dead_key_bias(pos: np.ndarray) -> np.ndarray:
        b = np.zeros(pos.size, dtype=np.float32)
        b[~lv[pos]] = NEG_BIAS
        return b

    for w in plan.windows:
        if not plan.active[w.wid]:
            continue
        q_pos = positions_of(w.interior)
        q_pos = q_pos[lv[q_pos]]
        if q_pos.size == 0:
            continue
        k_pos = np.concatenate([positions_of(w.keys), global_pos])
        qw = gather_rows(q, q_pos)
        kw = gather_rows(k, k_pos)
        vw = gather_rows(v, k_pos)
        bias = dead_key_bias(k_pos)[None, :]
        out_w = dense_mma(qw, kw, vw, roles[q_pos], roles[k_pos],
                          extra_bias=np.broadcast_to(bias, (q_pos.size, k_pos.size)),
                          scale=scale)
        chunk_outs.append(out_w)
        chunk_pos.append(q_pos)
        computed[q_pos] = True

    live_global = global_pos[lv[global_pos]]
    if live_global.size:
        global_pos = live_global
        k_pos = np.concatenate([global_pos, noisy_pos])
        qg = gather_rows(q, global_pos)
        kg = gather_rows(k, k_pos)
        vg = gather_rows(v, k_pos)
        bias = dead_key_bias(k_pos)[None, :]
        out_g = dense_mma(qg, kg, vg, roles[global_pos], roles[k_pos],
                          extra_bias=np.broadcast_to(bias, (global_pos.size, k_pos.size)),
                          scale=scale)
        chunk_outs.append(out_g)
        chunk_pos.append(global_pos)
        computed[global_pos] = True

    h, _, d = q.shape
    zero_row = Tensor(np.zeros((h, 1, d), dtype=np.float32))
    if chunk_outs:
        stacked = concat_rows(chunk_outs + [zero_row])
        flat_pos = np.concatenate(chunk_pos)
        zero_slot = stacked.shape[1] - 1
    else:
        stacked = zero_row
        flat_pos = np.zeros(0, dtype=np.int64)
        zero_slot = 0
    inverse = np.full(n, zero_slot, dtype=np.int64)
    inverse[flat_pos] = np.arange(flat_pos.size)
    out = gather_rows(stacked, inverse)
    return out, computed


def masked_equivalent_dense(roles, grid_id, plan: AttentionPlan, *, live=None):
    """Dense bias matrix reproducing the windowed schedule, plus row flags.

    Built by direct enumeration of the visibility rules: entry (i, j) is
    0 when query i may see key j under both the role table and the
    window structure, else -1e9. Rows whose query is skipped by the
    schedule are flagged False in `computed` (their bias row is all
    forbidden and meaningless).
    """
    roles = _roles_array(roles)
    n = roles.size
    grid = _grid_array(grid_id, n)
    lv = _live_array(live, n)
    on_grid = _validate_layout(roles, grid, plan)
    allow = role_allow_matrix(roles, roles)
    allow &= lv[None, :]

    structural = np.zeros((n, n), dtype=bool)
    computed = np.zeros(n, dtype=bool)
    key_ok = {}
    for w in plan.windows:
        in_keys = np.zeros(plan.grid_size, dtype=bool)
        in_keys[w.keys] = True
        key_ok[w.wid] = in_keys
    for i in range(n):
        if on_grid[i]:
            wid = int(plan.window_of[grid[i]])
            if not plan.active[wid]:
                continue
            computed[i] = True
            ok = key_ok[wid]
            structural[i, :] = np.where(on_grid, ok[np.clip(grid, 0, None)], True)
        else:
            computed[i] = True
            structural[i, :] = True
    computed &= lv
    allow &= structural
    bias = np.where(allow, np.float32(0), NEG_BIAS)
    return bias, computed


# -- static-token K/V cache -------------------------------------------------

class KvCache:
    """Per-layer post-rotation K/V slabs for the static token set.

    The cache remembers a fingerprint of the raw static inputs it was
    built from. Fetching with a different fingerprint raises
    StalenessError: the conditioning tokens changed and the cached
    projections no longer describe them.
    """

    def __init__(self, layers: int):
        if layers <= 0:
            raise DimensionError(f"cache needs at least one layer, got {layers}")
        self.layers = layers
        self.keys = [None] * layers
        self.values = [None] * layers
        self.fingerprint = None

    @property
    def complete(self) -> bool:
        return all(k is not None for k in self.keys)

    def invalidate(self) -> None:
        self.keys = [None] * self.layers
        self.values = [None] * self.layers
        self.fingerprint = None


def cache_condition_kv(cache: KvCache, layer: int, k: Tensor, v: Tensor,
                       fingerprint: bytes) -> None:
    """Store one layer's static K/V under the source fingerprint."""
    if not 0 <= layer < cache.layers:
        raise DimensionError(f"layer {layer} outside 0..{cache.layers - 1}")
    if k.shape != v.shape:
        raise DimensionError(f"k {k.shape} vs v {v.shape}")
    if cache.fingerprint is None:
        cache.fingerprint = bytes(fingerprint)
    elif cache.fingerprint != bytes(fingerprint):
        raise ContractError("cache built from two different static inputs")
    cache.keys[layer] = k
    cache.values[layer] = v


def fetch_condition_kv(cache: KvCache, layer: int, fingerprint: bytes):
    """Retrieve one layer's K/V, verifying the cache is not stale."""
    if not 0 <= layer < cache.layers:
        raise DimensionError(f"layer {layer} outside 0..{cache.layers - 1}")
    if cache.keys[layer] is None:
        raise StalenessError(f"cache layer {layer} was never filled")
    if cache.fingerprint != bytes(fingerprint):
        raise StalenessError(
            "static tokens changed after the cache was built; rebuild it")
    return cache.keys[layer], cache.values[layer]


# -- analytic cost model ----------------------------------------------------

_FLOPS_PER_ENTRY_PER_DIM = 4   # qk dot and weighted sum, mul+add each
_FLOPS_PER_ENTRY_FIXED = 8     # scale, bias, max-shift, exp, normalize


def _entry_cost(head_dim: int) -> int:
    return _FLOPS_PER_ENTRY_PER_DIM * head_dim + _FLOPS_PER_ENTRY_FIXED


def flop_count(plan: AttentionPlan, head_dim: int, heads: int,
               n_global: int = 0, dense: bool = False) -> int:
    """Analytic FLOPs of grid-query attention under the plan.

    Counts score/weight entries (query, key) over active-window queries
    and multiplies by an exact per-entry cost, so ratios between two
    schedules reduce to ratios of entry counts in integer arithmetic.
    Windowed: each active tile's interior attends its key set plus
    n_global appended keys. Dense: the same queries attend the full grid
    plus n_global. One grid token per position is assumed.
    """
    if head_dim <= 0 or heads <= 0:
        raise DimensionError("head_dim and heads must be positive")
    entries = 0
    for w in plan.windows:
        if not plan.active[w.wid]:
            continue
        m = int(w.interior.size)
        if dense:
            entries += m * (plan.grid_size + n_global)
        else:
            entries += m * (int(w.keys.size) + n_global)
    return entries * _entry_cost(head_dim) * heads
