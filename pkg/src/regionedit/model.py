"""Windowed diffusion transformer over mixed token roles.

The sequence is laid out [text, image, anchors, control]. The image
section carries one token per grid position: a noisy token inside the
edit mask, a clean condition token outside. Anchors are tokens of the
low-resolution proxy image; the optional control group carries a
patchified control map placed off-grid.

The forward pass is split into two lanes that together implement the
role visibility rules:

* the static lane processes text, condition, anchor, and control
  tokens. None of these roles may see a noisy token (text is restricted
  to text here, see below), so the lane is independent of the sampling
  timestep and of the evolving latent. It runs once per edit; its
  per-layer post-rotation K/V are cached and reused by every sampling
  step. Condition tokens participate only inside active windows;
  condition tokens of inactive windows pass through unchanged.
* the noisy lane processes the noisy tokens. A noisy query sees
  everything: its window's image keys (fresh noisy keys plus cached
  condition keys), and the text/anchor/control keys appended globally.
  It runs every step.

Restricting text queries to text keys (rather than text plus noisy) is
what makes the static lane timestep-invariant and the cache exact; the
noisy tokens still read the text every layer, so conditioning flows in
the direction that matters.

Modulation is adaptive layer norm: each block learns a zero-initialized
projection from a conditioning vector to six per-channel vectors
(shift, scale, gate for attention and MLP halves). The noisy lane
conditions on an embedded timestep; the static lane conditions on a
fixed null vector. Zero init makes every block the identity at start.

Attention and MLP base weights are frozen; only LoRA factors (rank r,
scaling alpha/r, B zero-initialized), modulation, embeddings, and the
output head train.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .attention import (AttentionPlan, KvCache, TokenRole, attend,
                        build_window_plan, cache_condition_kv,
                        fetch_condition_kv)
from .errors import (ConfigError, ContractError, DimensionError,
                     DivergenceError, FormatError)
from .hten import read_hten, write_hten
from .rng import Rng
from .rope import (RopeParams, anchor_coords, grid_coords, reference_coords,
                   rope_rotate, text_coords)
from .tensor import (Tensor, add, add_const, concat_rows, from_heads,
                     gather_rows, index_add_rows, matmul, mean_all, mul,
                     rms_normalize, rotate_pairs, scale, silu, slice_cols, sub,
                     to_heads)

NEG = np.float32(-1e9)


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    heads: int = 4
    head_dim: int = 32
    text_vocab: int = 32
    lora_rank: int = 16
    lora_alpha: float = None
    mlp_ratio: int = 4
    patch: int = 16
    window: int = 16
    halo: int = 1
    rope_base: float = 10000.0
    anchor_rho: float = 4.0
    control_rho: float = 1.0
    freeze_base: bool = True
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.layers <= 0 or self.heads <= 0:
            raise ConfigError("layers and heads must be positive")
        if self.head_dim % 4:
            raise ConfigError(f"head_dim must be divisible by 4, got {self.head_dim}")
        if not 1 <= self.lora_rank <= self.token_dim:
            raise ConfigError(
                f"lora_rank must lie in [1, {self.token_dim}], got {self.lora_rank}")
        if self.lora_alpha is not None and self.lora_alpha <= 0:
            raise ConfigError(f"lora_alpha must be positive, got {self.lora_alpha}")
        if self.text_vocab <= 0 or self.patch <= 0 or self.window <= 0:
            raise ConfigError("text_vocab, patch, window must be positive")
        if self.halo < 0:
            raise ConfigError(f"halo must be non-negative, got {self.halo}")

    @property
    def token_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def patch_channels(self) -> int:
        return self.patch * self.patch * 3

    @property
    def mlp_dim(self) -> int:
        return self.mlp_ratio * self.token_dim

    @property
    def lora_scaling(self) -> float:
        alpha = self.lora_rank if self.lora_alpha is None else self.lora_alpha
        return float(alpha) / float(self.lora_rank)

    @property
    def rope(self) -> RopeParams:
        return RopeParams(self.head_dim, self.rope_base)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            out[f.name] = getattr(self, f.name)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown model config keys: {sorted(bad)}")
        return cls(**d)


@dataclass(frozen=True)
class BlockParams:
    """Weight views for one transformer block."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    lora: dict
    mlp_w1: Tensor
    mlp_w2: Tensor
    mod_w: Tensor
    mod_b: Tensor


def lora_apply(x: Tensor, base: Tensor, a: Tensor, b: Tensor,
               scaling: float) -> Tensor:
    """x @ base + scaling * ((x @ a) @ b).

    With b still at its zero init the update term is exactly zero and
    the result equals the frozen projection bit for bit.
    """
    main = matmul(x, base)
    update = matmul(matmul(x, a), b)
    return add(main, scale(update, scaling))


class Model:
    """Parameter store plus the two-lane forward."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}
        self._init_params(Rng(seed, 0))

    # -- parameters ---------------------------------------------------------

    def _param(self, name: str, data: np.ndarray, trainable: bool = True):
        self.params[name] = Tensor(data, requires_grad=trainable)

    def _init_params(self, rng: Rng) -> None:
        cfg = self.config
        d, c, f = cfg.token_dim, cfg.patch_channels, cfg.mlp_dim
        r = cfg.lora_rank
        train_base = not cfg.freeze_base
        self._param("text_embed", rng.normal((cfg.text_vocab, d), scale=0.02))
        self._param("proj_in_w", rng.normal((c, d), scale=c ** -0.5))
        self._param("proj_in_b", np.zeros(d, dtype=np.float32))
        self._param("t_w1", rng.normal((d, d), scale=d ** -0.5))
        self._param("t_b1", np.zeros(d, dtype=np.float32))
        self._param("t_w2", rng.normal((d, d), scale=d ** -0.5))
        self._param("t_b2", np.zeros(d, dtype=np.float32))
        for i in range(cfg.layers):
            for side in ("q", "k", "v", "o"):
                self._param(f"blk{i}_w{side}", rng.normal((d, d), scale=d ** -0.5),
                            trainable=train_base)
                self._param(f"blk{i}_l{side}_a", rng.normal((d, r), scale=d ** -0.5))
                self._param(f"blk{i}_l{side}_b", np.zeros((r, d), dtype=np.float32))
            self._param(f"blk{i}_mlp_w1", rng.normal((d, f), scale=d ** -0.5),
                        trainable=train_base)
            self._param(f"blk{i}_mlp_w2", rng.normal((f, d), scale=f ** -0.5),
                        trainable=train_base)
            self._param(f"blk{i}_mod_w", np.zeros((d, 6 * d), dtype=np.float32))
            self._param(f"blk{i}_mod_b", np.zeros(6 * d, dtype=np.float32))
        self._param("fmod_w", np.zeros((d, 2 * d), dtype=np.float32))
        self._param("fmod_b", np.zeros(2 * d, dtype=np.float32))
        self._param("head_w", np.zeros((d, c), dtype=np.float32))
        self._param("head_b", np.zeros(c, dtype=np.float32))

    def block(self, i: int) -> BlockParams:
        p = self.params
        lora = {side: (p[f"blk{i}_l{side}_a"], p[f"blk{i}_l{side}_b"])
                for side in ("q", "k", "v", "o")}
        return BlockParams(p[f"blk{i}_wq"], p[f"blk{i}_wk"], p[f"blk{i}_wv"],
                           p[f"blk{i}_wo"], lora, p[f"blk{i}_mlp_w1"],
                           p[f"blk{i}_mlp_w2"], p[f"blk{i}_mod_w"],
                           p[f"blk{i}_mod_b"])

    def trainable(self) -> dict:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- small forward pieces ----------------------------------------------

    def _proj(self, blk: BlockParams, side: str, x: Tensor) -> Tensor:
        base = {"q": blk.wq, "k": blk.wk, "v": blk.wv, "o": blk.wo}[side]
        a, b = blk.lora[side]
        return lora_apply(x, base, a, b, self.config.lora_scaling)

    def time_features(self, t: float) -> np.ndarray:
        """Sinusoidal features of t in [0, 1]; row vector (1, token_dim)."""
        d = self.config.token_dim
        half = d // 2
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
        ang = 1000.0 * float(t) * freqs
        feat = np.concatenate([np.cos(ang), np.sin(ang)]).astype(np.float32)
        return feat[None, :]

    def condition_vector(self, t) -> Tensor:
        """Embed timestep features through the conditioning MLP.

        t None is the null conditioning used by the static lane: the
        all-zero feature vector, which no real timestep produces.
        """
        p = self.params
        if t is None:
            feat = np.zeros((1, self.config.token_dim), dtype=np.float32)
        else:
            feat = self.time_features(t)
        h = add(matmul(Tensor(feat), p["t_w1"]), p["t_b1"])
        return add(matmul(silu(h), p["t_w2"]), p["t_b2"])

    def _modulation(self, blk: BlockParams, cond: Tensor):
        d = self.config.token_dim
        mods = add(matmul(cond, blk.mod_w), blk.mod_b)
        return [slice_cols(mods, i * d, (i + 1) * d) for i in range(6)]

    def _final_modulation(self, cond: Tensor):
        d = self.config.token_dim
        p = self.params
        mods = add(matmul(cond, p["fmod_w"]), p["fmod_b"])
        return slice_cols(mods, 0, d), slice_cols(mods, d, 2 * d)

    def _modulate(self, x: Tensor, shift: Tensor, scale_vec: Tensor) -> Tensor:
        return add(mul(x, add_const(scale_vec, 1.0)), shift)

    def embed_patches(self, raw: np.ndarray) -> Tensor:
        p = self.params
        if raw.ndim != 2 or raw.shape[1] != self.config.patch_channels:
            raise DimensionError(
                f"patch rows {raw.shape} vs channels {self.config.patch_channels}")
        return add(matmul(Tensor(np.asarray(raw, dtype=np.float32)),
                          p["proj_in_w"]), p["proj_in_b"])

    def embed_text(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.text_vocab):
            raise ConfigError(
                f"text id outside vocab of {self.config.text_vocab}")
        return gather_rows(self.params["text_embed"], ids)


# -- sequence assembly ------------------------------------------------------

@dataclass
class AssembledSequence:
    """Token layout [text, image, anchors, control] plus precomputed
    lane indexing for the static and noisy passes.

    With integration on, the image section holds one row per grid
    position. With integration off, both streams are carried: a
    condition copy and a noisy copy for every position, with the
    redundant copy (condition inside the mask, noisy outside) marked
    dead. Dead rows are projected every layer like the naive layout
    would, but never attended to and never updated, so outputs match
    the integrated path while the cost does not.
    """

    config: ModelConfig
    rows: int
    cols: int
    plan: AttentionPlan
    ti: bool
    text_ids: np.ndarray
    source_tokens: np.ndarray
    noisy_init: np.ndarray
    token_mask: np.ndarray
    anchor_tokens: np.ndarray
    control_tokens: np.ndarray
    roles: np.ndarray
    grid_id: np.ndarray
    coords: np.ndarray
    live: np.ndarray
    # static lane
    coords_s: np.ndarray
    static_roles: np.ndarray
    static_attn_groups: list
    static_computed: np.ndarray
    cond_s_of_grid: np.ndarray
    # noisy lane
    coords_n: np.ndarray
    noisy_live: np.ndarray
    live_noisy: np.ndarray
    noisy_of_grid: np.ndarray
    noisy_attn_groups: list
    noisy_inverse: np.ndarray
    dense_keys: np.ndarray
    dense_bias: np.ndarray
    all_noisy_live: bool
    _trig_s: tuple = field(default=None, repr=False)
    _trig_n: tuple = field(default=None, repr=False)

    @property
    def num_live_noisy(self) -> int:
        return int(self.live_noisy.size)

    @property
    def static_size(self) -> int:
        return int(self.coords_s.shape[0])

    def fingerprint(self) -> bytes:
        """Digest of everything the static lane's output depends on."""
        h = hashlib.blake2b(digest_size=16)
        cfg = self.config
        h.update(f"v1|{cfg.layers}|{cfg.heads}|{cfg.head_dim}|{cfg.window}|"
                 f"{cfg.halo}|{cfg.rope_base}|{cfg.anchor_rho}|"
                 f"{cfg.control_rho}|{int(self.ti)}|{self.rows}x{self.cols}"
                 .encode())
        h.update(np.ascontiguousarray(self.text_ids).tobytes())
        h.update(np.ascontiguousarray(self.source_tokens).tobytes())
        h.update(np.ascontiguousarray(self.anchor_tokens).tobytes())
        h.update(np.ascontiguousarray(self.control_tokens).tobytes())
        h.update(np.ascontiguousarray(self.token_mask).tobytes())
        h.update(np.ascontiguousarray(self.plan.active).tobytes())
        return h.digest()

    def trig_static(self, rope: RopeParams):
        if self._trig_s is None:
            from .rope import rope_angles
            self._trig_s = rope_angles(self.coords_s, rope)
        return self._trig_s

    def trig_noisy(self, rope: RopeParams):
        if self._trig_n is None:
            from .rope import rope_angles
            self._trig_n = rope_angles(self.coords_n, rope)
        return self._trig_n


def assemble_sequence(config: ModelConfig, text_ids, source_tokens,
                      noisy_init, token_mask, anchor_tokens, *,
                      control_tokens=None, active=None,
                      ti: bool = True, rows: int = None,
                      cols: int = None) -> AssembledSequence:
    """Lay out the full token sequence and precompute lane indexing.

    source_tokens and noisy_init are (N, C) over the same rows x cols
    grid; token_mask picks which positions are generated. anchor_tokens
    are the patchified proxy (anchor_rho times coarser per side).
    `active` overrides window activation (default: windows touching the
    mask). Raises ContractError if the activation fails to cover the
    mask.
    """
    cfg = config
    text_ids = np.asarray(text_ids, dtype=np.int64).ravel()
    source_tokens = np.asarray(source_tokens, dtype=np.float32)
    noisy_init = np.asarray(noisy_init, dtype=np.float32)
    token_mask = np.asarray(token_mask, dtype=bool).ravel()
    anchor_tokens = np.asarray(anchor_tokens, dtype=np.float32)
    if rows is None or cols is None:
        raise ConfigError("assemble_sequence needs explicit rows and cols")
    n = rows * cols
    c = cfg.patch_channels
    if source_tokens.shape != (n, c):
        raise DimensionError(
            f"source tokens {source_tokens.shape}, expected ({n}, {c})")
    if noisy_init.shape != (n, c):
        raise DimensionError(
            f"noisy init {noisy_init.shape}, expected ({n}, {c})")
    if token_mask.shape != (n,):
        raise DimensionError(f"token mask {token_mask.shape}, expected ({n},)")
    rho = cfg.anchor_rho
    if rho != int(rho) or rows % int(rho) or cols % int(rho):
        raise ConfigError(
            f"anchor_rho {rho} must be an integer divisor of {rows}x{cols}")
    a_rows, a_cols = rows // int(rho), cols // int(rho)
    if anchor_tokens.shape != (a_rows * a_cols, c):
        raise DimensionError(
            f"anchor tokens {anchor_tokens.shape}, expected ({a_rows * a_cols}, {c})")
    if control_tokens is None:
        control_tokens = np.zeros((0, c), dtype=np.float32)
    else:
        control_tokens = np.asarray(control_tokens, dtype=np.float32)
        if control_tokens.shape != (n, c):
            raise DimensionError(
                f"control tokens {control_tokens.shape}, expected ({n}, {c})")

    plan = build_window_plan(rows, cols, cfg.window, cfg.halo)
    if active is None:
        from .region import mask_to_windows
        active = mask_to_windows(token_mask.reshape(rows, cols), plan)
    plan = plan.with_active(active)
    covered = plan.active_token_mask()
    if (token_mask & ~covered).any():
        raise ContractError("active windows do not cover the edit mask")

    lt = text_ids.size
    grid = grid_coords(rows, cols)
    a_coords = anchor_coords(a_rows, a_cols, rho)
    has_control = control_tokens.shape[0] > 0
    ctl_coords = (reference_coords(rows, cols, cfg.control_rho, (0.0, float(cols)),
                                   (rows, cols))
                  if has_control else np.zeros((0, 2)))
    txt_coords = text_coords(lt, float(rows) + 4.0)

    # full-sequence layout
    if ti:
        img_roles = np.where(token_mask, np.int64(TokenRole.NOISY),
                             np.int64(TokenRole.CONDITION))
        img_grid = np.arange(n, dtype=np.int64)
        img_coords = grid
        img_live = np.ones(n, dtype=bool)
    else:
        img_roles = np.concatenate([
            np.full(n, TokenRole.CONDITION, dtype=np.int64),
            np.full(n, TokenRole.NOISY, dtype=np.int64)])
        img_grid = np.concatenate([np.arange(n), np.arange(n)]).astype(np.int64)
        img_coords = np.concatenate([grid, grid], axis=0)
        img_live = np.concatenate([~token_mask, token_mask])
    n_img = img_roles.size
    na, nc = a_coords.shape[0], ctl_coords.shape[0]
    roles = np.concatenate([
        np.full(lt, TokenRole.TEXT, dtype=np.int64), img_roles,
        np.full(na, TokenRole.ANCHOR, dtype=np.int64),
        np.full(nc, TokenRole.CONTROL, dtype=np.int64)])
    grid_id = np.concatenate([
        np.full(lt, -1, dtype=np.int64), img_grid,
        np.full(na + nc, -1, dtype=np.int64)])
    coords = np.concatenate([txt_coords, img_coords, a_coords, ctl_coords], axis=0)
    live = np.ones(roles.size, dtype=bool)
    live[lt:lt + n_img] = img_live

    # static lane: text, condition copies (grid order), anchors, control
    if ti:
        cond_grid = np.flatnonzero(~token_mask)
    else:
        cond_grid = np.arange(n, dtype=np.int64)
    n_cond = cond_grid.size
    cond_s_of_grid = np.full(n, -1, dtype=np.int64)
    cond_s_of_grid[cond_grid] = lt + np.arange(n_cond)
    cond_live_grid = ~token_mask  # condition copy is live off the mask
    text_s = np.arange(lt, dtype=np.int64)
    anchor_s = lt + n_cond + np.arange(na, dtype=np.int64)
    control_s = lt + n_cond + na + np.arange(nc, dtype=np.int64)
    coords_s = np.concatenate(
        [txt_coords, grid[cond_grid], a_coords, ctl_coords], axis=0)
    static_roles = np.concatenate([
        np.full(lt, TokenRole.TEXT, dtype=np.int64),
        np.full(n_cond, TokenRole.CONDITION, dtype=np.int64),
        np.full(na, TokenRole.ANCHOR, dtype=np.int64),
        np.full(nc, TokenRole.CONTROL, dtype=np.int64)])

    static_groups = []
    computed_parts = []
    for idx in (text_s, anchor_s, control_s):
        if idx.size:
            static_groups.append((idx, idx))
            computed_parts.append(idx)
    live_cond_of_grid = np.full(n, -1, dtype=np.int64)
    ok = cond_live_grid & (cond_s_of_grid >= 0)
    live_cond_of_grid[ok] = cond_s_of_grid[ok]
    for w in plan.windows:
        if not plan.active[w.wid]:
            continue
        q_idx = live_cond_of_grid[w.interior]
        q_idx = q_idx[q_idx >= 0]
        if q_idx.size == 0:
            continue
        k_idx = live_cond_of_grid[w.keys]
        k_idx = k_idx[k_idx >= 0]
        static_groups.append((q_idx, k_idx))
        computed_parts.append(q_idx)
    static_computed = (np.concatenate(computed_parts) if computed_parts
                       else np.zeros(0, dtype=np.int64))

    # noisy lane: noisy copies in grid order
    if ti:
        noisy_grid = np.flatnonzero(token_mask)
        noisy_live_flags = np.ones(noisy_grid.size, dtype=bool)
    else:
        noisy_grid = np.arange(n, dtype=np.int64)
        noisy_live_flags = token_mask.copy()
    mn = noisy_grid.size
    noisy_of_grid = np.full(n, -1, dtype=np.int64)
    noisy_of_grid[noisy_grid] = np.arange(mn)
    coords_n = grid[noisy_grid]
    live_noisy = np.flatnonzero(noisy_live_flags)
    s_total = coords_s.shape[0]

    # combined key index space: noisy lane rows then static lane rows
    def live_image_keys(grid_ids: np.ndarray) -> np.ndarray:
        keys = np.where(token_mask[grid_ids], noisy_of_grid[grid_ids],
                        mn + cond_s_of_grid[grid_ids])
        return keys.astype(np.int64)

    global_keys = mn + np.concatenate([text_s, anchor_s, control_s])
    noisy_groups = []
    q_order_parts = []
    live_noisy_of_grid = np.full(n, -1, dtype=np.int64)
    live_noisy_of_grid[noisy_grid[noisy_live_flags]] = \
        noisy_of_grid[noisy_grid[noisy_live_flags]]
    for w in plan.windows:
        if not plan.active[w.wid]:
            continue
        q_idx = live_noisy_of_grid[w.interior]
        q_idx = q_idx[q_idx >= 0]
        if q_idx.size == 0:
            continue
        k_idx = np.concatenate([live_image_keys(w.keys), global_keys])
        noisy_groups.append((q_idx, k_idx))
        q_order_parts.append(q_idx)
    if q_order_parts:
        q_order = np.concatenate(q_order_parts)
    else:
        q_order = np.zeros(0, dtype=np.int64)
    if q_order.size != live_noisy.size:
        raise ContractError("window schedule lost noisy queries")
    noisy_inverse = np.empty(live_noisy.size, dtype=np.int64)
    # q_order lists noisy-lane rows window-first; invert to lane order
    rank_of_row = {int(r): i for i, r in enumerate(q_order)}
    for out_i, row in enumerate(live_noisy):
        noisy_inverse[out_i] = rank_of_row[int(row)]

    all_grid = np.arange(n, dtype=np.int64)
    dense_keys = np.concatenate([live_image_keys(all_grid), global_keys])
    n_keys = dense_keys.size
    key_of_window = np.zeros((plan.num_windows, n), dtype=bool)
    for w in plan.windows:
        key_of_window[w.wid, w.keys] = True
    m_live = live_noisy.size
    dense_bias = np.zeros((m_live, n_keys), dtype=np.float32)
    live_grid_pos = noisy_grid[noisy_live_flags]
    for qi, g in enumerate(live_grid_pos):
        wid = int(plan.window_of[g])
        allowed_img = key_of_window[wid]
        dense_bias[qi, :n] = np.where(allowed_img, np.float32(0), NEG)

    return AssembledSequence(
        config=cfg, rows=rows, cols=cols, plan=plan, ti=ti,
        text_ids=text_ids, source_tokens=source_tokens,
        noisy_init=noisy_init[noisy_grid], token_mask=token_mask,
        anchor_tokens=anchor_tokens, control_tokens=control_tokens,
        roles=roles, grid_id=grid_id, coords=coords, live=live,
        coords_s=coords_s, static_roles=static_roles,
        static_attn_groups=static_groups, static_computed=static_computed,
        cond_s_of_grid=cond_s_of_grid, coords_n=coords_n,
        noisy_live=noisy_live_flags, live_noisy=live_noisy,
        noisy_of_grid=noisy_of_grid, noisy_attn_groups=noisy_groups,
        noisy_inverse=noisy_inverse, dense_keys=dense_keys,
        dense_bias=dense_bias, all_noisy_live=bool(noisy_live_flags.all()))


# -- forward lanes ----------------------------------------------------------

def build_static_cache(model: Model, seq: AssembledSequence) -> KvCache:
    """Run the static lane once, caching post-rotation K/V per layer.

    The lane is timestep-free by construction (null conditioning vector,
    no noisy inputs), so the cache stays exact for the whole sampling
    trajectory as long as the static tokens do not change. Condition
    tokens outside active windows pass through every block unchanged;
    their K/V projections still exist so windows at the activation
    boundary can read them through the halo.
    """
    cfg = model.config
    fp = seq.fingerprint()
    cache = KvCache(cfg.layers)
    parts = []
    if seq.text_ids.size:
        parts.append(model.embed_text(seq.text_ids))
    cond_grid = np.flatnonzero(seq.cond_s_of_grid >= 0)
    order = np.argsort(seq.cond_s_of_grid[cond_grid])
    cond_rows = seq.source_tokens[cond_grid[order]]
    if cond_rows.shape[0]:
        parts.append(model.embed_patches(cond_rows))
    if seq.anchor_tokens.shape[0]:
        parts.append(model.embed_patches(seq.anchor_tokens))
    if seq.control_tokens.shape[0]:
        parts.append(model.embed_patches(seq.control_tokens))
    hs = concat_rows(parts)
    if hs.shape[0] != seq.static_size:
        raise ContractError(
            f"static lane built {hs.shape[0]} rows, expected {seq.static_size}")
    cond_vec = model.condition_vector(None)
    cos_s, sin_s = seq.trig_static(cfg.rope)
    computed = seq.static_computed
    for i in range(cfg.layers):
        blk = model.block(i)
        sh1, sc1, g1, sh2, sc2, g2 = model._modulation(blk, cond_vec)
        a = model._modulate(rms_normalize(hs, cfg.norm_eps), sh1, sc1)
        q = to_heads(model._proj(blk, "q", a), cfg.heads)
        k = to_heads(model._proj(blk, "k", a), cfg.heads)
        v = to_heads(model._proj(blk, "v", a), cfg.heads)
        qr = rotate_pairs(q, cos_s, sin_s)
        kr = rotate_pairs(k, cos_s, sin_s)
        cache_condition_kv(cache, i, kr, v, fp)
        if computed.size:
            outs = []
            for q_idx, k_idx in seq.static_attn_groups:
                outs.append(attend(gather_rows(qr, q_idx),
                                   gather_rows(kr, k_idx),
                                   gather_rows(v, k_idx)))
            merged = from_heads(concat_rows(outs))
            gated = mul(model._proj(blk, "o", merged), g1)
            hs = index_add_rows(hs, computed, gated)
            rows_mid = gather_rows(hs, computed)
            b = model._modulate(rms_normalize(rows_mid, cfg.norm_eps), sh2, sc2)
            y = matmul(silu(matmul(b, blk.mlp_w1)), blk.mlp_w2)
            hs = index_add_rows(hs, computed, mul(y, g2))
    return cache


def noisy_forward(model: Model, seq: AssembledSequence, z_live: np.ndarray,
                  t: float, cache: KvCache = None, *,
                  windowed: bool = True) -> Tensor:
    """One velocity evaluation for the live noisy tokens.

    z_live is (M, patch_channels) over the masked grid positions in
    grid order. cache None rebuilds the static lane here (that is the
    caching-off path; the rebuild is deterministic, so results are
    unchanged and only the cost moves). windowed False runs the same
    visibility as one dense attention per layer via the precomputed
    bias; outputs agree with the windowed schedule to float tolerance.

    Returns the predicted velocity, (M, patch_channels).
    """
    cfg = model.config
    if cache is None:
        cache = build_static_cache(model, seq)
    fp = seq.fingerprint()
    m = seq.num_live_noisy
    z_live = np.asarray(z_live, dtype=np.float32)
    if z_live.shape != (m, cfg.patch_channels):
        raise DimensionError(
            f"z_live {z_live.shape}, expected ({m}, {cfg.patch_channels})")
    if seq.all_noisy_live:
        raws = z_live
    else:
        raws = seq.noisy_init.copy()
        raws[seq.live_noisy] = z_live
    hn = model.embed_patches(raws)
    cond_vec = model.condition_vector(t)
    fsh, fsc = model._final_modulation(cond_vec)
    cos_n, sin_n = seq.trig_noisy(cfg.rope)
    live = seq.live_noisy
    for i in range(cfg.layers):
        blk = model.block(i)
        sh1, sc1, g1, sh2, sc2, g2 = model._modulation(blk, cond_vec)
        a = model._modulate(rms_normalize(hn, cfg.norm_eps), sh1, sc1)
        q = to_heads(model._proj(blk, "q", a), cfg.heads)
        k = to_heads(model._proj(blk, "k", a), cfg.heads)
        v = to_heads(model._proj(blk, "v", a), cfg.heads)
        qr = rotate_pairs(q, cos_n, sin_n)
        kr = rotate_pairs(k, cos_n, sin_n)
        ks, vs = fetch_condition_kv(cache, i, fp)
        k_comb = concat_rows([kr, ks])
        v_comb = concat_rows([v, vs])
        if windowed:
            outs = []
            for q_idx, key_idx in seq.noisy_attn_groups:
                outs.append(attend(gather_rows(qr, q_idx),
                                   gather_rows(k_comb, key_idx),
                                   gather_rows(v_comb, key_idx)))
            stacked = concat_rows(outs)
            merged = gather_rows(stacked, seq.noisy_inverse)
        else:
            q_live = gather_rows(qr, live)
            kd = gather_rows(k_comb, seq.dense_keys)
            vd = gather_rows(v_comb, seq.dense_keys)
            merged = attend(q_live, kd, vd, bias=seq.dense_bias)
        out = from_heads(merged)
        gated = mul(model._proj(blk, "o", out), g1)
        if seq.all_noisy_live:
            hn = add(hn, gated)
            b = model._modulate(rms_normalize(hn, cfg.norm_eps), sh2, sc2)
            y = matmul(silu(matmul(b, blk.mlp_w1)), blk.mlp_w2)
            hn = add(hn, mul(y, g2))
        else:
            hn = index_add_rows(hn, live, gated)
            rows_mid = gather_rows(hn, live)
            b = model._modulate(rms_normalize(rows_mid, cfg.norm_eps), sh2, sc2)
            y = matmul(silu(matmul(b, blk.mlp_w1)), blk.mlp_w2)
            hn = index_add_rows(hn, live, mul(y, g2))
    f = model._modulate(rms_normalize(hn, cfg.norm_eps), fsh, fsc)
    vel = add(matmul(f, model.params["head_w"]), model.params["head_b"])
    if seq.all_noisy_live:
        return vel
    return gather_rows(vel, live)


def flow_matching_loss(model: Model, seq: AssembledSequence,
                       z_live: np.ndarray, t: float, target: np.ndarray,
                       cache: KvCache = None, windowed: bool = True) -> Tensor:
    """Mean squared error between predicted and target velocity."""
    target = np.asarray(target, dtype=np.float32)
    vel = noisy_forward(model, seq, z_live, t, cache, windowed=windowed)
    if target.shape != vel.shape:
        raise DimensionError(f"target {target.shape} vs velocity {vel.shape}")
    diff = sub(vel, Tensor(target))
    return mean_all(mul(diff, diff))


# -- optimizer --------------------------------------------------------------

class AdamW:
    """Decoupled weight decay Adam over a named parameter dict."""

    def __init__(self, params: dict, lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ConfigError(f"lr must be positive, got {lr}")
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = (b1 * self.m[name] + (1.0 - b1) * g).astype(np.float32)
            self.v[name] = (b2 * self.v[name] + (1.0 - b2) * g * g).astype(np.float32)
            mh = self.m[name] / bc1
            vh = self.v[name] / bc2
            upd = self.lr * (mh / (np.sqrt(vh) + self.eps)
                             + self.weight_decay * p.data)
            p.data = (p.data - upd).astype(np.float32)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def train_step(model: Model, opt: AdamW, batch, rng: Rng, *,
               max_loss: float = 1e6) -> float:
    """One optimization step over a batch of (sequence, clean_live) pairs.

    For each sample a timestep and a noise draw are taken from rng, the
    latent is placed on the straight path between the clean target and
    the noise, and the model regresses the constant path velocity
    (noise - clean) at the live positions. Gradients accumulate across
    the batch; frozen parameters never receive any.
    """
    if not batch:
        raise ConfigError("empty training batch")
    model.zero_grad()
    total = 0.0
    inv_b = 1.0 / len(batch)
    for seq, clean_live in batch:
        clean_live = np.asarray(clean_live, dtype=np.float32)
        m = seq.num_live_noisy
        if clean_live.shape != (m, model.config.patch_channels):
            raise DimensionError(
                f"clean tokens {clean_live.shape} for {m} live positions")
        t = float(rng.uniform(()))
        noise = rng.normal(clean_live.shape)
        z = (1.0 - np.float32(t)) * clean_live + np.float32(t) * noise
        target = noise - clean_live
        loss = flow_matching_loss(model, seq, z, t, target)
        scale(loss, inv_b).backward()
        total += float(loss.data)
    mean_loss = total * inv_b
    if not np.isfinite(mean_loss) or mean_loss > max_loss:
        raise DivergenceError(f"training diverged: loss {mean_loss}")
    opt.step()
    return mean_loss


# -- checkpoints ------------------------------------------------------------

_MANIFEST_NAME = "manifest.txt"


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_typed(raw: str, typ):
    if raw == "none":
        return None
    if typ is bool:
        if raw not in ("true", "false"):
            raise FormatError(f"bad bool {raw!r}")
        return raw == "true"
    return typ(raw)


def save_checkpoint(path, model: Model, opt: AdamW = None, step: int = 0,
                    rng_states: dict = None) -> None:
    """Write manifest, parameter tensors, optimizer state, rng snapshot.

    Everything needed to resume bit for bit: float32 tensors go to flat
    binary files, scalar state to a key=value manifest, generator
    counters to a JSON sidecar.
    """
    root = Path(path)
    (root / "params").mkdir(parents=True, exist_ok=True)
    lines = ["format=1", f"step={int(step)}", f"seed={model.seed}"]
    for key, val in model.config.to_dict().items():
        lines.append(f"model.{key}={_format_value(val)}")
    if opt is not None:
        (root / "opt").mkdir(exist_ok=True)
        lines += [f"opt.lr={opt.lr}", f"opt.beta1={opt.beta1}",
                  f"opt.beta2={opt.beta2}", f"opt.eps={opt.eps}",
                  f"opt.weight_decay={opt.weight_decay}", f"opt.t={opt.t}"]
        for name in opt.params:
            write_hten(root / "opt" / f"{name}.m.hten", opt.m[name])
            write_hten(root / "opt" / f"{name}.v.hten", opt.v[name])
    for name, p in model.params.items():
        write_hten(root / "params" / f"{name}.hten", p.data)
    (root / _MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    if rng_states is not None:
        (root / "rng_state.json").write_text(json.dumps(rng_states, indent=1))


def _read_manifest(root: Path) -> dict:
    path = root / _MANIFEST_NAME
    if not path.is_file():
        raise FormatError(f"{root}: missing {_MANIFEST_NAME}")
    out = {}
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{ln}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


def load_checkpoint(path):
    """Restore (model, opt_or_None, step, rng_states_or_None)."""
    root = Path(path)
    man = _read_manifest(root)
    if man.get("format") != "1":
        raise FormatError(f"{root}: unsupported checkpoint format "
                          f"{man.get('format')!r}")
    field_types = {f.name: f.type for f in fields(ModelConfig)}
    cfg_kwargs = {}
    for key, raw in man.items():
        if not key.startswith("model."):
            continue
        name = key[len("model."):]
        if name not in ModelConfig.__dataclass_fields__:
            raise FormatError(f"{root}: unknown model config key {name}")
        ftyp = {"int": int, "float": float, "bool": bool, "str": str}.get(
            str(field_types[name]), str)
        cfg_kwargs[name] = _parse_typed(raw, ftyp)
    config = ModelConfig(**cfg_kwargs)
    model = Model(config, seed=int(man.get("seed", "0")))
    for name, p in model.params.items():
        f = root / "params" / f"{name}.hten"
        if not f.is_file():
            raise FormatError(f"{root}: missing parameter file {name}.hten")
        data = read_hten(f)
        if data.shape != p.data.shape:
            raise FormatError(
                f"{root}: {name} has shape {data.shape}, expected {p.data.shape}")
        p.data = data
    opt = None
    if "opt.lr" in man:
        opt = AdamW(model.trainable(), lr=float(man["opt.lr"]),
                    betas=(float(man["opt.beta1"]), float(man["opt.beta2"])),
                    eps=float(man["opt.eps"]),
                    weight_decay=float(man["opt.weight_decay"]))
        opt.t = int(man["opt.t"])
        for name in opt.params:
            for slot, store in (("m", opt.m), ("v", opt.v)):
                f = root / "opt" / f"{name}.{slot}.hten"
                if not f.is_file():
                    raise FormatError(f"{root}: missing optimizer file "
                                      f"{name}.{slot}.hten")
                data = read_hten(f)
                if data.shape != store[name].shape:
                    raise FormatError(f"{root}: optimizer {name}.{slot} shape "
                                      f"{data.shape}")
                store[name] = data
    rng_states = None
    rng_file = root / "rng_state.json"
    if rng_file.is_file():
        try:
            rng_states = json.loads(rng_file.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{rng_file}: bad JSON: {exc}") from exc
    step = int(man.get("step", "0"))
    return model, opt, step, rng_states
