"""Edit-region geometry: mask refinement, patchify, token integration.

The editing flow decides *where* to generate in three stages. A cheap
low-resolution proxy edit is diffed against the downsampled source to
find what actually changed; the changed set is dilated and lifted back
to full resolution; the result is unioned with whatever mask the user
drew. Tokens inside the refined mask become noisy (generated), tokens
outside stay as clean condition tokens, and only windows touching the
mask are computed at all.

Patchify is lossless space-to-channel rearrangement (no learned
encoder): a p x p x 3 pixel block becomes one token of width 3*p*p, and
unpatchify inverts it bit for bit. Compositing at feather 0 copies
source pixels outside the mask bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .attention import AttentionPlan, TokenRole
from .errors import ContractError, DimensionError, ResampleError


# -- resolution changes -----------------------------------------------------

def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter mean over factor x factor cells; factor must divide dims."""
    img = np.asarray(img, dtype=np.float32)
    if factor <= 0:
        raise ResampleError(f"factor must be positive, got {factor}")
    if img.ndim not in (2, 3):
        raise ResampleError(f"expected (H, W) or (H, W, C), got {img.shape}")
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise ResampleError(f"{h}x{w} not divisible by factor {factor}")
    shaped = img.reshape(h // factor, factor, w // factor, factor, -1)
    out = shaped.mean(axis=(1, 3), dtype=np.float64).astype(np.float32)
    return out[..., 0] if img.ndim == 2 else out


def upsample_nearest(img: np.ndarray, factor: int) -> np.ndarray:
    """Repeat each cell factor x factor; exact inverse partner of a mask
    downsample."""
    img = np.asarray(img)
    if factor <= 0:
        raise ResampleError(f"factor must be positive, got {factor}")
    if img.ndim not in (2, 3):
        raise ResampleError(f"expected (H, W) or (H, W, C), got {img.shape}")
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def upsample_bilinear(img: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear upsample treating pixels as cell centers."""
    img = np.asarray(img, dtype=np.float32)
    if factor <= 0:
        raise ResampleError(f"factor must be positive, got {factor}")
    if img.ndim not in (2, 3):
        raise ResampleError(f"expected (H, W) or (H, W, C), got {img.shape}")
    zoom = (factor, factor) + (1,) * (img.ndim - 2)
    out = ndimage.zoom(img, zoom, order=1, mode="nearest", grid_mode=True)
    return out.astype(np.float32)


# -- mask refinement --------------------------------------------------------

def proxy_change_mask(src_lr: np.ndarray, edited_lr: np.ndarray,
                      tau: float = 0.05) -> np.ndarray:
    """Pixels whose max-channel absolute change exceeds tau."""
    src_lr = np.asarray(src_lr, dtype=np.float32)
    edited_lr = np.asarray(edited_lr, dtype=np.float32)
    if src_lr.shape != edited_lr.shape:
        raise DimensionError(f"proxy pair {src_lr.shape} vs {edited_lr.shape}")
    diff = np.abs(edited_lr - src_lr)
    if diff.ndim == 3:
        diff = diff.max(axis=2)
    return diff > np.float32(tau)


def refine_mask(src_lr: np.ndarray, edited_lr: np.ndarray, factor: int,
                user_mask: np.ndarray = None, tau: float = 0.05,
                dilation: int = 0) -> np.ndarray:
    """Full-resolution edit mask from a low-resolution proxy edit.

    Thresholded change pixels are dilated `dilation` steps (4-connected,
    so an L1 ball of that radius), upscaled nearest to full resolution,
    and unioned with the user's mask when one is given. Dilation is a
    safety margin for imprecise proxies; an editor that localizes its
    changes exactly needs none, and every dilation step trades mask
    tightness for recall.
    """
    changed = proxy_change_mask(src_lr, edited_lr, tau)
    if dilation < 0:
        raise DimensionError(f"dilation must be non-negative, got {dilation}")
    if dilation and changed.any():
        changed = ndimage.binary_dilation(changed, iterations=dilation)
    full = upsample_nearest(changed, factor)
    if user_mask is not None:
        user_mask = np.asarray(user_mask, dtype=bool)
        if user_mask.shape != full.shape:
            raise DimensionError(
                f"user mask {user_mask.shape} vs refined {full.shape}")
        full = full | user_mask
    return full


def refine_bbox(token_mask: np.ndarray, window: int):
    """Bounding box of set tokens, expanded outward to window multiples.

    token_mask is bool (rows, cols); returns (r0, c0, r1, c1) half-open
    in token units, each edge on a window boundary (clipped to the
    grid). Raises ContractError on an empty mask.
    """
    token_mask = np.asarray(token_mask, dtype=bool)
    if token_mask.ndim != 2:
        raise DimensionError(f"token mask must be 2-D, got {token_mask.shape}")
    if window <= 0:
        raise DimensionError(f"window must be positive, got {window}")
    rows = np.flatnonzero(token_mask.any(axis=1))
    cols = np.flatnonzero(token_mask.any(axis=0))
    if rows.size == 0:
        raise ContractError("empty mask has no bounding box")
    r0 = (int(rows[0]) // window) * window
    c0 = (int(cols[0]) // window) * window
    r1 = min(-(-(int(rows[-1]) + 1) // window) * window, token_mask.shape[0])
    c1 = min(-(-(int(cols[-1]) + 1) // window) * window, token_mask.shape[1])
    return r0, c0, r1, c1


def pixel_mask_to_tokens(mask: np.ndarray, patch: int) -> np.ndarray:
    """Token is set when any pixel of its patch is set; bool (Ht, Wt)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise DimensionError(f"pixel mask must be 2-D, got {mask.shape}")
    h, w = mask.shape
    if patch <= 0 or h % patch or w % patch:
        raise ResampleError(f"mask {h}x{w} not tiled by patch {patch}")
    return mask.reshape(h // patch, patch, w // patch, patch).any(axis=(1, 3))


def mask_to_windows(token_mask: np.ndarray, plan: AttentionPlan) -> np.ndarray:
    """Active flags per window: any set interior token activates the tile.

    Every set token lands in an active window by construction, so the
    activation covers the edit region completely.
    """
    token_mask = np.asarray(token_mask, dtype=bool)
    flat = token_mask.ravel()
    if flat.size != plan.grid_size:
        raise DimensionError(
            f"token mask size {flat.size} vs plan grid {plan.grid_size}")
    active = np.zeros(plan.num_windows, dtype=bool)
    for w in plan.windows:
        if flat[w.interior].any():
            active[w.wid] = True
    return active


# -- patchify ---------------------------------------------------------------

def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, 3) -> (Ht*Wt, patch*patch*3) by space-to-channel, row-major.

    Pure rearrangement: values are moved, never recomputed, so
    unpatchify(patchify(x)) == x bit for bit.
    """
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected (H, W, 3), got {img.shape}")
    h, w, c = img.shape
    if patch <= 0 or h % patch or w % patch:
        raise ResampleError(f"image {h}x{w} not tiled by patch {patch}")
    ht, wt = h // patch, w // patch
    blocks = img.reshape(ht, patch, wt, patch, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(blocks).reshape(ht * wt, patch * patch * c)


def unpatchify(tokens: np.ndarray, rows: int, cols: int, patch: int) -> np.ndarray:
    """(rows*cols, patch*patch*3) -> (rows*patch, cols*patch, 3)."""
    tokens = np.asarray(tokens, dtype=np.float32)
    width = patch * patch * 3
    if tokens.ndim != 2 or tokens.shape != (rows * cols, width):
        raise DimensionError(
            f"tokens {tokens.shape}, expected ({rows * cols}, {width})")
    blocks = tokens.reshape(rows, cols, patch, patch, 3).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(blocks).reshape(rows * patch, cols * patch, 3)


# -- token integration ------------------------------------------------------

@dataclass(frozen=True)
class IntegratedTokens:
    """One image-section row per grid position: noisy inside the mask,
    condition outside. Length is always exactly the grid size."""

    tokens: np.ndarray
    roles: np.ndarray
    mask: np.ndarray

    @property
    def noisy_idx(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def condition_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)


def integrate_tokens(condition_tokens: np.ndarray, noisy_tokens: np.ndarray,
                     token_mask: np.ndarray) -> IntegratedTokens:
    """Merge the two streams into one grid-ordered sequence.

    condition_tokens and noisy_tokens are (N, C) aligned to the same
    grid; token_mask (N,) picks the noisy row where set. The result has
    N rows, never 2N.
    """
    condition_tokens = np.asarray(condition_tokens, dtype=np.float32)
    noisy_tokens = np.asarray(noisy_tokens, dtype=np.float32)
    token_mask = np.asarray(token_mask, dtype=bool).ravel()
    if condition_tokens.shape != noisy_tokens.shape:
        raise DimensionError(
            f"streams differ: {condition_tokens.shape} vs {noisy_tokens.shape}")
    if condition_tokens.ndim != 2 or token_mask.size != condition_tokens.shape[0]:
        raise DimensionError(
            f"mask {token_mask.size} vs tokens {condition_tokens.shape}")
    tokens = np.where(token_mask[:, None], noisy_tokens, condition_tokens)
    roles = np.where(token_mask, np.int64(TokenRole.NOISY),
                     np.int64(TokenRole.CONDITION))
    out = IntegratedTokens(tokens, roles, token_mask.copy())
    if out.tokens.shape[0] != token_mask.size:
        raise ContractError("integration changed the sequence length")
    return out


# -- compositing ------------------------------------------------------------

def composite(source: np.ndarray, generated: np.ndarray, mask: np.ndarray,
              feather: float = 0.0) -> np.ndarray:
    """Blend generated pixels into source under the mask.

    feather 0 selects per pixel, so everything outside the mask is the
    source array bit for bit. feather > 0 gaussian-softens the mask into
    a weight field before blending.
    """
    source = np.asarray(source, dtype=np.float32)
    generated = np.asarray(generated, dtype=np.float32)
    mask = np.asarray(mask, dtype=bool)
    if source.shape != generated.shape:
        raise DimensionError(f"source {source.shape} vs generated {generated.shape}")
    if mask.shape != source.shape[:2]:
        raise DimensionError(f"mask {mask.shape} vs image {source.shape}")
    if feather < 0:
        raise DimensionError(f"feather must be non-negative, got {feather}")
    if feather == 0:
        sel = mask[..., None] if source.ndim == 3 else mask
        return np.where(sel, generated, source)
    weight = ndimage.gaussian_filter(mask.astype(np.float32), sigma=feather)
    weight = np.clip(weight, 0.0, 1.0)
    if source.ndim == 3:
        weight = weight[..., None]
    return weight * generated + (1.0 - weight) * source
