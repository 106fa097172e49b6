"""Windowed multi-head self-attention with 3D relative position bias.

Covers the per-window attention kernel, shifted-window masking, layer
normalization, the token MLP and the two-layer block (plain window
attention followed by shifted window attention, both with pre-norm
residuals).

Masked logits use -1e4 instead of -inf; in float32 the softmax weight of a
masked pair underflows to exactly 0.0, which the isolation tests rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .windowing import (
    TokenGrid,
    WindowSet,
    padded_extent,
    partition_graph,
    reverse_graph,
    shift_graph,
)

MASK_VALUE = -1e4
LN_EPS = 1e-5


@lru_cache(maxsize=None)
def relative_position_index(window: int) -> np.ndarray:
    """[w^3, w^3] table mapping token pairs to relative-offset codes.

    Entry (i, j) encodes the 3D offset between tokens i and j, shifted into
    [0, (2w-1)^3). Tokens are in lexicographic (d, h, w) order.
    """
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    r = np.arange(window)
    coords = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    rel = coords[:, None, :] - coords[None, :, :] + (window - 1)
    span = 2 * window - 1
    return (rel[..., 0] * span * span + rel[..., 1] * span + rel[..., 2]).astype(np.int64)


def bias_table_size(window: int) -> int:
    return (2 * window - 1) ** 3


def _axis_regions(extent: int, window: int, shift: int) -> np.ndarray:
    """Shifted-window region labels along one padded axis."""
    ids = np.zeros(extent, dtype=np.int64)
    if shift > 0:
        ids[extent - window :] = 1
        ids[extent - shift :] = 2
    return ids


def shift_region_ids(
    dims: tuple[int, int, int], window: int, shifts: tuple[int, int, int],
    frame: str = "original",
) -> np.ndarray:
    """Region-id grid on the window-padded dims, for mask construction/tests.

    Tokens sharing an id may attend after the cyclic shift; ids are given in
    the `original` (pre-shift) frame by default, or `shifted`.
    """
    padded = [padded_extent(d, window) for d in dims]
    axes = [_axis_regions(p, window, s) for p, s in zip(padded, shifts)]
    grid = (
        axes[0][:, None, None] * 9 + axes[1][None, :, None] * 3 + axes[2][None, None, :]
    )
    if frame == "shifted":
        return grid
    return np.roll(grid, tuple(int(s) for s in shifts), (0, 1, 2))


def compute_attn_mask(
    dims: tuple[int, int, int], window: int, shifts: tuple[int, int, int]
) -> np.ndarray:
    """Additive attention masks [num_windows, w^3, w^3] of {0, MASK_VALUE}.

    Tokens wrapped across the volume boundary by the cyclic shift cannot
    attend to non-wrapped tokens. Depends only on (dims, window, shifts);
    dims are padded up to window multiples internally.
    """
    for s in shifts:
        if not 0 <= s < window:
            raise ConfigError(f"shift {shifts} must lie in [0, window={window})")
    ids = shift_region_ids(dims, window, shifts, frame="shifted")
    wins, _ = partition_graph(Tensor(ids[None].astype(np.float32)), window)
    labels = wins.data[:, :, 0]
    mask = np.where(labels[:, :, None] != labels[:, None, :], MASK_VALUE, 0.0)
    return mask.astype(np.float32)


# ------------------------------------------------------------------- params


@dataclass
class AttentionParams:
    """One window-attention layer: QKV + output projections and bias table."""

    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    bias_table: np.ndarray  # [(2w-1)^3, num_heads]
    num_heads: int
    window: int

    def validate(self):
        c = self.wq.shape[0]
        if c % self.num_heads != 0:
            raise ConfigError(f"channels {c} not divisible by heads {self.num_heads}")
        if self.bias_table.shape != (bias_table_size(self.window), self.num_heads):
            raise ShapeError(
                f"bias table must be {(bias_table_size(self.window), self.num_heads)}, "
                f"got {self.bias_table.shape}"
            )


@dataclass
class BlockParams:
    """One window-attention layer: pre-norm attention and pre-norm MLP, both residual."""

    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    attn: AttentionParams
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray
    shifted: bool = False


class AttnTensors(NamedTuple):
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    table: Tensor
    heads: int
    window: int


class BlockTensors(NamedTuple):
    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttnTensors
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def _attn_tensors(p: AttentionParams) -> AttnTensors:
    as32 = lambda a: Tensor(np.asarray(a, dtype=np.float32))
    return AttnTensors(
        as32(p.wq), as32(p.bq), as32(p.wk), as32(p.bk), as32(p.wv), as32(p.bv),
        as32(p.wo), as32(p.bo), as32(p.bias_table), p.num_heads, p.window,
    )


def _block_tensors(p: BlockParams) -> BlockTensors:
    as32 = lambda a: Tensor(np.asarray(a, dtype=np.float32))
    return BlockTensors(
        as32(p.ln1_gamma), as32(p.ln1_beta), _attn_tensors(p.attn),
        as32(p.ln2_gamma), as32(p.ln2_beta),
        as32(p.mlp_w1), as32(p.mlp_b1), as32(p.mlp_w2), as32(p.mlp_b2),
    )


# ------------------------------------------------------------------- graphs


def attention_graph(
    tokens: Tensor,
    at: AttnTensors,
    mask: np.ndarray | None = None,
    debug: bool = False,
) -> tuple[Tensor, np.ndarray | None]:
    """softmax(QK^T/sqrt(d) + B + mask) V per window and head.

    tokens: [nW, T, C]. Returns (output [nW, T, C], attention weights
    [nW, heads, T, T] when debug).
    """
    nw, t, c = tokens.shape
    if c != at.wq.shape[1]:
        raise ShapeError(f"token channels {c} != projection input {at.wq.shape[1]}")
    heads = at.heads
    dh = c // heads

    def split_heads(x):
        return ad.transpose(ad.reshape(x, (nw, t, heads, dh)), (0, 2, 1, 3))

    q = split_heads(ad.tokens_linear(tokens, at.wq, at.bq))
    k = split_heads(ad.tokens_linear(tokens, at.wk, at.bk))
    v = split_heads(ad.tokens_linear(tokens, at.wv, at.bv))

    logits = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    idx = relative_position_index(at.window)
    if t != idx.shape[0]:
        raise ShapeError(f"window holds {t} tokens but window size implies {idx.shape[0]}")
    bias = ad.take(at.table, idx.reshape(-1))  # [T*T, heads]
    bias = ad.reshape(ad.transpose(ad.reshape(bias, (t, t, heads)), (2, 0, 1)), (1, heads, t, t))
    logits = ad.add(logits, bias)
    if mask is not None:
        if mask.shape != (nw, t, t):
            raise ShapeError(f"mask shape {mask.shape} != {(nw, t, t)}")
        logits = ad.add(logits, Tensor(mask[:, None, :, :].astype(tokens.dtype)))
    attn = ad.softmax(logits, axis=-1)
    out = ad.matmul(attn, v)  # [nW, heads, T, dh]
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (nw, t, c))
    out = ad.tokens_linear(out, at.wo, at.bo)
    return out, (np.array(attn.data, copy=True) if debug else None)


def layer_norm_graph(x: Tensor, gamma: Tensor, beta: Tensor, axis: int) -> Tensor:
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    return ad.normalize_axes(
        x, ad.reshape(gamma, shape), ad.reshape(beta, shape), axes=axis, eps=LN_EPS
    )


def mlp_graph(tokens: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return ad.tokens_linear(ad.gelu(ad.tokens_linear(tokens, w1, b1)), w2, b2)


def _mlp_channels(x: Tensor, w1, b1, w2, b2) -> Tensor:
    h = ad.gelu(ad.channels_linear(x, w1, b1))
    return ad.channels_linear(h, w2, b2)


def swin_layer_graph(
    x: Tensor, bt: BlockTensors, window: int, shifts: tuple[int, int, int]
) -> Tensor:
    """One pre-norm layer on a [C, d, h, w] grid; shifts=(0,0,0) gives W-MSA.

    The grid is padded to window multiples before the cyclic shift so the
    standard shifted-window mask construction is exact on the padded grid.
    """
    dims = x.shape[1:]
    shifted = any(s != 0 for s in shifts)
    h1 = layer_norm_graph(x, bt.ln1_g, bt.ln1_b, axis=0)

    if shifted:
        padded = tuple(padded_extent(d, window) for d in dims)
        if padded != tuple(dims):
            h1 = ad.pad(h1, ((0, 0),) + tuple((0, p - d) for p, d in zip(padded, dims)))
        h1 = shift_graph(h1, tuple(-s for s in shifts))
        mask = compute_attn_mask(padded, window, shifts)
        wins, pdims = partition_graph(h1, window)
        out, _ = attention_graph(wins, bt.attn, mask)
        g = reverse_graph(out, window, pdims, padded)
        g = shift_graph(g, shifts)
        if padded != tuple(dims):
            g = ad.slice_(g, (slice(None),) + tuple(slice(0, d) for d in dims))
    else:
        wins, pdims = partition_graph(h1, window)
        out, _ = attention_graph(wins, bt.attn, None)
        g = reverse_graph(out, window, pdims, dims)

    x = ad.add(x, g)
    h2 = layer_norm_graph(x, bt.ln2_g, bt.ln2_b, axis=0)
    return ad.add(x, _mlp_channels(h2, bt.w1, bt.b1, bt.w2, bt.b2))


def swin_pair_graph(
    x: Tensor, bt0: BlockTensors, bt1: BlockTensors, window: int,
    shifts: tuple[int, int, int],
) -> Tensor:
    """The two-layer block: plain window attention, then shifted."""
    x = swin_layer_graph(x, bt0, window, (0, 0, 0))
    return swin_layer_graph(x, bt1, window, shifts)


# -------------------------------------------------------------- public level


def window_attention(
    ws: WindowSet, p: AttentionParams, mask: np.ndarray | None = None,
    debug: bool = False,
):
    """Apply window attention to a WindowSet; returns a WindowSet.

    With debug=True also returns the post-softmax attention weights as an
    ndarray [num_windows, heads, w^3, w^3].
    """
    p.validate()
    out, attn = attention_graph(Tensor(ws.data), _attn_tensors(p), mask, debug)
    res = WindowSet(out.data, ws.window, ws.source_dims, ws.padded_dims)
    return (res, attn) if debug else res


def layer_norm(tokens: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Per-token mean-0/var-1 over the last axis, then affine."""
    t = Tensor(np.asarray(tokens, dtype=np.float32))
    out = layer_norm_graph(
        t, Tensor(np.asarray(gamma, dtype=np.float32)),
        Tensor(np.asarray(beta, dtype=np.float32)), axis=t.ndim - 1,
    )
    return out.data


def mlp(tokens: np.ndarray, w1, b1, w2, b2) -> np.ndarray:
    """Token-wise linear -> GELU -> linear over the last axis."""
    as32 = lambda a: Tensor(np.asarray(a, dtype=np.float32))
    return mlp_graph(as32(tokens), as32(w1), as32(b1), as32(w2), as32(b2)).data


def swin_block_pair(
    grid: TokenGrid, params: tuple[BlockParams, BlockParams], window: int,
    shifts: tuple[int, int, int],
) -> TokenGrid:
    p0, p1 = params
    out = swin_pair_graph(
        Tensor(grid.data), _block_tensors(p0), _block_tensors(p1), window, shifts
    )
    return TokenGrid(out.data)


def dump_attention(weights: np.ndarray, path) -> None:
    """Persist debug attention weights of one window set in the raw container.

    Stored with channels = heads and image plane [w^3, w^3, 1]; one file per
    window index is the caller's business, this writes a single [h, T, T]
    stack.
    """
    from .volume import VolumeTensor, write_volume

    arr = np.asarray(weights, dtype=np.float32)
    if arr.ndim != 3:
        raise ShapeError(f"expected [heads, T, T] weights, got {arr.shape}")
    write_volume(VolumeTensor(arr[..., None]), path)
