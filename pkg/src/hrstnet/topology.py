"""Network assembly: parallel stages, multi-resolution fusion, head, tracing.

Stream r runs at 1/(4*2^r) of the input resolution with embed_dim*2^r
channels. Stage n holds n streams; every stream passes a two-layer window
attention block, every block output passes patch merging (the last stage
merges only the first n-1 streams). The deepest merged map spawns the next
stage's new stream; all other merged maps and all block outputs feed the
fusion block, which renders every stream at every other resolution,
concatenates per target and projects back with a residual block.

Parameters live in a flat name -> float32 ndarray mapping, fully determined
by (config, seed); `param_schema` is the single source of truth for names,
shapes and init rules, so `param_count` needs no allocation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attention import AttnTensors, BlockTensors, swin_pair_graph
from .errors import ConfigError, NumericError, ShapeError, TopologyError
from .volume import VolumeTensor
from .windowing import TokenGrid, embed_graph, expand_graph, merge_graph

DEPTH_PER_BLOCK = 2
CONV_KERNEL = 3  # residual-block convolutions are 3x3x3, padding 1


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of one network variant."""

    variant: int = 4
    embed_dim: int = 96
    patch_size: int = 4
    window: int = 4
    heads: tuple[int, ...] = (3, 6, 12, 24)
    in_channels: int = 4
    num_classes: int = 4
    mlp_ratio: int = 4
    depth: int = DEPTH_PER_BLOCK

    def validate(self) -> None:
        if self.variant not in (2, 3, 4):
            raise ConfigError(f"variant must be 2, 3 or 4, got {self.variant}")
        if self.depth != DEPTH_PER_BLOCK:
            raise ConfigError(f"depth per block is fixed at {DEPTH_PER_BLOCK}")
        if self.embed_dim < 4 or self.embed_dim % 4 != 0:
            raise ConfigError(
                f"embed_dim must be a positive multiple of 4 (two head expansions), "
                f"got {self.embed_dim}"
            )
        if self.patch_size < 1 or self.window < 1:
            raise ConfigError("patch_size and window must be >= 1")
        if len(self.heads) < self.variant:
            raise ConfigError(
                f"need at least {self.variant} head counts, got {self.heads}"
            )
        for r in range(self.variant):
            c = self.stream_channels(r)
            if self.heads[r] < 1 or c % self.heads[r] != 0:
                raise ConfigError(
                    f"stream {r} channels {c} not divisible by heads {self.heads[r]}"
                )
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be >= 1")

    def stream_channels(self, r: int) -> int:
        return self.embed_dim * (2**r)

    @property
    def shift(self) -> tuple[int, int, int]:
        s = self.window // 2
        return (s, s, s)

    @property
    def input_multiple(self) -> int:
        """Required input-dim multiple (window padding enabled)."""
        return self.patch_size * 2 ** (self.variant - 1)

    @property
    def window_exact_multiple(self) -> int:
        """Input-dim multiple for window-exact (padding-free) operation."""
        return self.input_multiple * self.window

    def stage_merge_count(self, n: int) -> int:
        return n if n < self.variant else n - 1


# ----------------------------------------------------------------- schema


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str  # "trunc" | "zeros" | "ones"

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def _block_schema(prefix: str, c: int, heads: int, window: int, ratio: int):
    span = (2 * window - 1) ** 3
    hid = ratio * c
    yield ParamSpec(f"{prefix}.ln1.gamma", (c,), "ones")
    yield ParamSpec(f"{prefix}.ln1.beta", (c,), "zeros")
    for proj in ("wq", "wk", "wv", "wo"):
        yield ParamSpec(f"{prefix}.attn.{proj}", (c, c), "trunc")
        yield ParamSpec(f"{prefix}.attn.{proj.replace('w', 'b')}", (c,), "zeros")
    yield ParamSpec(f"{prefix}.attn.bias_table", (span, heads), "zeros")
    yield ParamSpec(f"{prefix}.ln2.gamma", (c,), "ones")
    yield ParamSpec(f"{prefix}.ln2.beta", (c,), "zeros")
    yield ParamSpec(f"{prefix}.mlp.w1", (hid, c), "trunc")
    yield ParamSpec(f"{prefix}.mlp.b1", (hid,), "zeros")
    yield ParamSpec(f"{prefix}.mlp.w2", (c, hid), "trunc")
    yield ParamSpec(f"{prefix}.mlp.b2", (c,), "zeros")


def _residual_schema(prefix: str, c_in: int, c_out: int):
    k3 = CONV_KERNEL**3
    yield ParamSpec(f"{prefix}.conv1.weight", (c_out, k3 * c_in), "trunc")
    yield ParamSpec(f"{prefix}.in1.gamma", (c_out,), "ones")
    yield ParamSpec(f"{prefix}.in1.beta", (c_out,), "zeros")
    yield ParamSpec(f"{prefix}.conv2.weight", (c_out, k3 * c_out), "trunc")
    yield ParamSpec(f"{prefix}.in2.gamma", (c_out,), "ones")
    yield ParamSpec(f"{prefix}.in2.beta", (c_out,), "zeros")
    if c_in != c_out:
        yield ParamSpec(f"{prefix}.skip.weight", (c_out, c_in), "trunc")
        yield ParamSpec(f"{prefix}.skip.bias", (c_out,), "zeros")


def _mrff_chain_specs(cfg: ModelConfig, n: int, t: int, r: int):
    c = cfg.embed_dim
    if r < t:
        for j, lvl in enumerate(range(r + 1, t)):
            ci = c * 2**lvl
            yield ParamSpec(f"mrff{n}.to{t}.from{r}.down{j}.weight", (2 * ci, 8 * ci), "trunc")
    else:
        for j, lvl in enumerate(range(r, t, -1)):
            ci = c * 2**lvl
            yield ParamSpec(f"mrff{n}.to{t}.from{r}.up{j}.weight", (4 * ci, ci), "trunc")


def param_schema(cfg: ModelConfig) -> Iterator[ParamSpec]:
    """Every learnable tensor of the variant, in allocation order."""
    cfg.validate()
    c, k, p, w = cfg.embed_dim, cfg.variant, cfg.patch_size, cfg.window
    yield ParamSpec("embed.weight", (c, cfg.in_channels * p**3), "trunc")
    yield ParamSpec("embed.bias", (c,), "zeros")
    for n in range(1, k + 1):
        for r in range(n):
            cr = cfg.stream_channels(r)
            for b in range(DEPTH_PER_BLOCK):
                yield from _block_schema(
                    f"stage{n}.stream{r}.block{b}", cr, cfg.heads[r], w, cfg.mlp_ratio
                )
        for r in range(cfg.stage_merge_count(n)):
            cr = cfg.stream_channels(r)
            yield ParamSpec(f"stage{n}.merge{r}.weight", (2 * cr, 8 * cr), "trunc")
        if n >= 2:
            for t in range(n):
                for r in range(n):
                    if r != t:
                        yield from _mrff_chain_specs(cfg, n, t, r)
                yield from _residual_schema(
                    f"mrff{n}.to{t}.res", n * cfg.stream_channels(t), cfg.stream_channels(t)
                )
    for t in range(1, k):
        for j, lvl in enumerate(range(t, 0, -1)):
            ci = cfg.stream_channels(lvl)
            yield ParamSpec(f"head.up{t}.exp{j}.weight", (4 * ci, ci), "trunc")
    yield from _residual_schema("head.res", k * c, c)
    yield ParamSpec("head.expand1.weight", (4 * c, c), "trunc")
    yield ParamSpec("head.expand2.weight", (2 * c, c // 2), "trunc")
    yield ParamSpec("head.out.weight", (cfg.num_classes, c // 4), "trunc")
    yield ParamSpec("head.out.bias", (cfg.num_classes,), "zeros")


def param_count(cfg: ModelConfig) -> int:
    return sum(spec.size for spec in param_schema(cfg))


def _trunc_normal(rng: np.random.Generator, shape, std=0.02, bound=2.0) -> np.ndarray:
    draw = rng.standard_normal(shape)
    bad = np.abs(draw) > bound
    while bad.any():
        draw[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(draw) > bound
    return (draw * std).astype(np.float32)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Seed-deterministic initialization: truncated normal weights (std 0.02,
    clipped at 2 std), zero biases and bias tables, unit norm gains."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for spec in param_schema(cfg):
        if spec.init == "trunc":
            params[spec.name] = _trunc_normal(rng, spec.shape)
        elif spec.init == "ones":
            params[spec.name] = np.ones(spec.shape, dtype=np.float32)
        else:
            params[spec.name] = np.zeros(spec.shape, dtype=np.float32)
    return params


# ----------------------------------------------------------------- graphs


def _attn_from(pt: Mapping[str, Tensor], prefix: str, heads: int, window: int) -> AttnTensors:
    g = lambda s: pt[f"{prefix}.{s}"]
    return AttnTensors(
        g("attn.wq"), g("attn.bq"), g("attn.wk"), g("attn.bk"),
        g("attn.wv"), g("attn.bv"), g("attn.wo"), g("attn.bo"),
        g("attn.bias_table"), heads, window,
    )


def _block_from(pt: Mapping[str, Tensor], prefix: str, heads: int, window: int) -> BlockTensors:
    g = lambda s: pt[f"{prefix}.{s}"]
    return BlockTensors(
        g("ln1.gamma"), g("ln1.beta"), _attn_from(pt, prefix, heads, window),
        g("ln2.gamma"), g("ln2.beta"),
        g("mlp.w1"), g("mlp.b1"), g("mlp.w2"), g("mlp.b2"),
    )


def conv3_graph(x: Tensor, weight: Tensor) -> Tensor:
    """3x3x3 convolution (padding 1) as 27 shifted slices + channel linear.

    Weight is [C_out, 27*C_in], columns in lexicographic (dz, dy, dx) offset
    order, C_in fastest.
    """
    c, d, h, w = x.shape
    xp = ad.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    slices = [
        ad.slice_(xp, (slice(None), slice(dz, dz + d), slice(dy, dy + h), slice(dx, dx + w)))
        for dz in range(3)
        for dy in range(3)
        for dx in range(3)
    ]
    return ad.channels_linear(ad.concat(slices, axis=0), weight)


def _instance_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    c = x.shape[0]
    shape = (c, 1, 1, 1)
    return ad.normalize_axes(
        x, ad.reshape(gamma, shape), ad.reshape(beta, shape), axes=(1, 2, 3), eps=1e-5
    )


def residual_graph(x: Tensor, pt: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Two conv-instancenorm-leakyrelu layers plus (projected) skip."""
    b = conv3_graph(x, pt[f"{prefix}.conv1.weight"])
    b = ad.leaky_relu(_instance_norm(b, pt[f"{prefix}.in1.gamma"], pt[f"{prefix}.in1.beta"]))
    b = conv3_graph(b, pt[f"{prefix}.conv2.weight"])
    b = ad.leaky_relu(_instance_norm(b, pt[f"{prefix}.in2.gamma"], pt[f"{prefix}.in2.beta"]))
    if f"{prefix}.skip.weight" in pt:
        skip = ad.channels_linear(x, pt[f"{prefix}.skip.weight"], pt[f"{prefix}.skip.bias"])
    else:
        skip = x
    return ad.add(b, skip)


def stage_graph(
    cfg: ModelConfig, pt: Mapping[str, Tensor], n: int, streams: list[Tensor]
) -> tuple[list[Tensor], list[Tensor]]:
    if len(streams) != n:
        raise TopologyError(f"stage {n} expects {n} streams, got {len(streams)}")
    souts = []
    for r, s in enumerate(streams):
        b0 = _block_from(pt, f"stage{n}.stream{r}.block0", cfg.heads[r], cfg.window)
        b1 = _block_from(pt, f"stage{n}.stream{r}.block1", cfg.heads[r], cfg.window)
        souts.append(swin_pair_graph(s, b0, b1, cfg.window, cfg.shift))
    merged = [
        merge_graph(souts[r], pt[f"stage{n}.merge{r}.weight"])
        for r in range(cfg.stage_merge_count(n))
    ]
    return souts, merged


def mrff_graph(
    cfg: ModelConfig, pt: Mapping[str, Tensor], n: int,
    souts: list[Tensor], merged: list[Tensor],
) -> list[Tensor]:
    if len(souts) != n or len(merged) != n - 1:
        raise TopologyError(
            f"fusion after stage {n} expects {n} block outputs and {n - 1} merged maps, "
            f"got {len(souts)} and {len(merged)}"
        )
    fused = []
    for t in range(n):
        target_dims = souts[t].shape[1:]
        parts = [souts[t]]
        for r in range(n):
            if r == t:
                continue
            if r < t:
                m = merged[r]
                for j in range(t - r - 1):
                    m = merge_graph(m, pt[f"mrff{n}.to{t}.from{r}.down{j}.weight"])
            else:
                m = souts[r]
                for j in range(r - t):
                    m = expand_graph(m, pt[f"mrff{n}.to{t}.from{r}.up{j}.weight"])
            if m.shape[1:] != target_dims:
                raise TopologyError(
                    f"fusion source {r} -> target {t}: rendered dims {m.shape[1:]} "
                    f"!= target dims {target_dims}"
                )
            parts.append(m)
        cat = ad.concat(parts, axis=0)
        fused.append(residual_graph(cat, pt, f"mrff{n}.to{t}.res"))
    return fused


def head_graph(cfg: ModelConfig, pt: Mapping[str, Tensor], fused: list[Tensor]) -> Tensor:
    parts = [fused[0]]
    for t in range(1, cfg.variant):
        e = fused[t]
        for j in range(t):
            e = expand_graph(e, pt[f"head.up{t}.exp{j}.weight"])
        if e.shape[1:] != fused[0].shape[1:]:
            raise TopologyError(
                f"head upsample of stream {t} gives dims {e.shape[1:]}, "
                f"expected {fused[0].shape[1:]}"
            )
        parts.append(e)
    x = residual_graph(ad.concat(parts, axis=0), pt, "head.res")
    x = expand_graph(x, pt["head.expand1.weight"])
    x = expand_graph(x, pt["head.expand2.weight"])
    return ad.channels_linear(x, pt["head.out.weight"], pt["head.out.bias"])


def check_input_dims(cfg: ModelConfig, dims: tuple[int, int, int]) -> None:
    m = cfg.input_multiple
    if any(d % m != 0 or d < m for d in dims):
        raise ConfigError(
            f"input dims {tuple(dims)} must be positive multiples of {m} "
            f"(patch {cfg.patch_size} x 2^{cfg.variant - 1} merges)"
        )


def forward_graph(cfg: ModelConfig, pt: Mapping[str, Tensor], x: Tensor) -> Tensor:
    """Full network: embedding, stages with fusion, segmentation head."""
    check_input_dims(cfg, x.shape[1:])
    g = embed_graph(x, pt["embed.weight"], pt["embed.bias"], cfg.patch_size)
    streams = [g]
    fused: list[Tensor] = []
    for n in range(1, cfg.variant + 1):
        souts, merged = stage_graph(cfg, pt, n, streams)
        if n == 1:
            streams = [souts[0], merged[0]]
        elif n < cfg.variant:
            fused = mrff_graph(cfg, pt, n, souts, merged[: n - 1])
            streams = fused + [merged[n - 1]]
        else:
            fused = mrff_graph(cfg, pt, n, souts, merged)
    return head_graph(cfg, pt, fused)


def as_tensors(params: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


# -------------------------------------------------------------- public level


@dataclass
class ResidualParams:
    """Weights of one residual block (see residual_graph)."""

    conv1_weight: np.ndarray
    in1_gamma: np.ndarray
    in1_beta: np.ndarray
    conv2_weight: np.ndarray
    in2_gamma: np.ndarray
    in2_beta: np.ndarray
    skip_weight: np.ndarray | None = None
    skip_bias: np.ndarray | None = None

    def as_mapping(self, prefix: str = "res") -> dict[str, Tensor]:
        out = {
            f"{prefix}.conv1.weight": self.conv1_weight,
            f"{prefix}.in1.gamma": self.in1_gamma,
            f"{prefix}.in1.beta": self.in1_beta,
            f"{prefix}.conv2.weight": self.conv2_weight,
            f"{prefix}.in2.gamma": self.in2_gamma,
            f"{prefix}.in2.beta": self.in2_beta,
        }
        if self.skip_weight is not None:
            out[f"{prefix}.skip.weight"] = self.skip_weight
            out[f"{prefix}.skip.bias"] = self.skip_bias
        return {k: Tensor(np.asarray(v, dtype=np.float32)) for k, v in out.items()}


def residual_block(grid: TokenGrid, params: ResidualParams) -> TokenGrid:
    out = residual_graph(Tensor(grid.data), params.as_mapping(), "res")
    return TokenGrid(out.data)


def run_stage(
    n: int, streams: list[TokenGrid], cfg: ModelConfig, params: Mapping[str, np.ndarray]
) -> tuple[list[TokenGrid], list[TokenGrid]]:
    pt = as_tensors(params)
    souts, merged = stage_graph(cfg, pt, n, [Tensor(s.data) for s in streams])
    return [TokenGrid(s.data) for s in souts], [TokenGrid(m.data) for m in merged]


def mrff(
    n: int, swin_outputs: list[TokenGrid], merged_outputs: list[TokenGrid],
    cfg: ModelConfig, params: Mapping[str, np.ndarray],
) -> list[TokenGrid]:
    pt = as_tensors(params)
    fused = mrff_graph(
        cfg, pt, n, [Tensor(s.data) for s in swin_outputs],
        [Tensor(m.data) for m in merged_outputs],
    )
    return [TokenGrid(f.data) for f in fused]


def segmentation_head(
    fused: list[TokenGrid], cfg: ModelConfig, params: Mapping[str, np.ndarray],
    spacing=(1.0, 1.0, 1.0),
) -> VolumeTensor:
    pt = as_tensors(params)
    logits = head_graph(cfg, pt, [Tensor(f.data) for f in fused])
    return VolumeTensor(logits.data, spacing)


def forward(cfg: ModelConfig, params: Mapping[str, np.ndarray], vol: VolumeTensor) -> VolumeTensor:
    """Whole-network inference; deterministic in (params, vol)."""
    cfg.validate()
    if vol.channels != cfg.in_channels:
        raise ShapeError(
            f"volume has {vol.channels} channels, model expects {cfg.in_channels}"
        )
    logits = forward_graph(cfg, as_tensors(params), Tensor(vol.data))
    if not np.isfinite(logits.data).all():
        raise NumericError("forward produced non-finite logits")
    return VolumeTensor(logits.data, vol.spacing)


# ----------------------------------------------------------------- tracing


def _ceil_half(dims):
    return tuple((d + 1) // 2 for d in dims)


def shape_trace(cfg: ModelConfig, input_dims: tuple[int, int, int]) -> dict:
    """Structural walk of the network: shapes, channels, params, constraints.

    Never allocates tensors; divisibility violations are reported in the
    `violations` list instead of raised.
    """
    cfg.validate()
    input_dims = tuple(int(d) for d in input_dims)
    c, k, p = cfg.embed_dim, cfg.variant, cfg.patch_size
    sizes = {spec.name: spec.size for spec in param_schema(cfg)}

    def block_params(prefix):
        return sum(v for n, v in sizes.items() if n.startswith(prefix))

    violations = []
    m = cfg.input_multiple
    for d in input_dims:
        if d % m != 0 or d < m:
            violations.append(
                f"input dim {d} is not a positive multiple of {m} "
                f"(required for exact merge/expand round trips)"
            )
    we = cfg.window_exact_multiple
    if not violations and any(d % we != 0 for d in input_dims):
        violations.append(
            f"input dims {input_dims} need padding for window size {cfg.window} "
            f"(window-exact operation requires multiples of {we})"
        )

    grid0 = tuple(d // p for d in input_dims)
    stream_dims = [grid0]
    for r in range(1, k):
        stream_dims.append(_ceil_half(stream_dims[-1]))

    streams = [
        {
            "stream": r,
            "resolution": list(stream_dims[r]),
            "channels": cfg.stream_channels(r),
            "heads": cfg.heads[r],
            "downscale": 4 * 2**r,
        }
        for r in range(k)
    ]

    blocks = [
        {
            "name": "embed",
            "in_shape": [cfg.in_channels, *input_dims],
            "out_shape": [c, *grid0],
            "params": sizes["embed.weight"] + sizes["embed.bias"],
        }
    ]
    for n in range(1, k + 1):
        for r in range(n):
            cr = cfg.stream_channels(r)
            blocks.append(
                {
                    "name": f"stage{n}.stream{r}.swin_pair",
                    "in_shape": [cr, *stream_dims[r]],
                    "out_shape": [cr, *stream_dims[r]],
                    "params": block_params(f"stage{n}.stream{r}."),
                }
            )
        for r in range(cfg.stage_merge_count(n)):
            cr = cfg.stream_channels(r)
            blocks.append(
                {
                    "name": f"stage{n}.merge{r}",
                    "in_shape": [cr, *stream_dims[r]],
                    "out_shape": [2 * cr, *_ceil_half(stream_dims[r])],
                    "params": sizes[f"stage{n}.merge{r}.weight"],
                }
            )
        if n >= 2:
            for t in range(n):
                ct = cfg.stream_channels(t)
                blocks.append(
                    {
                        "name": f"mrff{n}.to{t}",
                        "in_shape": [n * ct, *stream_dims[t]],
                        "out_shape": [ct, *stream_dims[t]],
                        "params": block_params(f"mrff{n}.to{t}."),
                        "concat_channels": n * ct,
                    }
                )
    blocks.append(
        {
            "name": "head",
            "in_shape": [k * c, *grid0],
            "out_shape": [cfg.num_classes, *input_dims],
            "params": block_params("head."),
        }
    )

    return {
        "variant": k,
        "embed_dim": c,
        "patch_size": p,
        "window": cfg.window,
        "depth_per_block": DEPTH_PER_BLOCK,
        "heads": list(cfg.heads[:k]),
        "in_channels": cfg.in_channels,
        "num_classes": cfg.num_classes,
        "input_dims": list(input_dims),
        "min_input_multiple": {"with_padding": m, "window_exact": we},
        "violations": violations,
        "streams": streams,
        "blocks": blocks,
        "param_total": sum(sizes.values()),
    }


def trace_text(report: dict) -> str:
    lines = [
        f"HRSTNet-{report['variant']}  embed_dim={report['embed_dim']} "
        f"patch={report['patch_size']} window={report['window']} "
        f"depth={report['depth_per_block']} heads={report['heads']}",
        f"input dims: {report['input_dims']}  "
        f"min multiple: {report['min_input_multiple']['with_padding']} (padded), "
        f"{report['min_input_multiple']['window_exact']} (window-exact)",
    ]
    for v in report["violations"]:
        lines.append(f"VIOLATION: {v}")
    lines.append("streams:")
    for s in report["streams"]:
        lines.append(
            f"  stream {s['stream']}: 1/{s['downscale']} resolution "
            f"{s['resolution']} channels {s['channels']} heads {s['heads']}"
        )
    lines.append(f"{'block':<28}{'in':<20}{'out':<20}{'params':>10}")
    for b in report["blocks"]:
        lines.append(
            f"{b['name']:<28}{str(b['in_shape']):<20}{str(b['out_shape']):<20}"
            f"{b['params']:>10}"
        )
    lines.append(f"total parameters: {report['param_total']}")
    return "\n".join(lines)
