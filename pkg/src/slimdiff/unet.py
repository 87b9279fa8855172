"""Config-driven conditional U-Net with stage-boundary feature taps.

The module tree mirrors the config exactly: ``down_stages.{i}.blocks.{j}``,
``mid.blocks.{j}``, ``up_stages.{i}.blocks.{j}`` plus the stem and output
head, so parameter paths are addressable by (stage, block-index, sub-layer).
Skip-connection wiring is resolved once from the symbolic config trace at
construction time and never inferred from tensor shapes at runtime.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import (
    ATTENTION,
    CHANNEL_INTERP,
    DOWNSAMPLE,
    FFN_EXPANSION,
    RESIDUAL,
    UPSAMPLE,
    BlockSpec,
    UNetConfig,
    trace_config,
    validate_config,
)
from .errors import DimensionError, DomainError, NumericalError


@dataclass
class Condition:
    """Batched text condition: token ids, their embeddings, and null markers."""

    tokens: Tensor  # [B, L] long
    embedding: Tensor  # [B, L, D] float
    null_flag: Tensor  # [B] bool

    def __post_init__(self) -> None:
        if self.embedding.dim() != 3:
            raise DimensionError(f"condition embedding must be [B, L, D], got {tuple(self.embedding.shape)}")
        if self.tokens.shape != self.embedding.shape[:2]:
            raise DimensionError(
                f"condition tokens {tuple(self.tokens.shape)} do not match "
                f"embedding rows {tuple(self.embedding.shape[:2])}"
            )

    @property
    def batch_size(self) -> int:
        return self.embedding.shape[0]


@dataclass
class AttentionCapture:
    """Cross-attention probabilities recorded during one forward pass."""

    path: str
    h: int
    w: int
    probs: Tensor  # [B', heads, q, kv] for the non-null batch elements


def sinusoidal_embedding(t: Tensor, dim: int) -> Tensor:
    half = dim // 2
    denom = max(half - 1, 1)
    freqs = torch.exp(
        torch.arange(half, device=t.device, dtype=torch.float32) * (-math.log(10000.0) / denom)
    )
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class TimeEmbedding(nn.Module):
    """Sinusoidal features at a quarter width expanded by a two-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.lin1 = nn.Linear(dim // 4, dim)
        self.lin2 = nn.Linear(dim, dim)

    def forward(self, t: Tensor) -> Tensor:
        emb = sinusoidal_embedding(t, self.dim // 4)
        return self.lin2(F.silu(self.lin1(emb)))


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else None

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class CrossAttention(nn.Module):
    """Multi-head attention over flattened spatial tokens.

    Probabilities are materialized explicitly so they can be captured for
    attribution maps and checked against the row-stochastic invariant.
    """

    def __init__(self, dim: int, context_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = 1.0 / math.sqrt(self.head_dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: Tensor, context: Tensor | None = None, capture=None) -> Tensor:
        b, lq, _ = x.shape
        ctx = x if context is None else context
        q = self.to_q(x).view(b, lq, self.heads, self.head_dim).transpose(1, 2)
        k = self.to_k(ctx).view(b, ctx.shape[1], self.heads, self.head_dim).transpose(1, 2)
        v = self.to_v(ctx).view(b, ctx.shape[1], self.heads, self.head_dim).transpose(1, 2)
        probs = torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1)
        if capture is not None:
            capture(probs)
        out = (probs @ v).transpose(1, 2).reshape(b, lq, self.heads * self.head_dim)
        return self.to_out(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = FFN_EXPANSION):
        super().__init__()
        self.lin1 = nn.Linear(dim, mult * dim)
        self.lin2 = nn.Linear(mult * dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.lin2(F.gelu(self.lin1(x)))


class AttentionBlock(nn.Module):
    """Self-attention, cross-attention, and a feed-forward net over spatial tokens."""

    def __init__(self, channels: int, heads: int, context_dim: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.proj_in = nn.Conv2d(channels, channels, 1)
        self.ln1 = nn.LayerNorm(channels)
        self.self_attn = CrossAttention(channels, channels, heads)
        self.ln2 = nn.LayerNorm(channels)
        self.cross_attn = CrossAttention(channels, context_dim, heads)
        self.ln3 = nn.LayerNorm(channels)
        self.ff = FeedForward(channels)
        self.proj_out = nn.Conv2d(channels, channels, 1)

    def forward(self, x: Tensor, context: Tensor, capture=None) -> Tensor:
        b, c, h, w = x.shape
        res = x
        seq = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)
        seq = seq + self.self_attn(self.ln1(seq))
        seq = seq + self.cross_attn(self.ln2(seq), context, capture=capture)
        seq = seq + self.ff(self.ln3(seq))
        out = seq.transpose(1, 2).reshape(b, c, h, w)
        return self.proj_out(out) + res


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class ChannelInterp(nn.Module):
    """Parameter-free linear resampling along the channel axis.

    Implemented as ``x0 + frac * (x1 - x0)`` over gathered neighbor
    channels, which is exactly the identity when in == out and exactly
    constant-preserving for constant inputs.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        if out_channels > 1:
            src = [c * (in_channels - 1) / (out_channels - 1) for c in range(out_channels)]
        else:
            src = [(in_channels - 1) / 2]
        idx0 = [min(int(math.floor(s)), in_channels - 1) for s in src]
        idx1 = [min(i + 1, in_channels - 1) for i in idx0]
        frac = [s - i for s, i in zip(src, idx0)]
        self.register_buffer("idx0", torch.tensor(idx0, dtype=torch.long), persistent=False)
        self.register_buffer("idx1", torch.tensor(idx1, dtype=torch.long), persistent=False)
        self.register_buffer("frac", torch.tensor(frac, dtype=torch.float32), persistent=False)

    def forward(self, x: Tensor) -> Tensor:
        x0 = x.index_select(1, self.idx0)
        x1 = x.index_select(1, self.idx1)
        return x0 + self.frac.to(x.dtype)[None, :, None, None] * (x1 - x0)


def _make_block(spec: BlockSpec, cfg: UNetConfig, heads: int) -> nn.Module:
    if spec.kind == RESIDUAL:
        return ResidualBlock(spec.in_channels, spec.out_channels, cfg.time_embed_dim, cfg.norm_groups)
    if spec.kind == ATTENTION:
        return AttentionBlock(spec.in_channels, heads, cfg.context_dim, cfg.norm_groups)
    if spec.kind == DOWNSAMPLE:
        return Downsample(spec.in_channels)
    if spec.kind == UPSAMPLE:
        return Upsample(spec.in_channels)
    if spec.kind == CHANNEL_INTERP:
        return ChannelInterp(spec.in_channels, spec.out_channels)
    raise AssertionError(spec.kind)


class _Stage(nn.Module):
    def __init__(self, blocks: list[nn.Module]):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)


class UNet(nn.Module):
    """Noise-residual predictor built from a ``UNetConfig``.

    ``forward`` returns the prediction plus the ordered stage-boundary
    feature taps.  Weights are immutable at inference time by convention;
    concurrent read-only forwards are safe.
    """

    def __init__(self, config: UNetConfig):
        super().__init__()
        validate_config(config)
        self.config = config
        tr = trace_config(config)
        self._trace = {str(bt.path): bt for bt in tr.blocks}

        c0 = config.stage_channels[0]
        self.conv_in = nn.Conv2d(config.in_channels, c0, 3, padding=1)
        self.time_embed = TimeEmbedding(config.time_embed_dim)
        self.down_stages = nn.ModuleList()
        for i, stage in enumerate(config.blocks_per_down_stage):
            heads = config.heads_for_stage(i)
            self.down_stages.append(_Stage([_make_block(b, config, heads) for b in stage]))
        mid_heads = config.heads_for_stage(config.num_stages - 1)
        self.mid = _Stage([_make_block(b, config, mid_heads) for b in config.mid_blocks])
        self.up_stages = nn.ModuleList()
        for i, stage in enumerate(config.blocks_per_up_stage):
            heads = config.heads_for_stage(config.num_stages - 1 - i)
            self.up_stages.append(_Stage([_make_block(b, config, heads) for b in stage]))
        self.out_norm = nn.GroupNorm(config.norm_groups, c0)
        self.conv_out = nn.Conv2d(c0, config.out_channels, 3, padding=1)

        self._capture: list[AttentionCapture] | None = None

    # -- capture -------------------------------------------------------------

    @contextlib.contextmanager
    def capture_cross_attention(self):
        """Record cross-attention probabilities of non-null batch elements."""
        records: list[AttentionCapture] = []
        prev = self._capture
        self._capture = records
        try:
            yield records
        finally:
            self._capture = prev

    # -- forward ---------------------------------------------------------------

    def _check_inputs(self, z_t: Tensor, t: Tensor, cond: Condition) -> Tensor:
        if z_t.dim() != 4:
            raise DimensionError(f"latent must be [B, C, H, W], got {tuple(z_t.shape)}")
        if z_t.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"latent has {z_t.shape[1]} channels, config expects {self.config.in_channels}"
            )
        div = 2 ** (self.config.num_stages - 1)
        if z_t.shape[2] % div or z_t.shape[3] % div:
            raise DimensionError(
                f"latent {tuple(z_t.shape[2:])} must be divisible by 2^(stages-1) = {div}"
            )
        if not torch.is_tensor(t):
            t = torch.tensor([int(t)] * z_t.shape[0])
        if t.dim() == 0:
            t = t.expand(z_t.shape[0]).clone()
        if t.shape[0] != z_t.shape[0]:
            raise DimensionError(f"timestep batch {t.shape[0]} != latent batch {z_t.shape[0]}")
        if (t < 1).any():
            raise DomainError(f"timesteps must be >= 1, got min {int(t.min())}")
        if cond.embedding.shape[0] != z_t.shape[0]:
            raise DimensionError(
                f"condition batch {cond.embedding.shape[0]} != latent batch {z_t.shape[0]}"
            )
        if cond.embedding.shape[1] != self.config.context_len:
            raise DimensionError(
                f"condition has {cond.embedding.shape[1]} rows, config expects {self.config.context_len}"
            )
        if cond.embedding.shape[2] != self.config.context_dim:
            raise DimensionError(
                f"condition width {cond.embedding.shape[2]} != context_dim {self.config.context_dim}"
            )
        return t

    def _capture_fn(self, path: str, h: int, w: int, null_flag: Tensor):
        if self._capture is None:
            return None
        records = self._capture

        def hook(probs: Tensor) -> None:
            keep = ~null_flag
            if keep.any():
                records.append(AttentionCapture(path, h, w, probs[keep].detach()))

        return hook

    def forward(self, z_t: Tensor, t, cond: Condition) -> tuple[Tensor, dict[str, Tensor]]:
        t = self._check_inputs(z_t, t, cond)
        temb = self.time_embed(t)
        ctx = cond.embedding
        taps: dict[str, Tensor] = {}

        def run(section: str, stage_idx: int, block_idx: int, module: nn.Module, h: Tensor) -> Tensor:
            bt = self._trace[f"{section}.{stage_idx}.{block_idx}"]
            if isinstance(module, ResidualBlock):
                h = module(h, temb)
            elif isinstance(module, AttentionBlock):
                cap = self._capture_fn(
                    f"{section}.{stage_idx}.{block_idx}", h.shape[2], h.shape[3], cond.null_flag
                )
                h = module(h, ctx, capture=cap)
            else:
                h = module(h)
            if bt.spec.tap_id is not None:
                taps[bt.spec.tap_id] = h
            return h

        h = self.conv_in(z_t)
        skips = [h]
        for i, stage in enumerate(self.down_stages):
            for j, module in enumerate(stage.blocks):
                bt = self._trace[f"down.{i}.{j}"]
                h = run("down", i, j, module, h)
                if bt.pushes_skip:
                    skips.append(h)
        for j, module in enumerate(self.mid.blocks):
            h = run("mid", 0, j, module, h)
        for i, stage in enumerate(self.up_stages):
            for j, module in enumerate(stage.blocks):
                bt = self._trace[f"up.{i}.{j}"]
                if bt.pops_skip:
                    h = torch.cat([h, skips.pop()], dim=1)
                h = run("up", i, j, module, h)
        eps = self.conv_out(F.silu(self.out_norm(h)))
        if not torch.isfinite(eps).all():
            raise NumericalError("forward pass produced non-finite outputs")
        return eps, taps


class ConditionEmbedder(nn.Module):
    """Learned token-embedding table; id 0 is the null/unconditional token."""

    def __init__(self, vocab_size: int, context_dim: int, context_len: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.context_len = context_len
        self.table = nn.Embedding(vocab_size, context_dim)

    def embed(self, tokens: Tensor, null_mask: Tensor | None = None) -> Condition:
        if tokens.dim() != 2 or tokens.shape[1] != self.context_len:
            raise DimensionError(
                f"tokens must be [B, {self.context_len}], got {tuple(tokens.shape)}"
            )
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise DomainError("token id outside the vocabulary")
        tokens = tokens.long()
        if null_mask is not None:
            tokens = torch.where(null_mask[:, None], torch.zeros_like(tokens), tokens)
        null_flag = (tokens == 0).all(dim=1)
        return Condition(tokens=tokens, embedding=self.table(tokens), null_flag=null_flag)

    def null_condition(self, batch_size: int) -> Condition:
        tokens = torch.zeros(batch_size, self.context_len, dtype=torch.long)
        return self.embed(tokens)


# ---------------------------------------------------------------------------
# deterministic construction
# ---------------------------------------------------------------------------


def _init_module(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (m.weight[0][0].numel() if m.weight.dim() > 2 else 1)
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
        elif isinstance(m, nn.Embedding):
            with torch.no_grad():
                m.weight.normal_(0.0, 1.0, generator=gen)


def build_unet(config: UNetConfig, seed: int) -> UNet:
    """Construct a U-Net with bit-reproducible initialization for a seed."""
    model = UNet(config)
    gen = torch.Generator().manual_seed(seed)
    _init_module(model, gen)
    return model


def build_embedder(vocab_size: int, config: UNetConfig, seed: int) -> ConditionEmbedder:
    emb = ConditionEmbedder(vocab_size, config.context_dim, config.context_len)
    gen = torch.Generator().manual_seed(seed)
    _init_module(emb, gen)
    return emb
