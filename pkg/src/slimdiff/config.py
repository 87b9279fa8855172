"""Declarative U-Net architecture descriptions.

A ``UNetConfig`` is a plain-data description of a conditional U-Net:
ordered block lists per resolution stage, channel counts, attention heads
and conditioning dimensions.  Everything downstream (model construction,
compression plans, parameter/MAC accounting) operates on this description,
so structural edits are config transforms and never touch live modules.

Skip-connection bookkeeping is part of the description: every down-path
block carries a ``unit`` index (a residual block and its attention partner
share one unit) and one skip tensor is pushed after the last block of each
unit, plus one after each downsample.  Up-path residual blocks pop skips
LIFO; whether a block pops is derived from its declared input channels
during the symbolic trace below.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

from .errors import ConfigError, StructuralError

RESIDUAL = "residual"
ATTENTION = "attention"
DOWNSAMPLE = "downsample"
UPSAMPLE = "upsample"
CHANNEL_INTERP = "channel_interp"

BLOCK_KINDS = (RESIDUAL, ATTENTION, DOWNSAMPLE, UPSAMPLE, CHANNEL_INTERP)

DOWN = "down"
MID = "mid"
UP = "up"

# Feed-forward expansion inside attention blocks.  A plain-GELU FFN at 6x
# matches the parameter and MAC budget of the reference full-size nets.
FFN_EXPANSION = 6


@dataclass(frozen=True, order=True)
class BlockPath:
    """Address of one block: section ('down'|'mid'|'up'), stage, block index."""

    section: str
    stage: int
    index: int

    def __str__(self) -> str:
        return f"{self.section}.{self.stage}.{self.index}"

    @classmethod
    def parse(cls, text: str) -> "BlockPath":
        parts = text.split(".")
        if len(parts) != 3 or parts[0] not in (DOWN, MID, UP):
            raise ConfigError(f"malformed block path {text!r}")
        return cls(parts[0], int(parts[1]), int(parts[2]))


@dataclass(frozen=True)
class BlockSpec:
    """One block in a stage's ordered block list.

    ``unit`` groups a residual block with its attention partner; skip
    tensors are pushed per unit on the down path.  ``tap_id`` marks the
    block after which a stage-boundary feature tap is captured.
    """

    kind: str
    in_channels: int
    out_channels: int
    removable: bool = True
    tap_id: str | None = None
    unit: int = 0

    def __post_init__(self) -> None:
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(
                f"block channels must be positive, got {self.in_channels}->{self.out_channels}"
            )
        if self.kind in (DOWNSAMPLE, UPSAMPLE) and self.in_channels != self.out_channels:
            raise ConfigError(f"{self.kind} blocks keep their channel count")

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "removable": self.removable,
            "unit": self.unit,
        }
        if self.tap_id is not None:
            d["tap_id"] = self.tap_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BlockSpec":
        return cls(
            kind=d["kind"],
            in_channels=int(d["in_channels"]),
            out_channels=int(d["out_channels"]),
            removable=bool(d.get("removable", True)),
            tap_id=d.get("tap_id"),
            unit=int(d.get("unit", 0)),
        )


@dataclass(frozen=True)
class UNetConfig:
    """Full declarative description of a conditional U-Net."""

    stage_channels: tuple[int, ...]
    blocks_per_down_stage: tuple[tuple[BlockSpec, ...], ...]
    mid_blocks: tuple[BlockSpec, ...]
    blocks_per_up_stage: tuple[tuple[BlockSpec, ...], ...]
    attention_heads: int | tuple[int, ...] = 8
    context_dim: int = 768
    context_len: int = 77
    norm_groups: int = 32
    time_embed_dim: int = 1280
    in_channels: int = 4
    out_channels: int = 4

    # -- accessors ---------------------------------------------------------

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    def heads_for_stage(self, stage: int) -> int:
        if isinstance(self.attention_heads, int):
            return self.attention_heads
        return self.attention_heads[stage]

    def stage_blocks(self, section: str, stage: int) -> tuple[BlockSpec, ...]:
        if section == DOWN:
            return self.blocks_per_down_stage[stage]
        if section == MID:
            if stage != 0:
                raise ConfigError("mid section has a single stage (index 0)")
            return self.mid_blocks
        if section == UP:
            return self.blocks_per_up_stage[stage]
        raise ConfigError(f"unknown section {section!r}")

    def get_block(self, path: BlockPath) -> BlockSpec:
        blocks = self.stage_blocks(path.section, path.stage)
        if not 0 <= path.index < len(blocks):
            raise ConfigError(f"no block at {path}")
        return blocks[path.index]

    def iter_blocks(self) -> Iterator[tuple[BlockPath, BlockSpec]]:
        for i, stage in enumerate(self.blocks_per_down_stage):
            for j, b in enumerate(stage):
                yield BlockPath(DOWN, i, j), b
        for j, b in enumerate(self.mid_blocks):
            yield BlockPath(MID, 0, j), b
        for i, stage in enumerate(self.blocks_per_up_stage):
            for j, b in enumerate(stage):
                yield BlockPath(UP, i, j), b

    def stage_sections(self) -> Iterator[tuple[str, int, tuple[BlockSpec, ...]]]:
        for i, stage in enumerate(self.blocks_per_down_stage):
            yield DOWN, i, stage
        if self.mid_blocks:
            yield MID, 0, self.mid_blocks
        for i, stage in enumerate(self.blocks_per_up_stage):
            yield UP, i, stage

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "stage_channels": list(self.stage_channels),
            "blocks_per_down_stage": [[b.to_dict() for b in s] for s in self.blocks_per_down_stage],
            "mid_blocks": [b.to_dict() for b in self.mid_blocks],
            "blocks_per_up_stage": [[b.to_dict() for b in s] for s in self.blocks_per_up_stage],
            "attention_heads": self.attention_heads
            if isinstance(self.attention_heads, int)
            else list(self.attention_heads),
            "context_dim": self.context_dim,
            "context_len": self.context_len,
            "norm_groups": self.norm_groups,
            "time_embed_dim": self.time_embed_dim,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        heads = d.get("attention_heads", 8)
        cfg = cls(
            stage_channels=tuple(int(c) for c in d["stage_channels"]),
            blocks_per_down_stage=tuple(
                tuple(BlockSpec.from_dict(b) for b in s) for s in d["blocks_per_down_stage"]
            ),
            mid_blocks=tuple(BlockSpec.from_dict(b) for b in d.get("mid_blocks", [])),
            blocks_per_up_stage=tuple(
                tuple(BlockSpec.from_dict(b) for b in s) for s in d["blocks_per_up_stage"]
            ),
            attention_heads=heads if isinstance(heads, int) else tuple(int(h) for h in heads),
            context_dim=int(d.get("context_dim", 768)),
            context_len=int(d.get("context_len", 77)),
            norm_groups=int(d.get("norm_groups", 32)),
            time_embed_dim=int(d.get("time_embed_dim", 1280)),
            in_channels=int(d.get("in_channels", 4)),
            out_channels=int(d.get("out_channels", 4)),
        )
        validate_config(cfg)
        return cfg

    @classmethod
    def from_json(cls, source) -> "UNetConfig":
        if hasattr(source, "read"):
            d = json.load(source)
        else:
            text = str(source)
            if text.lstrip().startswith("{"):
                d = json.loads(text)
            else:
                with open(text, "r", encoding="utf-8") as fh:
                    d = json.load(fh)
        return cls.from_dict(d)


# ---------------------------------------------------------------------------
# validation and the symbolic trace
# ---------------------------------------------------------------------------


def validate_config(cfg: UNetConfig) -> None:
    """Check declared invariants; raises ConfigError naming the bad field."""
    n = cfg.num_stages
    if n < 1:
        raise ConfigError("stage_channels: need at least one stage")
    if len(cfg.blocks_per_down_stage) != n:
        raise ConfigError("blocks_per_down_stage: length must match stage_channels")
    if len(cfg.blocks_per_up_stage) != n:
        raise ConfigError("blocks_per_up_stage: down/up stage counts must be equal")
    for section, lists in ((DOWN, cfg.blocks_per_down_stage), (UP, cfg.blocks_per_up_stage)):
        for i, stage in enumerate(lists):
            if not stage:
                raise ConfigError(f"blocks_per_{section}_stage[{i}]: every stage needs >=1 block")
            units = [b.unit for b in stage]
            if units != sorted(units):
                raise ConfigError(f"blocks_per_{section}_stage[{i}]: unit ids must be non-decreasing")
    if isinstance(cfg.attention_heads, tuple) and len(cfg.attention_heads) != n:
        raise ConfigError("attention_heads: per-stage list must match stage count")
    for i in range(n):
        c = cfg.stage_channels[i]
        h = cfg.heads_for_stage(i)
        if h < 1 or c % h != 0:
            raise ConfigError(f"attention_heads: {h} does not divide stage channel count {c}")
    if cfg.norm_groups < 1:
        raise ConfigError("norm_groups: must be positive")
    for path, b in cfg.iter_blocks():
        if b.kind == RESIDUAL:
            for c in (b.in_channels, b.out_channels):
                if c % cfg.norm_groups != 0:
                    raise ConfigError(f"norm_groups: {cfg.norm_groups} does not divide {c} at {path}")
        elif b.kind == ATTENTION:
            if b.in_channels != b.out_channels:
                raise ConfigError(f"attention block at {path} must keep its channel count")
            if b.in_channels % cfg.norm_groups != 0:
                raise ConfigError(
                    f"norm_groups: {cfg.norm_groups} does not divide {b.in_channels} at {path}"
                )
    if cfg.stage_channels[0] % cfg.norm_groups != 0:
        raise ConfigError("norm_groups: must divide the first stage channel count (output norm)")
    if cfg.context_dim < 1 or cfg.context_len < 1:
        raise ConfigError("context_dim/context_len: must be positive")
    if cfg.time_embed_dim % 8 != 0:
        raise ConfigError("time_embed_dim: must be divisible by 8 (sinusoidal quarter width)")
    if cfg.in_channels < 1 or cfg.out_channels < 1:
        raise ConfigError("in_channels/out_channels: must be positive")
    trace_config(cfg)  # channel flow + skip balance


@dataclass(frozen=True)
class BlockTrace:
    """Resolved placement of one block during the symbolic walk."""

    path: BlockPath
    spec: BlockSpec
    in_hw: tuple[int, int] | None
    out_hw: tuple[int, int] | None
    pops_skip: bool
    pushes_skip: bool
    heads: int


@dataclass(frozen=True)
class ConfigTrace:
    """Result of symbolically executing a config: shapes, skips, taps."""

    blocks: tuple[BlockTrace, ...]
    taps: tuple[tuple[str, tuple[int, int, int] | tuple[int, None, None]], ...]
    skips_pushed: int
    skips_popped: int

    def tap_shapes(self) -> dict:
        return dict(self.taps)

    def block(self, path: BlockPath) -> BlockTrace:
        for bt in self.blocks:
            if bt.path == path:
                return bt
        raise ConfigError(f"no block at {path}")


def _unit_last_indices(stage: Sequence[BlockSpec]) -> set[int]:
    last: dict[int, int] = {}
    for j, b in enumerate(stage):
        last[b.unit] = j
    return set(last.values())


def trace_config(cfg: UNetConfig, latent_hw: tuple[int, int] | None = None) -> ConfigTrace:
    """Symbolically run the network, checking channel flow and skip balance.

    With ``latent_hw`` given, spatial sizes are tracked (downsamples demand
    even sizes); otherwise only channels and skip bookkeeping are checked.
    Raises StructuralError on any inconsistency.
    """
    blocks: list[BlockTrace] = []
    taps: list[tuple[str, tuple]] = []
    hw = tuple(latent_hw) if latent_hw is not None else None
    if hw is not None and (hw[0] < 1 or hw[1] < 1):
        raise StructuralError(f"latent size {hw} must be positive")

    cursor = cfg.stage_channels[0]  # after the input conv
    skips: list[tuple[int, tuple | None]] = [(cursor, hw)]
    pushed = 1
    popped = 0

    def halve(size):
        if size is None:
            return None
        if size[0] % 2 or size[1] % 2:
            raise StructuralError(f"cannot downsample odd resolution {size}")
        return (size[0] // 2, size[1] // 2)

    for i, stage in enumerate(cfg.blocks_per_down_stage):
        pushers = _unit_last_indices(stage)
        heads = cfg.heads_for_stage(i)
        for j, b in enumerate(stage):
            path = BlockPath(DOWN, i, j)
            if b.in_channels != cursor:
                raise StructuralError(
                    f"{path}: expects {b.in_channels} input channels, gets {cursor}"
                )
            in_hw = hw
            if b.kind == DOWNSAMPLE:
                hw = halve(hw)
            elif b.kind == UPSAMPLE:
                raise StructuralError(f"{path}: upsample not allowed on the down path")
            cursor = b.out_channels
            push = j in pushers
            blocks.append(BlockTrace(path, b, in_hw, hw, False, push, heads))
            if push:
                skips.append((cursor, hw))
                pushed += 1
            if b.tap_id is not None:
                taps.append((b.tap_id, (cursor, hw[0], hw[1]) if hw else (cursor, None, None)))

    heads_mid = cfg.heads_for_stage(cfg.num_stages - 1)
    for j, b in enumerate(cfg.mid_blocks):
        path = BlockPath(MID, 0, j)
        if b.in_channels != cursor:
            raise StructuralError(f"{path}: expects {b.in_channels} input channels, gets {cursor}")
        if b.kind in (DOWNSAMPLE, UPSAMPLE):
            raise StructuralError(f"{path}: resampling not allowed in the mid stage")
        in_hw = hw
        cursor = b.out_channels
        blocks.append(BlockTrace(path, b, in_hw, hw, False, False, heads_mid))
        if b.tap_id is not None:
            taps.append((b.tap_id, (cursor, hw[0], hw[1]) if hw else (cursor, None, None)))

    n = cfg.num_stages
    for i, stage in enumerate(cfg.blocks_per_up_stage):
        heads = cfg.heads_for_stage(n - 1 - i)
        for j, b in enumerate(stage):
            path = BlockPath(UP, i, j)
            pops = False
            if b.kind in (RESIDUAL, CHANNEL_INTERP) and b.in_channels != cursor:
                if not skips:
                    raise StructuralError(f"{path}: needs a skip tensor but the stack is empty")
                skip_c, skip_hw = skips.pop()
                popped += 1
                pops = True
                if b.in_channels != cursor + skip_c:
                    raise StructuralError(
                        f"{path}: expects {b.in_channels} channels, gets "
                        f"{cursor}+{skip_c} after skip concat"
                    )
                if hw is not None and skip_hw is not None and tuple(skip_hw) != tuple(hw):
                    raise StructuralError(
                        f"{path}: skip resolution {skip_hw} does not match {hw}"
                    )
            elif b.in_channels != cursor:
                raise StructuralError(
                    f"{path}: expects {b.in_channels} input channels, gets {cursor}"
                )
            in_hw = hw
            if b.kind == UPSAMPLE:
                hw = (hw[0] * 2, hw[1] * 2) if hw is not None else None
            elif b.kind == DOWNSAMPLE:
                raise StructuralError(f"{path}: downsample not allowed on the up path")
            cursor = b.out_channels
            blocks.append(BlockTrace(path, b, in_hw, hw, pops, False, heads))
            if b.tap_id is not None:
                taps.append((b.tap_id, (cursor, hw[0], hw[1]) if hw else (cursor, None, None)))

    if skips:
        raise StructuralError(f"{len(skips)} skip tensor(s) never consumed by the up path")
    if cursor != cfg.stage_channels[0]:
        raise StructuralError(
            f"up path ends at {cursor} channels, output head expects {cfg.stage_channels[0]}"
        )
    if hw is not None and latent_hw is not None and tuple(hw) != tuple(latent_hw):
        raise StructuralError(f"output resolution {hw} does not match input {latent_hw}")
    return ConfigTrace(tuple(blocks), tuple(taps), pushed, popped)


# ---------------------------------------------------------------------------
# builders for the standard stage pattern
# ---------------------------------------------------------------------------


def stage_pattern_config(
    stage_channels: Sequence[int],
    *,
    attention_heads: int | Sequence[int] = 8,
    context_dim: int = 768,
    context_len: int = 77,
    norm_groups: int = 32,
    time_embed_dim: int | None = None,
    in_channels: int = 4,
    out_channels: int | None = None,
) -> UNetConfig:
    """Build the standard pattern: paired R-A units in down stages, triplet
    units in up stages, an R-A-R mid stage, and residual-only innermost
    stages.  This is the family all compression presets understand.
    """
    chans = tuple(int(c) for c in stage_channels)
    n = len(chans)
    if n < 2:
        raise ConfigError("stage_pattern_config needs at least two stages")
    if time_embed_dim is None:
        time_embed_dim = chans[0] * 4
    if out_channels is None:
        out_channels = in_channels

    down: list[tuple[BlockSpec, ...]] = []
    skips: list[int] = [chans[0]]
    for i in range(n):
        inner = i == n - 1
        blocks: list[BlockSpec] = []
        prev = chans[i - 1] if i > 0 else chans[0]
        for u in range(2):
            r_in = prev if u == 0 else chans[i]
            blocks.append(BlockSpec(RESIDUAL, r_in, chans[i], unit=u))
            if not inner:
                blocks.append(BlockSpec(ATTENTION, chans[i], chans[i], unit=u))
            skips.append(chans[i])
        blocks[-1] = replace(blocks[-1], tap_id=f"down.{i}")
        if not inner:
            blocks.append(BlockSpec(DOWNSAMPLE, chans[i], chans[i], removable=False, unit=2))
            skips.append(chans[i])
        down.append(tuple(blocks))

    c_mid = chans[-1]
    mid = (
        BlockSpec(RESIDUAL, c_mid, c_mid, unit=0),
        BlockSpec(ATTENTION, c_mid, c_mid, unit=1),
        BlockSpec(RESIDUAL, c_mid, c_mid, unit=2, tap_id="mid"),
    )

    up: list[tuple[BlockSpec, ...]] = []
    cursor = c_mid
    for j in range(n):
        stage_idx = n - 1 - j  # channel index this up stage runs at
        inner = j == 0
        c = chans[stage_idx]
        blocks = []
        for u in range(3):
            skip_c = skips.pop()
            blocks.append(BlockSpec(RESIDUAL, cursor + skip_c, c, unit=u))
            cursor = c
            if not inner:
                blocks.append(BlockSpec(ATTENTION, c, c, unit=u))
        blocks[-1] = replace(blocks[-1], tap_id=f"up.{j}")
        if j < n - 1:
            blocks.append(BlockSpec(UPSAMPLE, c, c, removable=False, unit=3))
        up.append(tuple(blocks))

    heads = attention_heads if isinstance(attention_heads, int) else tuple(attention_heads)
    cfg = UNetConfig(
        stage_channels=chans,
        blocks_per_down_stage=tuple(down),
        mid_blocks=mid,
        blocks_per_up_stage=tuple(up),
        attention_heads=heads,
        context_dim=context_dim,
        context_len=context_len,
        norm_groups=norm_groups,
        time_embed_dim=time_embed_dim,
        in_channels=in_channels,
        out_channels=out_channels,
    )
    validate_config(cfg)
    return cfg


def fullsize_v1_config() -> UNetConfig:
    """Full-size v1-style net: 859.5M parameters at 64x64 latents."""
    return stage_pattern_config(
        [320, 640, 1280, 1280],
        attention_heads=8,
        context_dim=768,
        context_len=77,
        norm_groups=32,
        time_embed_dim=1280,
        in_channels=4,
    )


def fullsize_v2_config() -> UNetConfig:
    """Full-size v2-style net: per-stage head counts, 1024-wide context."""
    return stage_pattern_config(
        [320, 640, 1280, 1280],
        attention_heads=[5, 10, 20, 20],
        context_dim=1024,
        context_len=77,
        norm_groups=32,
        time_embed_dim=1280,
        in_channels=4,
    )


def toy_config(
    stage_channels: Sequence[int] = (16, 32),
    *,
    attention_heads: int | Sequence[int] = 2,
    context_dim: int = 32,
    context_len: int = 8,
    norm_groups: int = 8,
    time_embed_dim: int = 64,
    in_channels: int = 3,
) -> UNetConfig:
    """Desk-scale config for pixel-space experiments on small images."""
    return stage_pattern_config(
        stage_channels,
        attention_heads=attention_heads,
        context_dim=context_dim,
        context_len=context_len,
        norm_groups=norm_groups,
        time_embed_dim=time_embed_dim,
        in_channels=in_channels,
    )
