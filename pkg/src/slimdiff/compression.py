"""Block-removal plans, named presets, and teacher->student weight inheritance.

All transforms are pure functions over ``UNetConfig``; applying a plan
yields a new config plus an ``InheritanceMap`` that names, for every
student parameter, the teacher parameter it is initialized from.  Because
removals never change the channel signature of retained blocks, mapped
parameters are always shape-equal and inheritance is total.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

from .config import (
    ATTENTION,
    CHANNEL_INTERP,
    DOWN,
    DOWNSAMPLE,
    FFN_EXPANSION,
    MID,
    RESIDUAL,
    UP,
    UPSAMPLE,
    BlockPath,
    BlockSpec,
    UNetConfig,
    validate_config,
)
from .errors import InheritanceError, PlanError, StructuralError

PRESETS = ("base", "small", "tiny")


@dataclass(frozen=True)
class CompressionPlan:
    """A set of block removals/substitutions plus whole-stage flags.

    ``remove_innermost_stages`` implies ``remove_mid_stage`` (the tiny
    preset builds on the small one).  Substituted blocks are replaced by
    parameter-free channel interpolation in place, which preserves skip
    bookkeeping; removals and substitutions must be disjoint.
    """

    removals: frozenset[BlockPath] = frozenset()
    remove_mid_stage: bool = False
    remove_innermost_stages: bool = False
    substitutions: frozenset[BlockPath] = frozenset()
    preset: str | None = None

    def is_empty(self) -> bool:
        return not (
            self.removals
            or self.substitutions
            or self.remove_mid_stage
            or self.remove_innermost_stages
        )

    def to_dict(self) -> dict:
        return {
            "removals": sorted(str(p) for p in self.removals),
            "remove_mid_stage": self.remove_mid_stage,
            "remove_innermost_stages": self.remove_innermost_stages,
            "substitutions": sorted(str(p) for p in self.substitutions),
            "preset": self.preset,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "CompressionPlan":
        return cls(
            removals=frozenset(BlockPath.parse(p) for p in d.get("removals", [])),
            remove_mid_stage=bool(d.get("remove_mid_stage", False)),
            remove_innermost_stages=bool(d.get("remove_innermost_stages", False)),
            substitutions=frozenset(BlockPath.parse(p) for p in d.get("substitutions", [])),
            preset=d.get("preset"),
        )

    @classmethod
    def from_json(cls, source) -> "CompressionPlan":
        text = str(source)
        if text.lstrip().startswith("{"):
            return cls.from_dict(json.loads(text))
        with open(text, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class InheritanceMap:
    """Teacher-parameter -> student-parameter name pairs, total over the student."""

    pairs: tuple[tuple[str, str], ...]

    def as_dict(self) -> dict[str, str]:
        return dict(self.pairs)

    def inverted(self) -> dict[str, str]:
        return {s: t for t, s in self.pairs}

    def __len__(self) -> int:
        return len(self.pairs)


def validate_plan(teacher: UNetConfig, plan: CompressionPlan) -> None:
    """Raises PlanError if the plan does not make sense for this teacher."""
    if plan.remove_innermost_stages and not plan.remove_mid_stage:
        raise PlanError("remove_innermost_stages requires remove_mid_stage (tiny builds on small)")
    overlap = plan.removals & plan.substitutions
    if overlap:
        raise PlanError(f"blocks both removed and substituted: {sorted(map(str, overlap))}")
    inner_down = teacher.num_stages - 1
    for path in sorted(plan.removals | plan.substitutions):
        block = teacher.get_block(path)  # raises ConfigError -> surfaced as-is
        if path in plan.removals and not block.removable:
            raise PlanError(f"{path} ({block.kind}) is not a removable block")
        if plan.remove_mid_stage and path.section == MID:
            raise PlanError(f"{path} is already covered by remove_mid_stage")
        if plan.remove_innermost_stages and (
            (path.section == DOWN and path.stage == inner_down)
            or (path.section == UP and path.stage == 0)
        ):
            raise PlanError(f"{path} is already covered by remove_innermost_stages")


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


def _stage_units(stage: Iterable[BlockSpec]) -> dict[int, list[int]]:
    units: dict[int, list[int]] = {}
    for j, b in enumerate(stage):
        if b.kind in (DOWNSAMPLE, UPSAMPLE):
            continue
        units.setdefault(b.unit, []).append(j)
    return units


def preset_plan(name: str, teacher: UNetConfig) -> CompressionPlan:
    """Named presets over the standard stage pattern.

    base:  drop the second R-A unit of every down and up stage (up stages
           keep their first and third units, so each retained block keeps
           its original skip partner);
    small: base plus removal of the whole mid stage;
    tiny:  small plus removal of the innermost down/up stages together
           with their adjoining down-/upsample operators.
    """
    name = name.lower()
    if name not in PRESETS:
        raise PlanError(f"unknown preset {name!r}, expected one of {PRESETS}")
    n = teacher.num_stages
    removals: set[BlockPath] = set()
    inner_removed = name == "tiny"
    for i, stage in enumerate(teacher.blocks_per_down_stage):
        units = _stage_units(stage)
        if len(units) != 2:
            raise PlanError(
                f"down stage {i} has {len(units)} block unit(s); presets expect paired units"
            )
        if inner_removed and i == n - 1:
            continue
        removals.update(BlockPath(DOWN, i, j) for j in units[sorted(units)[1]])
    for i, stage in enumerate(teacher.blocks_per_up_stage):
        units = _stage_units(stage)
        if len(units) != 3:
            raise PlanError(
                f"up stage {i} has {len(units)} block unit(s); presets expect triplet units"
            )
        if inner_removed and i == 0:
            continue
        removals.update(BlockPath(UP, i, j) for j in units[sorted(units)[1]])
    if not teacher.mid_blocks:
        raise PlanError("presets expect a teacher with a mid stage")
    plan = CompressionPlan(
        removals=frozenset(removals),
        remove_mid_stage=name in ("small", "tiny"),
        remove_innermost_stages=inner_removed,
        preset=name,
    )
    validate_plan(teacher, plan)
    return plan


# ---------------------------------------------------------------------------
# applying plans
# ---------------------------------------------------------------------------


def _interp_for(block: BlockSpec) -> BlockSpec:
    return BlockSpec(
        CHANNEL_INTERP,
        block.in_channels,
        block.out_channels,
        removable=False,
        tap_id=block.tap_id,
        unit=block.unit,
    )


def _retap(stage: list[BlockSpec], tap_id: str | None) -> list[BlockSpec]:
    """Re-attach the stage's tap to its last non-resampling block."""
    stage = [replace(b, tap_id=None) for b in stage]
    if tap_id is None:
        return stage
    for j in range(len(stage) - 1, -1, -1):
        if stage[j].kind not in (DOWNSAMPLE, UPSAMPLE):
            stage[j] = replace(stage[j], tap_id=tap_id)
            return stage
    raise StructuralError(f"stage for tap {tap_id!r} kept no block to capture it on")


def _stage_tap(stage: Iterable[BlockSpec]) -> str | None:
    for b in stage:
        if b.tap_id is not None:
            return b.tap_id
    return None


def apply_plan(teacher: UNetConfig, plan: CompressionPlan) -> tuple[UNetConfig, InheritanceMap]:
    """Produce the compressed student config and its weight-inheritance map."""
    validate_config(teacher)
    validate_plan(teacher, plan)
    n = teacher.num_stages
    inner = plan.remove_innermost_stages

    # (section, teacher stage, teacher block) -> (student stage, student block)
    index_map: dict[tuple[str, int, int], tuple[int, int]] = {}

    def rebuild(
        section: str, i: int, stage, student_stage_idx: int, drop_downsample: bool = False
    ) -> tuple[BlockSpec, ...]:
        kept: list[BlockSpec] = []
        dropped_ds = 0
        for j, b in enumerate(stage):
            path = BlockPath(section, i, j)
            if drop_downsample and b.kind == DOWNSAMPLE:
                dropped_ds += 1
                continue
            if path in plan.removals:
                continue
            if path in plan.substitutions:
                kept.append(_interp_for(b))
                continue
            index_map[(section, i, j)] = (student_stage_idx, len(kept))
            kept.append(b)
        if drop_downsample and dropped_ds != 1:
            raise StructuralError(
                f"{section} stage {i}: expected exactly one downsample before the "
                f"removed innermost stage, found {dropped_ds}"
            )
        if not any(b.kind not in (DOWNSAMPLE, UPSAMPLE) for b in kept):
            raise StructuralError(
                f"{section} stage {i}: plan keeps no processing block in the stage"
            )
        return tuple(_retap(kept, _stage_tap(stage)))

    down: list[tuple[BlockSpec, ...]] = []
    for i, stage in enumerate(teacher.blocks_per_down_stage):
        if inner and i == n - 1:
            continue
        down.append(rebuild(DOWN, i, stage, len(down), drop_downsample=inner and i == n - 2))

    mid: tuple[BlockSpec, ...] = ()
    if not plan.remove_mid_stage and teacher.mid_blocks:
        kept: list[BlockSpec] = []
        for j, b in enumerate(teacher.mid_blocks):
            path = BlockPath(MID, 0, j)
            if path in plan.removals:
                continue
            if path in plan.substitutions:
                kept.append(_interp_for(b))
                continue
            index_map[(MID, 0, j)] = (0, len(kept))
            kept.append(b)
        if not kept:
            raise StructuralError("plan empties the mid stage; use remove_mid_stage instead")
        mid = tuple(_retap(kept, _stage_tap(teacher.mid_blocks)))

    up: list[tuple[BlockSpec, ...]] = []
    for i, stage in enumerate(teacher.blocks_per_up_stage):
        if inner and i == 0:
            continue
        up.append(rebuild(UP, i, stage, len(up)))

    chans = teacher.stage_channels[:-1] if inner else teacher.stage_channels
    heads = teacher.attention_heads
    if inner and not isinstance(heads, int):
        heads = heads[:-1]

    student = UNetConfig(
        stage_channels=chans,
        blocks_per_down_stage=tuple(down),
        mid_blocks=mid,
        blocks_per_up_stage=tuple(up),
        attention_heads=heads,
        context_dim=teacher.context_dim,
        context_len=teacher.context_len,
        norm_groups=teacher.norm_groups,
        time_embed_dim=teacher.time_embed_dim,
        in_channels=teacher.in_channels,
        out_channels=teacher.out_channels,
    )
    validate_config(student)

    pairs: list[tuple[str, str]] = []
    for name in TOP_LEVEL_PARAMS:
        pairs.append((name, name))
    for (section, i, j), (si, sj) in sorted(index_map.items()):
        spec = teacher.get_block(BlockPath(section, i, j))
        prefix_t = _module_prefix(section, i, j)
        prefix_s = _module_prefix(section, si, sj)
        for sub in block_parameter_names(spec):
            pairs.append((f"{prefix_t}.{sub}", f"{prefix_s}.{sub}"))
    return student, InheritanceMap(tuple(pairs))


def substitute_channel_interp(teacher: UNetConfig, path: BlockPath | str) -> UNetConfig:
    """Replace one channel-changing block with parameter-free interpolation.

    Blocks whose input and output channel counts already match must be
    plainly removed instead; asking for interpolation there is a misuse.
    """
    if isinstance(path, str):
        path = BlockPath.parse(path)
    block = teacher.get_block(path)
    if block.in_channels == block.out_channels:
        raise PlanError(
            f"{path} has equal in/out channels ({block.in_channels}); remove it instead"
        )
    student, _ = apply_plan(teacher, CompressionPlan(substitutions=frozenset({path})))
    return student


# ---------------------------------------------------------------------------
# parameter naming (single source for inheritance and archive mapping)
# ---------------------------------------------------------------------------

TOP_LEVEL_PARAMS = (
    "conv_in.weight",
    "conv_in.bias",
    "time_embed.lin1.weight",
    "time_embed.lin1.bias",
    "time_embed.lin2.weight",
    "time_embed.lin2.bias",
    "out_norm.weight",
    "out_norm.bias",
    "conv_out.weight",
    "conv_out.bias",
)


def _module_prefix(section: str, stage: int, index: int) -> str:
    if section == MID:
        return f"mid.blocks.{index}"
    return f"{section}_stages.{stage}.blocks.{index}"


_ATTN_SUBNAMES = (
    "norm.weight", "norm.bias",
    "proj_in.weight", "proj_in.bias",
    "ln1.weight", "ln1.bias",
    "self_attn.to_q.weight", "self_attn.to_k.weight", "self_attn.to_v.weight",
    "self_attn.to_out.weight", "self_attn.to_out.bias",
    "ln2.weight", "ln2.bias",
    "cross_attn.to_q.weight", "cross_attn.to_k.weight", "cross_attn.to_v.weight",
    "cross_attn.to_out.weight", "cross_attn.to_out.bias",
    "ln3.weight", "ln3.bias",
    "ff.lin1.weight", "ff.lin1.bias",
    "ff.lin2.weight", "ff.lin2.bias",
    "proj_out.weight", "proj_out.bias",
)

_RESIDUAL_SUBNAMES = (
    "norm1.weight", "norm1.bias",
    "conv1.weight", "conv1.bias",
    "time_proj.weight", "time_proj.bias",
    "norm2.weight", "norm2.bias",
    "conv2.weight", "conv2.bias",
)


def block_parameter_names(spec: BlockSpec) -> tuple[str, ...]:
    if spec.kind == RESIDUAL:
        names = _RESIDUAL_SUBNAMES
        if spec.in_channels != spec.out_channels:
            names = names + ("skip.weight", "skip.bias")
        return names
    if spec.kind == ATTENTION:
        return _ATTN_SUBNAMES
    if spec.kind in (DOWNSAMPLE, UPSAMPLE):
        return ("conv.weight", "conv.bias")
    if spec.kind == CHANNEL_INTERP:
        return ()
    raise AssertionError(spec.kind)


def parameter_names(cfg: UNetConfig) -> tuple[str, ...]:
    """Every parameter name of a model built from this config, in module order."""
    names: list[str] = list(TOP_LEVEL_PARAMS[:6])
    for path, spec in cfg.iter_blocks():
        prefix = _module_prefix(path.section, path.stage, path.index)
        names.extend(f"{prefix}.{sub}" for sub in block_parameter_names(spec))
    names.extend(TOP_LEVEL_PARAMS[6:])
    return tuple(names)


def removed_parameter_names(teacher: UNetConfig, plan: CompressionPlan) -> tuple[str, ...]:
    """Teacher parameters with no counterpart in the student."""
    _, imap = apply_plan(teacher, plan)
    mapped = {t for t, _ in imap.pairs}
    return tuple(n for n in parameter_names(teacher) if n not in mapped)


# ---------------------------------------------------------------------------
# weight copies between live models
# ---------------------------------------------------------------------------


def inherit_weights(teacher_model, student_model, imap: InheritanceMap):
    """Copy mapped teacher parameters into the student, bit-exact.

    Every student parameter must be covered by the map and shapes must
    agree; anything else raises InheritanceError listing the offenders.
    """
    import torch

    t_params = dict(teacher_model.named_parameters())
    s_params = dict(student_model.named_parameters())
    problems = []
    mapping = imap.as_dict()
    targets = set(mapping.values())
    for name in s_params:
        if name not in targets:
            problems.append(f"student parameter {name} not covered by the map")
    for t_name, s_name in imap.pairs:
        if t_name not in t_params:
            problems.append(f"teacher parameter {t_name} does not exist")
            continue
        if s_name not in s_params:
            problems.append(f"student parameter {s_name} does not exist")
            continue
        if tuple(t_params[t_name].shape) != tuple(s_params[s_name].shape):
            problems.append(
                f"shape mismatch {t_name} {tuple(t_params[t_name].shape)} -> "
                f"{s_name} {tuple(s_params[s_name].shape)}"
            )
    if problems:
        raise InheritanceError("; ".join(problems))
    with torch.no_grad():
        for t_name, s_name in imap.pairs:
            s_params[s_name].copy_(t_params[t_name])
    return student_model
