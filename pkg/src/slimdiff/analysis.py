"""Analytic compute accounting, pruning sensitivity, and attention attribution.

Parameter and MAC totals are derived in closed form from a ``UNetConfig``;
no model is instantiated.  The MAC convention follows common profiler
practice: convolution and linear multiply-accumulates are counted
(``k^2*Cin*Cout*Hout*Wout`` and ``in*out*tokens``); normalizations,
activations and elementwise ops are not.  Attention score/value matmuls
(``2*heads*seq_q*seq_kv*head_dim`` per attention) are tallied in a separate
column and excluded from the headline total unless explicitly requested,
which keeps headline numbers comparable with conv/linear-only profilers.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from .config import (
    ATTENTION,
    CHANNEL_INTERP,
    DOWNSAMPLE,
    FFN_EXPANSION,
    RESIDUAL,
    UPSAMPLE,
    BlockSpec,
    BlockTrace,
    UNetConfig,
    trace_config,
)
from .errors import DomainError

MAC_CONVENTION = (
    "conv/linear multiply-accumulates only (norms, activations, elementwise excluded); "
    "attention score/value matmuls reported separately in attn_matmul_macs"
)


@dataclass(frozen=True)
class ComputeRow:
    """Per-block (or head/stem) accounting entry."""

    path: str
    kind: str
    params: int
    macs: int = 0
    attn_matmul_macs: int = 0


@dataclass(frozen=True)
class ComputeReport:
    """Parameter/MAC totals per block plus grand totals.

    ``macs`` columns are per single forward step at ``latent_hw``;
    ``total_macs(steps)`` scales linearly with the step count.
    """

    rows: tuple[ComputeRow, ...]
    latent_hw: tuple[int, int] | None
    steps: int = 1
    convention: str = MAC_CONVENTION
    include_attention_matmuls: bool = False

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs_one_step(self) -> int:
        base = sum(r.macs for r in self.rows)
        if self.include_attention_matmuls:
            base += sum(r.attn_matmul_macs for r in self.rows)
        return base

    @property
    def macs_total(self) -> int:
        return self.steps * self.macs_one_step

    def stage_totals(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for r in self.rows:
            key = ".".join(r.path.split(".")[:2]) if r.path.count(".") >= 2 else r.path
            agg = out.setdefault(key, {"params": 0, "macs": 0, "attn_matmul_macs": 0})
            agg["params"] += r.params
            agg["macs"] += r.macs
            agg["attn_matmul_macs"] += r.attn_matmul_macs
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "convention": self.convention,
                "latent_hw": list(self.latent_hw) if self.latent_hw else None,
                "steps": self.steps,
                "include_attention_matmuls": self.include_attention_matmuls,
                "total_params": self.total_params,
                "macs_one_step": self.macs_one_step,
                "macs_total": self.macs_total,
                "rows": [
                    {
                        "path": r.path,
                        "kind": r.kind,
                        "params": r.params,
                        "macs": r.macs,
                        "attn_matmul_macs": r.attn_matmul_macs,
                    }
                    for r in self.rows
                ],
            },
            indent=2,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# convention: {self.convention}\n")
        buf.write(f"# latent_hw: {self.latent_hw}  steps: {self.steps}\n")
        w = csv.writer(buf)
        w.writerow(["path", "kind", "params", "macs", "attn_matmul_macs"])
        for r in self.rows:
            w.writerow([r.path, r.kind, r.params, r.macs, r.attn_matmul_macs])
        w.writerow(["TOTAL", "", self.total_params, self.macs_one_step, ""])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# closed-form per-layer counts
# ---------------------------------------------------------------------------


def _conv_params(cin: int, cout: int, k: int) -> int:
    return k * k * cin * cout + cout


def _linear_params(din: int, dout: int, bias: bool = True) -> int:
    return din * dout + (dout if bias else 0)


def _norm_params(c: int) -> int:
    return 2 * c


def _residual_counts(b: BlockSpec, cfg: UNetConfig, hw) -> tuple[int, int]:
    cin, cout = b.in_channels, b.out_channels
    te = cfg.time_embed_dim
    params = (
        _norm_params(cin)
        + _conv_params(cin, cout, 3)
        + _linear_params(te, cout)
        + _norm_params(cout)
        + _conv_params(cout, cout, 3)
    )
    if cin != cout:
        params += _conv_params(cin, cout, 1)
    macs = 0
    if hw is not None:
        h, w = hw
        macs = 9 * cin * cout * h * w + 9 * cout * cout * h * w + te * cout
        if cin != cout:
            macs += cin * cout * h * w
    return params, macs


def _attention_counts(b: BlockSpec, cfg: UNetConfig, heads: int, hw) -> tuple[int, int, int]:
    c = b.in_channels
    ctx = cfg.context_dim
    mult = FFN_EXPANSION
    params = (
        _norm_params(c)  # group norm
        + _conv_params(c, c, 1)  # proj_in
        + 3 * _norm_params(c)  # layer norms
        + 3 * _linear_params(c, c, bias=False)  # self q,k,v
        + _linear_params(c, c)  # self out
        + _linear_params(c, c, bias=False)  # cross q
        + 2 * _linear_params(ctx, c, bias=False)  # cross k,v
        + _linear_params(c, c)  # cross out
        + _linear_params(c, mult * c)  # ff in
        + _linear_params(mult * c, c)  # ff out
        + _conv_params(c, c, 1)  # proj_out
    )
    macs = 0
    attn_macs = 0
    if hw is not None:
        h, w = hw
        seq = h * w
        lin_tokens = seq * (
            c * c  # proj_in
            + 4 * c * c  # self q,k,v,out
            + 2 * c * c  # cross q,out
            + 2 * mult * c * c  # ff
            + c * c  # proj_out
        )
        macs = lin_tokens + 2 * cfg.context_len * ctx * c  # cross k,v over context tokens
        attn_macs = 2 * seq * seq * c + 2 * seq * cfg.context_len * c
    return params, macs, attn_macs


def _resample_counts(b: BlockSpec, hw, kind: str) -> tuple[int, int]:
    c = b.in_channels
    params = _conv_params(c, c, 3)
    macs = 0
    if hw is not None:
        h, w = hw
        if kind == DOWNSAMPLE:
            h, w = h // 2, w // 2
        else:
            h, w = h * 2, w * 2
        macs = 9 * c * c * h * w
    return params, macs


def _block_row(bt: BlockTrace, cfg: UNetConfig) -> ComputeRow:
    b = bt.spec
    hw = bt.in_hw
    if b.kind == RESIDUAL:
        params, macs = _residual_counts(b, cfg, hw)
        return ComputeRow(str(bt.path), b.kind, params, macs)
    if b.kind == ATTENTION:
        params, macs, attn = _attention_counts(b, cfg, bt.heads, hw)
        return ComputeRow(str(bt.path), b.kind, params, macs, attn)
    if b.kind in (DOWNSAMPLE, UPSAMPLE):
        params, macs = _resample_counts(b, hw, b.kind)
        return ComputeRow(str(bt.path), b.kind, params, macs)
    if b.kind == CHANNEL_INTERP:
        return ComputeRow(str(bt.path), b.kind, 0, 0)
    raise AssertionError(b.kind)


def profile_config(
    cfg: UNetConfig,
    latent_hw: tuple[int, int] | None = None,
    steps: int = 1,
    include_attention_matmuls: bool = False,
) -> ComputeReport:
    """Closed-form parameter (and, with ``latent_hw``, MAC) accounting."""
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    if latent_hw is not None:
        div = 2 ** (cfg.num_stages - 1)
        if latent_hw[0] % div or latent_hw[1] % div:
            raise DomainError(
                f"latent {latent_hw} must be divisible by 2^(stages-1) = {div}"
            )
    tr = trace_config(cfg, latent_hw)
    c0 = cfg.stage_channels[0]
    te = cfg.time_embed_dim
    rows: list[ComputeRow] = []

    hw = latent_hw
    conv_in_macs = 9 * cfg.in_channels * c0 * hw[0] * hw[1] if hw else 0
    rows.append(ComputeRow("conv_in", "conv", _conv_params(cfg.in_channels, c0, 3), conv_in_macs))
    t_params = _linear_params(te // 4, te) + _linear_params(te, te)
    t_macs = ((te // 4) * te + te * te) if hw else 0
    rows.append(ComputeRow("time_embed", "mlp", t_params, t_macs))

    rows.extend(_block_row(bt, cfg) for bt in tr.blocks)

    out_params = _norm_params(c0) + _conv_params(c0, cfg.out_channels, 3)
    out_macs = 9 * c0 * cfg.out_channels * hw[0] * hw[1] if hw else 0
    rows.append(ComputeRow("out_head", "norm+conv", out_params, out_macs))

    return ComputeReport(
        tuple(rows),
        latent_hw=tuple(latent_hw) if latent_hw else None,
        steps=steps,
        include_attention_matmuls=include_attention_matmuls,
    )


def count_params(cfg: UNetConfig) -> ComputeReport:
    """Parameter accounting only; no resolution needed."""
    return profile_config(cfg)


def count_macs(
    cfg: UNetConfig,
    latent_hw: tuple[int, int],
    steps: int = 1,
    include_attention_matmuls: bool = False,
) -> ComputeReport:
    """Parameter plus per-step MAC accounting at the given latent size."""
    return profile_config(
        cfg, latent_hw=latent_hw, steps=steps, include_attention_matmuls=include_attention_matmuls
    )
