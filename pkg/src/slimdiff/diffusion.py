"""Noise schedules, forward diffusion, training losses, and samplers.

The trainer optimizes a three-part objective: the denoising task loss
(MSE between sampled and predicted noise), an output-matching term against
the teacher's prediction, and a feature-matching term summed over shared
stage-boundary taps.  All three are plain MSEs; the total is their
weighted sum.  Samplers implement ancestral (ddpm) and deterministic
(ddim) stepping over an evenly spaced timestep subsequence, with
classifier-free guidance ``eps_u + s * (eps_c - eps_u)``; the s=0 and s=1
endpoints short-circuit to the plain unconditional/conditional paths so
those identities hold bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import DimensionError, DomainError
from .unet import Condition

SCHEDULE_KINDS = ("linear", "scaled_linear")


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha-bar tables for T steps; alpha_bar(0) is defined as 1."""

    kind: str
    T: int
    beta_start: float
    beta_end: float
    beta: Tensor  # [T] float64
    alpha_bar: Tensor  # [T] float64, strictly decreasing

    def alpha_bar_at(self, t) -> Tensor:
        """alpha_bar for integer timesteps in [0, T]; t may be a tensor."""
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < 0).any() or (t > self.T).any():
            raise DomainError(f"timestep out of range [0, {self.T}]")
        full = torch.cat([torch.ones(1, dtype=self.alpha_bar.dtype), self.alpha_bar])
        return full[t]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_schedule(
            d.get("kind", "linear"),
            int(d["T"]),
            float(d.get("beta_start", 1e-4)),
            float(d.get("beta_end", 0.02)),
        )


def make_schedule(
    kind: str = "linear", T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Build a beta schedule and its cumulative alpha products."""
    if kind not in SCHEDULE_KINDS:
        raise DomainError(f"unknown schedule kind {kind!r}, expected one of {SCHEDULE_KINDS}")
    if T < 1:
        raise DomainError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise DomainError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    if T == 1:
        beta = torch.tensor([beta_start], dtype=torch.float64)
    elif kind == "linear":
        beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    else:  # scaled_linear
        beta = torch.linspace(beta_start**0.5, beta_end**0.5, T, dtype=torch.float64) ** 2
    alpha_bar = torch.cumprod(1.0 - beta, dim=0)
    return NoiseSchedule(kind, T, beta_start, beta_end, beta, alpha_bar)


def default_schedule(T: int = 1000) -> NoiseSchedule:
    return make_schedule("linear", T, 1e-4, 0.02)


def forward_diffuse(z: Tensor, eps: Tensor, t, schedule: NoiseSchedule) -> Tensor:
    """z_t = sqrt(alpha_bar_t) * z + sqrt(1 - alpha_bar_t) * eps."""
    if z.shape != eps.shape:
        raise DimensionError(f"z {tuple(z.shape)} and eps {tuple(eps.shape)} must match")
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(z.shape[0])
    if t.shape[0] != z.shape[0]:
        raise DimensionError(f"timestep batch {t.shape[0]} != latent batch {z.shape[0]}")
    if (t < 1).any() or (t > schedule.T).any():
        raise DomainError(f"timesteps must lie in [1, {schedule.T}]")
    ab = schedule.alpha_bar_at(t).to(z.dtype)
    shape = (z.shape[0],) + (1,) * (z.dim() - 1)
    return ab.sqrt().view(shape) * z + (1.0 - ab).sqrt().view(shape) * eps


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    """Weights for the output- and feature-matching terms (both default 1)."""

    lambda_out: float = 1.0
    lambda_feat: float = 1.0

    def __post_init__(self) -> None:
        if self.lambda_out < 0 or self.lambda_feat < 0:
            raise DomainError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    task: Tensor | float
    out_kd: Tensor | float
    feat_kd: Tensor | float
    total: Tensor | float

    def detach(self) -> "LossBreakdown":
        def val(x):
            return float(x.detach()) if torch.is_tensor(x) else float(x)

        return LossBreakdown(val(self.task), val(self.out_kd), val(self.feat_kd), val(self.total))


def task_loss(eps_true: Tensor, eps_pred: Tensor) -> Tensor:
    """Mean squared error over all elements, batch-averaged."""
    if eps_true.shape != eps_pred.shape:
        raise DimensionError(
            f"prediction {tuple(eps_pred.shape)} does not match target {tuple(eps_true.shape)}"
        )
    return F.mse_loss(eps_pred, eps_true)


def output_kd_loss(eps_teacher: Tensor, eps_student: Tensor) -> Tensor:
    """MSE between teacher and student noise predictions."""
    return task_loss(eps_teacher, eps_student)


def feature_kd_loss(taps_teacher: dict[str, Tensor], taps_student: dict[str, Tensor]) -> Tensor:
    """Sum over shared taps of the per-tap MSE.

    The student's tap ids must be a subset of the teacher's (taps absent
    from the student, e.g. a removed mid stage, are simply skipped).
    """
    extra = set(taps_student) - set(taps_teacher)
    if extra:
        raise DimensionError(f"student taps not present in teacher: {sorted(extra)}")
    total: Tensor | float = 0.0
    for tap_id, f_s in taps_student.items():
        f_t = taps_teacher[tap_id]
        if f_t.shape != f_s.shape:
            raise DimensionError(
                f"tap {tap_id!r}: teacher {tuple(f_t.shape)} vs student {tuple(f_s.shape)}"
            )
        total = total + F.mse_loss(f_s, f_t)
    if not torch.is_tensor(total):
        total = torch.tensor(0.0)
    return total


def total_loss(task, out_kd, feat_kd, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """total = task + lambda_out * out_kd + lambda_feat * feat_kd."""
    total = task + weights.lambda_out * out_kd + weights.lambda_feat * feat_kd
    return LossBreakdown(task=task, out_kd=out_kd, feat_kd=feat_kd, total=total)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 25
    guidance_scale: float = 7.5
    sampler: str = "ddim"
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise DomainError(f"steps must be >= 1, got {self.steps}")
        if self.guidance_scale < 0:
            raise DomainError(f"guidance scale must be nonnegative, got {self.guidance_scale}")
        if self.sampler not in ("ddpm", "ddim"):
            raise DomainError(f"unknown sampler {self.sampler!r}")
        if self.eta < 0:
            raise DomainError(f"eta must be nonnegative, got {self.eta}")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "guidance_scale": self.guidance_scale,
            "sampler": self.sampler,
            "eta": self.eta,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(
            steps=int(d.get("steps", 25)),
            guidance_scale=float(d.get("guidance_scale", 7.5)),
            sampler=d.get("sampler", "ddim"),
            eta=float(d.get("eta", 0.0)),
            seed=int(d.get("seed", 0)),
        )


def timestep_sequence(T: int, steps: int, t_start: int | None = None) -> list[int]:
    """Evenly spaced descending timesteps from t_start (default T) to 1."""
    hi = T if t_start is None else t_start
    if steps > hi:
        raise DomainError(f"steps ({steps}) must not exceed the highest timestep ({hi})")
    if steps == 1:
        return [hi]
    ts = torch.linspace(hi, 1, steps).round().long().tolist()
    return [int(t) for t in ts]


def guided_prediction(
    model, z_t: Tensor, t: Tensor, cond: Condition, null_cond: Condition, scale: float
) -> Tensor:
    """Classifier-free guidance; the s=0 and s=1 endpoints are exact."""
    if scale == 0.0:
        eps, _ = model(z_t, t, null_cond)
        return eps
    if scale == 1.0:
        eps, _ = model(z_t, t, cond)
        return eps
    eps_u, _ = model(z_t, t, null_cond)
    eps_c, _ = model(z_t, t, cond)
    return eps_u + scale * (eps_c - eps_u)


def _denoise(
    model,
    x: Tensor,
    ts: list[int],
    cond: Condition,
    null_cond: Condition,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
    gen: torch.Generator,
) -> Tensor:
    batch = x.shape[0]
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        t_batch = torch.full((batch,), t, dtype=torch.long)
        eps = guided_prediction(model, x, t_batch, cond, null_cond, cfg.guidance_scale)
        ab_t = float(schedule.alpha_bar_at(t))
        ab_prev = float(schedule.alpha_bar_at(t_prev))
        if cfg.sampler == "ddim":
            x0 = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
            sigma = cfg.eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(
                max(1.0 - ab_t / ab_prev, 0.0)
            )
            dir_coeff = math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0))
            x = math.sqrt(ab_prev) * x0 + dir_coeff * eps
            if sigma > 0 and t_prev > 0:
                x = x + sigma * torch.randn(x.shape, generator=gen, dtype=x.dtype)
        else:  # ddpm ancestral
            alpha_step = ab_t / ab_prev
            x = (x - (1.0 - alpha_step) / math.sqrt(1.0 - ab_t) * eps) / math.sqrt(alpha_step)
            if t_prev > 0:
                var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - alpha_step)
                x = x + math.sqrt(max(var, 0.0)) * torch.randn(
                    x.shape, generator=gen, dtype=x.dtype
                )
    return x


def sample(
    model,
    cond: Condition,
    null_cond: Condition,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
    latent_hw: tuple[int, int],
) -> Tensor:
    """Iterative denoising from a seeded Gaussian latent."""
    if cfg.steps > schedule.T:
        raise DomainError(f"steps ({cfg.steps}) must not exceed T ({schedule.T})")
    batch = cond.batch_size
    gen = torch.Generator().manual_seed(cfg.seed)
    x = torch.randn(
        (batch, model.config.in_channels, latent_hw[0], latent_hw[1]), generator=gen
    )
    ts = timestep_sequence(schedule.T, cfg.steps)
    return _denoise(model, x, ts, cond, null_cond, cfg, schedule, gen)


def sdedit(
    model,
    input_latent: Tensor,
    strength: float,
    cond: Condition,
    null_cond: Condition,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
) -> Tensor:
    """Image-to-image: noise the input to floor(strength * T), then denoise.

    strength 0 returns the input unchanged; strength 1 starts from a fresh
    Gaussian latent and is identical to text-to-image sampling.
    """
    if not 0.0 <= strength <= 1.0:
        raise DomainError(f"strength must lie in [0, 1], got {strength}")
    if input_latent.dim() != 4:
        raise DimensionError(f"input must be [B, C, H, W], got {tuple(input_latent.shape)}")
    if strength == 0.0:
        return input_latent.clone()
    if strength == 1.0:
        return sample(model, cond, null_cond, cfg, schedule, input_latent.shape[2:])
    t0 = int(math.floor(strength * schedule.T))
    if t0 < 1:
        return input_latent.clone()
    gen = torch.Generator().manual_seed(cfg.seed)
    eps = torch.randn(input_latent.shape, generator=gen, dtype=input_latent.dtype)
    x = forward_diffuse(input_latent, eps, t0, schedule)
    steps = min(max(1, round(cfg.steps * strength)), t0)
    ts = timestep_sequence(schedule.T, steps, t_start=t0)
    return _denoise(model, x, ts, cond, null_cond, cfg, schedule, gen)
