"""Temporally-adaptive feature learning: branch swapping and the change-rate hinge.

For an anchor frame ``x_t`` and a partner ``x_{t+d}``, swapping branch ``i``
measures how much the prediction moves when only that branch sees the
partner frame::

    dy(x_t, i, d) = mean | softmax(agg(..., phi_i(x_{t+d}), ...)) - softmax(agg(phi(x_t))) |

and the hinge ``max(0, dy - |d| * c_i)`` penalises movement beyond the
branch's allowance ``c_i`` (per frame). ``c_i = inf`` exempts a branch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import BranchSet, FactorizedModel
from .tensor import (
    ShapeError,
    Tensor,
    add,
    cross_entropy_masked,
    l1_mean,
    relu,
    scale,
    select_batch,
    softmax_channel,
    tmean,
)

__all__ = [
    "ChangeRateSchedule",
    "TAFConfig",
    "TAFDisabledError",
    "swap_branch",
    "swap_branch_batch",
    "delta_y",
    "hinge_reg",
    "sample_offset",
    "sample_branch",
    "sample_indices",
    "taf_objective",
    "raw_objective_reference",
]


class TAFDisabledError(ValueError):
    """Every change rate is infinite, so there is no branch to regularise."""


@dataclass(frozen=True)
class ChangeRateSchedule:
    rates: tuple[float, ...]

    def __post_init__(self):
        rates = tuple(float(r) for r in self.rates)
        object.__setattr__(self, "rates", rates)
        if not rates:
            raise ValueError("schedule needs at least one rate")
        for r in rates:
            if math.isnan(r) or r < 0:
                raise ValueError(f"change rates must be >= 0 (got {r})")
        for a, b in zip(rates, rates[1:]):
            if b < a:
                raise ValueError(f"change rates must be nondecreasing: {rates}")

    @classmethod
    def parse(cls, text: str) -> ChangeRateSchedule:
        """Parse ``"0.0001, inf, inf"``."""
        return cls(tuple(float(tok.strip()) for tok in text.split(",") if tok.strip()))

    def format(self) -> str:
        return ", ".join("inf" if math.isinf(r) else repr(r) for r in self.rates)

    @property
    def m(self) -> int:
        return len(self.rates)

    @property
    def finite_branches(self) -> tuple[int, ...]:
        return tuple(i for i, r in enumerate(self.rates, start=1) if math.isfinite(r))

    @property
    def disabled(self) -> bool:
        return not self.finite_branches

    def rate(self, i: int) -> float:
        return self.rates[i - 1]


@dataclass(frozen=True)
class TAFConfig:
    lam: float = 1.0
    n_h: int = 15
    delta0: float = 1.0
    schedule: ChangeRateSchedule = field(default_factory=lambda: ChangeRateSchedule((1e-4, math.inf, math.inf)))
    exclude_zero_offset: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.n_h < 1:
            raise ValueError("n_h must be >= 1")
        if self.delta0 <= 0:
            raise ValueError("delta0 must be > 0")


# -- swapping ------------------------------------------------------------------


def _check_pair(a: BranchSet, b: BranchSet) -> None:
    if a.m != b.m:
        raise ShapeError("swap_branch", "branch count", a.m, b.m)
    for j, (fa, fb) in enumerate(zip(a.features, b.features), start=1):
        if fa.shape != fb.shape:
            raise ShapeError("swap_branch", f"branch {j} feature shape", fa.shape, fb.shape)


def swap_branch(a: BranchSet, b: BranchSet, i: int) -> BranchSet:
    """Copy of ``a`` with branch ``i`` (1-based) taken from ``b``."""
    if not 1 <= i <= a.m:
        raise IndexError(f"branch index {i} outside 1..{a.m}")
    _check_pair(a, b)
    return a.replace_feature(i, b.features[i - 1])


def swap_branch_batch(a: BranchSet, b: BranchSet, idx) -> BranchSet:
    """Per-sample swap: sample ``n`` takes branch ``idx[n]`` from ``b``."""
    _check_pair(a, b)
    idx = np.asarray(idx)
    if idx.shape != (a.features[0].shape[0],):
        raise ShapeError("swap_branch_batch", "N (index length)", a.features[0].shape[0], idx.shape)
    if ((idx < 1) | (idx > a.m)).any():
        raise IndexError(f"branch index outside 1..{a.m}")
    feats = []
    for j, (fa, fb) in enumerate(zip(a.features, b.features), start=1):
        mask = idx == j
        if mask.all():
            feats.append(fb)
        elif not mask.any():
            feats.append(fa)
        else:
            feats.append(select_batch(mask, fa, fb))
    return BranchSet(tuple(feats), a.strides, a.input_hw, a.skip)


def delta_y(model: FactorizedModel, bs_t: BranchSet, bs_d: BranchSet, i, base_probs: Tensor | None = None,
            per_sample: bool = False) -> Tensor:
    """Mean L1 change of the softmax prediction when branch ``i`` comes from ``bs_d``.

    ``i`` is an int or one index per sample. ``base_probs`` lets callers reuse
    ``softmax(agg(bs_t))``.
    """
    if np.ndim(i) == 0:
        swapped = swap_branch(bs_t, bs_d, int(i))
    else:
        swapped = swap_branch_batch(bs_t, bs_d, i)
    if base_probs is None:
        base_probs = softmax_channel(model.aggregate(bs_t))
    return l1_mean(softmax_channel(model.aggregate(swapped)), base_probs, per_sample=per_sample)


def hinge_reg(delta_y_val: float, delta: float, c_i: float) -> float:
    if math.isinf(c_i):
        return 0.0
    return max(0.0, float(delta_y_val) - abs(delta) * c_i)


def _hinge(dy: Tensor, slack: np.ndarray) -> Tensor:
    return relu(add(dy, Tensor(-np.asarray(slack, dtype=dy.dtype))))


# -- sampling ------------------------------------------------------------------


def sample_offset(n_h: int, rng: np.random.Generator, exclude_zero: bool = True) -> int:
    while True:
        n = int(rng.integers(-n_h, n_h + 1))
        if n != 0 or not exclude_zero:
            return n


def sample_branch(schedule: ChangeRateSchedule, rng: np.random.Generator) -> int:
    finite = schedule.finite_branches
    if not finite:
        raise TAFDisabledError("TAF disabled: every change rate is infinite")
    return finite[int(rng.integers(len(finite)))]


def sample_indices(cfg: TAFConfig, m: int, rng: np.random.Generator) -> tuple[int, int, int]:
    """Draw ``(n, i1, i2)``: a frame offset and two branch indices.

    Branch indices are uniform over the finite-rate branches only.
    """
    if cfg.schedule.m != m:
        raise ValueError(f"schedule has {cfg.schedule.m} rates but the model has {m} branches")
    if cfg.schedule.disabled:
        raise TAFDisabledError("TAF disabled: every change rate is infinite")
    n = sample_offset(cfg.n_h, rng, cfg.exclude_zero_offset)
    return n, sample_branch(cfg.schedule, rng), sample_branch(cfg.schedule, rng)


# -- objectives ----------------------------------------------------------------


def _batchify(x) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    return x[None] if x.ndim == 3 else x


def taf_objective(model: FactorizedModel, pair, cfg: TAFConfig, rng: np.random.Generator,
                  branches: tuple[np.ndarray, np.ndarray] | None = None):
    """Supervised cross-entropy plus the symmetric swap regulariser.

    ``pair`` is a :class:`~tafseg.data.TrainingPair` or a batch of them
    (anything with ``x_t``, ``y_t``, ``x_pair`` and ``n``). Branch indices are
    drawn from ``rng`` unless ``branches=(i1, i2)`` fixes them. Returns
    ``(loss, parts)`` where ``parts`` has float ``ce``, ``reg_fwd``, ``reg_bwd``.
    """
    x_t = Tensor(_batchify(pair.x_t).astype(model.params_dtype(), copy=False))
    y_t = np.asarray(pair.y_t)
    if y_t.ndim == 2:
        y_t = y_t[None]
    bs_t = model.extract_branches(x_t)
    logits_t = model.aggregate(bs_t)
    ce = cross_entropy_masked(logits_t, y_t)
    parts = {"ce": float(ce.data), "reg_fwd": 0.0, "reg_bwd": 0.0}
    if cfg.lam == 0:
        return ce, parts
    if cfg.schedule.m != model.m:
        raise ValueError(f"schedule has {cfg.schedule.m} rates but the model has {model.m} branches")

    x_p = Tensor(_batchify(pair.x_pair).astype(model.params_dtype(), copy=False))
    n = np.atleast_1d(np.asarray(pair.n, dtype=np.float64))
    batch = x_t.shape[0]
    if branches is None:
        i1 = np.array([sample_branch(cfg.schedule, rng) for _ in range(batch)])
        i2 = np.array([sample_branch(cfg.schedule, rng) for _ in range(batch)])
    else:
        i1, i2 = (np.broadcast_to(np.asarray(b), (batch,)) for b in branches)
    rates = np.array(cfg.schedule.rates)
    if not np.isfinite(rates[i1 - 1]).all() or not np.isfinite(rates[i2 - 1]).all():
        raise ValueError("sampled branch has an infinite change rate")
    dist = np.abs(n * cfg.delta0)

    bs_p = model.extract_branches(x_p)
    probs_t = softmax_channel(logits_t)
    probs_p = softmax_channel(model.aggregate(bs_p))
    dy_f = delta_y(model, bs_t, bs_p, i1, base_probs=probs_t, per_sample=True)
    dy_b = delta_y(model, bs_p, bs_t, i2, base_probs=probs_p, per_sample=True)
    reg_f = tmean(_hinge(dy_f, dist * rates[i1 - 1]))
    reg_b = tmean(_hinge(dy_b, dist * rates[i2 - 1]))
    loss = add(ce, scale(add(reg_f, reg_b), cfg.lam))
    parts["reg_fwd"] = float(reg_f.data)
    parts["reg_bwd"] = float(reg_b.data)
    return loss, parts


def raw_objective_reference(model: FactorizedModel, clip, cfg: TAFConfig) -> float:
    """Exhaustive evaluation of the unsampled regularised objective on one clip.

    The regulariser averages the hinge over every frame ``t``, every in-clip
    offset ``n`` with ``|n| <= n_h`` and every finite-rate branch. The
    supervised term is the key-frame cross-entropy. No gradients.
    """
    frames = np.stack([clip.image(t) for t in range(len(clip.frames))]).astype(model.params_dtype())
    bss = [model.extract_branches(Tensor(f[None])) for f in frames]
    ce = float(cross_entropy_masked(model.aggregate(bss[clip.key_index]), np.asarray(clip.key_label)[None]).data)
    if cfg.lam == 0:
        return ce
    finite = cfg.schedule.finite_branches
    if not finite:
        return ce
    probs = [softmax_channel(model.aggregate(bs)).data for bs in bss]
    total, count = 0.0, 0
    for t in range(len(frames)):
        for n in range(-cfg.n_h, cfg.n_h + 1):
            if not 0 <= t + n < len(frames) or (n == 0 and cfg.exclude_zero_offset):
                continue
            for i in finite:
                swapped = swap_branch(bss[t], bss[t + n], i)
                dy = float(np.abs(softmax_channel(model.aggregate(swapped)).data - probs[t]).mean())
                total += hinge_reg(dy, n * cfg.delta0, cfg.schedule.rate(i))
                count += 1
    reg = total / count if count else 0.0
    return ce + cfg.lam * reg
