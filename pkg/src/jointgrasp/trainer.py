"""Alternating two-phase training under the joint loss with adaptive penalty.

Each outer iteration runs one epoch updating the category groups
(theta1, theta2), refreshes sigma from that epoch's residuals, then runs one
epoch updating the grasp groups (theta3, theta4). The ablation variants
reuse the same loop with different phase schedules:

* ``v1`` grasp cross-entropy only; only theta3/theta4 are trained.
* ``v2`` joint cross-entropy on all four groups at once, no penalty.
* ``v3`` the alternating schedule with the adaptive penalty.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .data import DatasetSplit, DualLabelSample, labels, prepare_inputs, stack_images
from .dualnet import GROUPS, ModelParams, argmax_lowest, category_scores, forward, grasp_scores
from .errors import ConfigError, DimensionError, TrainingAborted
from .loss import (
    LAMBDA_MAX,
    MISSING,
    SIGMA_FLOOR,
    CondProbMatrix,
    SigmaState,
    estimate_cond_matrix,
    gamma,
    jcear_objective,
    one_hot,
    regularizer_weight,
    sigma_batch_stat,
    sigma_epoch_update,
)
from .metrics import MetricsReport, evaluate

logger = logging.getLogger(__name__)

CATEGORY_GROUPS = ("theta1", "theta2")
GRASP_GROUPS = ("theta3", "theta4")
VARIANTS = ("v1", "v2", "v3")
PHASE_ORDERS = ("category-first", "grasp-first")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_outer: int = 10
    tol: float = 1e-4
    phase_order: str = "category-first"
    sigma_floor: float = SIGMA_FLOOR
    lambda_max: float = LAMBDA_MAX
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError(f"beta1 and beta2 must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if not self.tol > 0:
            raise ConfigError(f"convergence tolerance must be positive, got {self.tol}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_outer < 1:
            raise ConfigError(f"max_outer must be >= 1, got {self.max_outer}")
        if self.lr <= 0 or self.adam_eps <= 0:
            raise ConfigError("lr and adam_eps must be positive")
        if self.phase_order not in PHASE_ORDERS:
            raise ConfigError(f"phase_order must be one of {PHASE_ORDERS}, got {self.phase_order!r}")
        if self.sigma_floor <= 0 or self.lambda_max <= 0:
            raise ConfigError("sigma_floor and lambda_max must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"unknown training key {k!r}")
        return cls(**d)


# ---------------------------------------------------------------- Adam


@dataclass
class GroupMoments:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0


@dataclass
class AdamState:
    groups: dict[str, GroupMoments] = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: ModelParams) -> "AdamState":
        return cls(
            {
                g: GroupMoments([np.zeros_like(a) for a in model.group(g)], [np.zeros_like(a) for a in model.group(g)])
                for g in GROUPS
            }
        )


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: GroupMoments,
    cfg: TrainConfig,
) -> tuple[list[np.ndarray], GroupMoments]:
    """One bias-corrected Adam update; entries whose gradient is None are left alone."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError(f"{len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    step = state.step + 1
    c1 = 1.0 - cfg.beta1**step
    c2 = 1.0 - cfg.beta2**step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            new_p.append(p)
            new_m.append(m)
            new_v.append(v)
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        new_p.append(p - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, GroupMoments(new_m, new_v, step)


# ---------------------------------------------------------------- data plumbing


@dataclass
class Arrays:
    """Pre-normalized inputs and encoded labels for one partition."""

    x_category: np.ndarray
    x_grasp: np.ndarray
    categories: np.ndarray
    grasps: np.ndarray
    c_o: np.ndarray
    c_g: np.ndarray

    def __len__(self) -> int:
        return self.categories.shape[0]

    @classmethod
    def from_samples(cls, samples: Sequence[DualLabelSample], l_o: int, l_g: int) -> "Arrays":
        if not samples:
            raise ConfigError("cannot build arrays from an empty sample list")
        x_cat, x_grasp = prepare_inputs(stack_images(samples))
        cats, grasps = labels(samples)
        return cls(x_cat, x_grasp, cats, grasps, one_hot(cats, l_o), one_hot(grasps, l_g))


def batch_objective(
    model: ModelParams,
    data: Arrays,
    idx: np.ndarray,
    trainable: Sequence[str],
    what: CondProbMatrix | np.ndarray,
    lam: float,
    use_category_labels: bool = True,
):
    """Build the batch loss graph; returns (objective parts, leaf tensors by group)."""
    cfg = model.arch
    leaves = model.tensors(trainable)
    I_c, logits_o = category_scores(data.x_category[idx], leaves["theta1"], leaves["theta2"], cfg)
    if not set(trainable) & set(CATEGORY_GROUPS):
        I_c = I_c.detach()
    _, _, logits_g = grasp_scores(data.x_grasp[idx], I_c, leaves["theta3"], leaves["theta4"], cfg)
    c_o = data.c_o[idx] if use_category_labels else np.zeros_like(data.c_o[idx])
    parts = jcear_objective(logits_o, logits_g, c_o, data.c_g[idx], what, lam)
    return parts, leaves


def batch_gradients(model, data, idx, trainable, what, lam, use_category_labels=True):
    """Loss parts and per-group gradient lists (None where a tensor got no gradient)."""
    parts, leaves = batch_objective(model, data, idx, trainable, what, lam, use_category_labels)
    gmap = ag.backward(parts.total)
    grads = {g: [gmap.get(t) for t in leaves[g]] for g in trainable}
    return parts, grads


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + size] for i in range(0, n, size)]


# ---------------------------------------------------------------- phases


@dataclass
class PhaseResult:
    model: ModelParams
    mean_loss: float
    gammas: list[np.ndarray]


def train_phase(
    which: Sequence[str],
    model: ModelParams,
    data: Arrays,
    batches: Sequence[np.ndarray],
    what: CondProbMatrix | np.ndarray,
    sigma: SigmaState | float,
    cfg: TrainConfig,
    adam: AdamState,
    use_category_labels: bool = True,
) -> PhaseResult:
    """One epoch of Adam updates on the groups in ``which``; the others stay fixed.

    ``sigma`` may also be a plain penalty weight. The returned loss is the
    sample-weighted mean of the per-batch objectives evaluated before each
    update, and ``gammas`` holds the per-batch residual matrices.
    """
    which = tuple(which)
    if not which or any(g not in GROUPS for g in which):
        raise ConfigError(f"unknown parameter groups {which}")
    lam = sigma if isinstance(sigma, (int, float)) else regularizer_weight(sigma, cfg.lambda_max)
    model = model.copy()
    total, count, gammas = 0.0, 0, []
    for idx in batches:
        parts, grads = batch_gradients(model, data, idx, which, what, lam, use_category_labels)
        loss = parts.total.item()
        if not math.isfinite(loss):
            raise TrainingAborted(f"non-finite loss {loss} in phase {which}")
        total += loss * len(idx)
        count += len(idx)
        gammas.append(parts.gammas)
        for g in which:
            new, adam.groups[g] = adam_step(model.group(g), grads[g], adam.groups[g], cfg)
            setattr(model, g, new)
    return PhaseResult(model, total / max(count, 1), gammas)


def check_convergence(prev: float, curr: float, eps: float) -> bool:
    if not (math.isfinite(prev) and math.isfinite(curr)):
        raise TrainingAborted(f"non-finite loss in convergence check: {prev} -> {curr}")
    return abs(curr - prev) <= eps


# ---------------------------------------------------------------- full training


@dataclass
class TrainRecord:
    t: int
    phase_a_loss: float
    phase_b_loss: float
    sigma: list[float]
    lam: float
    val_ga: float | None
    val_category_ga: float | None


@dataclass
class TrainHistory:
    records: list[TrainRecord] = field(default_factory=list)
    initial_loss: float | None = None
    converged: bool = False
    what: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.records)

    def to_jsonl(self) -> str:
        lines = []
        for r in self.records:
            d = asdict(r)
            d["sigma"] = [s if math.isfinite(s) else "inf" for s in r.sigma]
            lines.append(json.dumps(d, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


def _schedule(variant: str, order: str) -> list[tuple[str, ...]]:
    if variant == "v1":
        return [GRASP_GROUPS, GRASP_GROUPS]
    if variant == "v2":
        return [GROUPS, GROUPS]
    if variant == "v3":
        return [CATEGORY_GROUPS, GRASP_GROUPS] if order == "category-first" else [GRASP_GROUPS, CATEGORY_GROUPS]
    raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def dataset_objective(model, data: Arrays, what, lam: float, batch_size: int, use_category_labels=True) -> float:
    """Sample-mean objective over ``data`` without updating anything."""
    total = 0.0
    for i in range(0, len(data), batch_size):
        idx = np.arange(i, min(i + batch_size, len(data)))
        parts, _ = batch_objective(model, data, idx, (), what, lam, use_category_labels)
        total += parts.total.item() * len(idx)
    return total / len(data)


def evaluate_model(model: ModelParams, samples: Sequence[DualLabelSample]) -> dict[str, MetricsReport | None]:
    """Grasp metrics over grasp-labelled samples and category metrics over all samples."""
    if not samples:
        return {"grasp": None, "category": None}
    cfg = model.arch
    x_cat, x_grasp = prepare_inputs(stack_images(samples))
    trace = forward(x_cat, x_grasp, model)
    cats, grasps = labels(samples)
    keep = grasps != MISSING
    out: dict[str, MetricsReport | None] = {
        "category": evaluate(argmax_lowest(trace.f_o), cats, cfg.l_o, task="category"),
        "grasp": None,
    }
    if keep.any():
        out["grasp"] = evaluate(argmax_lowest(trace.f_g)[keep], grasps[keep], cfg.l_g, task="grasp")
    return out


def consistency_residual(model: ModelParams, samples: Sequence[DualLabelSample], what) -> float:
    """Mean L1 norm of the category/grasp residual over ``samples``."""
    x_cat, x_grasp = prepare_inputs(stack_images(samples))
    trace = forward(x_cat, x_grasp, model)
    return float(np.abs(gamma(trace.f_o, trace.f_g, what)).sum(axis=1).mean())


def train(
    model: ModelParams,
    dataset: DatasetSplit | tuple[Sequence[DualLabelSample], Sequence[DualLabelSample]],
    cfg: TrainConfig,
    variant: str = "v3",
    callback: Callable[[int, ModelParams, TrainRecord], None] | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Run the outer loop until the grasp-side loss changes by at most ``cfg.tol``."""
    train_s, val_s = (dataset.train, dataset.validation) if isinstance(dataset, DatasetSplit) else dataset
    if not train_s:
        raise ConfigError("training partition is empty")
    arch = model.arch
    schedule = _schedule(variant, cfg.phase_order)
    use_cat = variant != "v1"
    data = Arrays.from_samples(train_s, arch.l_o, arch.l_g)
    what = estimate_cond_matrix(data.categories, data.grasps, arch.l_o, arch.l_g)
    sigma = SigmaState.initial(arch.l_o, cfg.sigma_floor)
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState.for_model(model)
    history = TrainHistory(what=what.what.copy())
    prev = dataset_objective(model, data, what, 0.0, cfg.batch_size, use_cat)
    history.initial_loss = prev
    grasp_phase = 1 if variant != "v3" else schedule.index(GRASP_GROUPS)

    for t in range(1, cfg.max_outer + 1):
        losses = []
        lam = 0.0
        for k, which in enumerate(schedule):
            lam = regularizer_weight(sigma, cfg.lambda_max) if variant == "v3" else 0.0
            res = train_phase(
                which, model, data, _batches(len(data), cfg.batch_size, rng), what, lam, cfg, adam, use_cat
            )
            model = res.model
            losses.append(res.mean_loss)
            if variant == "v3" and k == 0:
                sigma = sigma_epoch_update([sigma_batch_stat(g) for g in res.gammas], sigma)
        metrics = evaluate_model(model, val_s) if val_s else {"grasp": None, "category": None}
        rec = TrainRecord(
            t=t,
            phase_a_loss=losses[0],
            phase_b_loss=losses[1],
            sigma=[float(s) for s in sigma.sigma],
            lam=lam,
            val_ga=metrics["grasp"].GA if metrics["grasp"] else None,
            val_category_ga=metrics["category"].GA if metrics["category"] else None,
        )
        history.records.append(rec)
        logger.info(
            "t=%d %s loss A=%.5f B=%.5f lam=%.4g val GA=%s", t, variant, losses[0], losses[1], lam, rec.val_ga
        )
        if callback is not None:
            callback(t, model, rec)
        curr = losses[grasp_phase]
        if check_convergence(prev, curr, cfg.tol):
            history.converged = True
            break
        prev = curr
    return model, history
