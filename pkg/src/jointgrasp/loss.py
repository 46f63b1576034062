"""Joint cross-entropy, the category/grasp consistency residual, and the
adaptive penalty weight.

Plain-array functions accept either single probability vectors or a batch
with one row per sample. ``jcear_objective`` builds the same quantity on
the autograd graph for training.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .errors import ConfigError, ContractError, DimensionError

logger = logging.getLogger(__name__)

MISSING = -1
SIGMA_FLOOR = 1e-6
LAMBDA_MAX = 1e3


def one_hot(labels: Sequence[int], n: int) -> np.ndarray:
    """One row per label; ``MISSING`` rows are all zeros."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n))
    keep = labels != MISSING
    if np.any((labels[keep] < 0) | (labels[keep] >= n)):
        raise DimensionError(f"label out of range [0, {n})")
    out[np.nonzero(keep)[0], labels[keep]] = 1.0
    return out


# ---------------------------------------------------------------- conditional matrix


@dataclass(frozen=True)
class CondProbMatrix:
    counts: np.ndarray
    what: np.ndarray
    empty_rows: tuple[int, ...] = ()

    @property
    def shape(self) -> tuple[int, int]:
        return self.what.shape


def estimate_cond_matrix(
    categories: Sequence[int], grasps: Sequence[int], l_o: int, l_g: int
) -> CondProbMatrix:
    """Count category/grasp co-occurrences and normalize each category row.

    Samples whose grasp label is ``MISSING`` are ignored. A category with no
    grasp-labelled samples gets a uniform row and a logged warning.
    """
    if l_o <= 0 or l_g <= 0:
        raise ConfigError(f"need at least one category and grasp type, got l_o={l_o}, l_g={l_g}")
    cats = np.asarray(categories, dtype=np.int64)
    grs = np.asarray(grasps, dtype=np.int64)
    if cats.shape != grs.shape:
        raise DimensionError(f"{cats.size} category labels vs {grs.size} grasp labels")
    if cats.size == 0:
        raise ContractError("cannot estimate the conditional matrix from an empty dataset")
    keep = grs != MISSING
    cats, grs = cats[keep], grs[keep]
    if np.any((cats < 0) | (cats >= l_o)) or np.any((grs < 0) | (grs >= l_g)):
        raise DimensionError("label out of range while counting co-occurrences")
    counts = np.zeros((l_o, l_g), dtype=np.int64)
    np.add.at(counts, (cats, grs), 1)
    totals = counts.sum(axis=1)
    what = np.empty((l_o, l_g))
    empty = tuple(int(i) for i in np.nonzero(totals == 0)[0])
    nz = totals > 0
    what[nz] = counts[nz] / totals[nz, None]
    what[~nz] = 1.0 / l_g
    if empty:
        logger.warning("categories %s have no grasp-labelled samples; using uniform rows", list(empty))
    return CondProbMatrix(counts=counts, what=what, empty_rows=empty)


def write_cond_csv(matrix: CondProbMatrix, path, grasp_names: Sequence[str] | None = None) -> None:
    l_o, l_g = matrix.shape
    names = list(grasp_names) if grasp_names is not None else [f"grasp_{j}" for j in range(l_g)]
    if len(names) != l_g:
        raise DimensionError(f"{len(names)} grasp names for {l_g} columns")
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in matrix.what:
            w.writerow([repr(float(v)) for v in row])


def read_cond_csv(path) -> tuple[list[str], np.ndarray]:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


# ---------------------------------------------------------------- residual and losses


def gamma(f_o, f_g, what) -> np.ndarray:
    """Residual ``f_o - What @ f_g``, per sample when given batches."""
    W = what.what if isinstance(what, CondProbMatrix) else np.asarray(what, dtype=np.float64)
    f_o = np.asarray(f_o, dtype=np.float64)
    f_g = np.asarray(f_g, dtype=np.float64)
    if W.ndim != 2 or f_o.shape[-1] != W.shape[0] or f_g.shape[-1] != W.shape[1]:
        raise DimensionError(f"gamma: f_o {f_o.shape}, f_g {f_g.shape} vs matrix {W.shape}")
    if f_o.shape[:-1] != f_g.shape[:-1]:
        raise DimensionError(f"gamma: batch shapes {f_o.shape[:-1]} and {f_g.shape[:-1]} differ")
    return f_o - f_g @ W.T


def _check_labels(c: np.ndarray, name: str) -> None:
    if c.size and not np.all((c == 0) | (c == 1)):
        raise ContractError(f"{name} must be one-hot or all-zero")
    if c.size and np.any(c.sum(axis=-1) > 1):
        raise ContractError(f"{name} has more than one active class")


def _clamped_log(f: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(f)) or np.any(f < 0) or np.any(f > 1 + 1e-9):
        raise ContractError(f"{name} is not a probability vector")
    return np.log(np.clip(f, ag.PROB_FLOOR, 1.0))


def jce_loss(c_o, c_g, f_o, f_g) -> float | np.ndarray:
    """Sum of the category and grasp cross-entropies.

    An all-zero label row (missing annotation) contributes nothing. Batches
    return one value per sample.
    """
    c_o, c_g = np.asarray(c_o, dtype=np.float64), np.asarray(c_g, dtype=np.float64)
    f_o, f_g = np.asarray(f_o, dtype=np.float64), np.asarray(f_g, dtype=np.float64)
    if c_o.shape != f_o.shape or c_g.shape != f_g.shape:
        raise DimensionError("label and probability shapes differ")
    _check_labels(c_o, "c_o")
    _check_labels(c_g, "c_g")
    lo = -(c_o * _clamped_log(f_o, "f_o")).sum(axis=-1)
    lg = -(c_g * _clamped_log(f_g, "f_g")).sum(axis=-1)
    out = lo + lg
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SigmaState:
    sigma: np.ndarray
    floor: float = SIGMA_FLOOR
    t: int = 0

    @classmethod
    def initial(cls, l_o: int, floor: float = SIGMA_FLOOR) -> "SigmaState":
        if not floor > 0:
            raise ConfigError(f"sigma floor must be positive, got {floor}")
        return cls(sigma=np.full(l_o, np.inf), floor=floor, t=0)


def regularizer_weight(sigma, lambda_max: float = LAMBDA_MAX) -> float:
    """``1 / (2 * prod(sigma))`` evaluated in log space and clamped to ``[0, lambda_max]``."""
    s = np.asarray(sigma.sigma if isinstance(sigma, SigmaState) else sigma, dtype=np.float64)
    if np.any(np.isnan(s)) or np.any(s <= 0):
        raise ContractError(f"sigma must be positive, got {s}")
    if np.any(np.isinf(s)):
        return 0.0
    log_lam = -math.log(2.0) - float(np.log(s).sum())
    if log_lam >= math.log(lambda_max):
        return float(lambda_max)
    return math.exp(log_lam)


@dataclass(frozen=True)
class LossBreakdown:
    jce: float
    penalty: float
    lam: float
    total: float


def jcear_loss(c_o, c_g, f_o, f_g, what, sigma, lambda_max: float = LAMBDA_MAX) -> LossBreakdown:
    """JCE plus ``lambda * sum(gamma**2)``; a batch reduces by the sample mean."""
    lam = regularizer_weight(sigma, lambda_max)
    jce = np.asarray(jce_loss(c_o, c_g, f_o, f_g), dtype=np.float64)
    pen = (gamma(f_o, f_g, what) ** 2).sum(axis=-1)
    total = jce + lam * pen
    return LossBreakdown(
        jce=float(np.mean(jce)), penalty=float(np.mean(pen)), lam=lam, total=float(np.mean(total))
    )


# ---------------------------------------------------------------- adaptive sigma


def sigma_batch_stat(gammas) -> np.ndarray:
    """Per-category population standard deviation of the residual over one batch."""
    g = np.asarray(gammas, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] == 0:
        raise ContractError(f"sigma_batch_stat needs an H x l_o matrix with H >= 1, got {g.shape}")
    alpha = g.mean(axis=0)
    return np.sqrt(((g - alpha) ** 2).mean(axis=0))


def sigma_epoch_update(batch_stats: Sequence[np.ndarray], state: SigmaState) -> SigmaState:
    """Average the K batch statistics, floor each coordinate, advance the counter."""
    if len(batch_stats) == 0:
        raise ContractError("sigma_epoch_update needs at least one batch statistic")
    n = state.sigma.shape[0]
    for k, s in enumerate(batch_stats):
        if np.shape(s) != (n,):
            raise DimensionError(f"batch statistic {k} has shape {np.shape(s)}, expected ({n},)")
    avg = np.mean(np.stack([np.asarray(s, dtype=np.float64) for s in batch_stats]), axis=0)
    return replace(state, sigma=np.maximum(avg, state.floor), t=state.t + 1)


# ---------------------------------------------------------------- graph objective


@dataclass
class ObjectiveParts:
    total: ag.Tensor
    jce: np.ndarray
    penalty: np.ndarray
    gammas: np.ndarray
    f_o: np.ndarray
    f_g: np.ndarray = field(repr=False)


def jcear_objective(logits_o, logits_g, c_o, c_g, what, lam: float) -> ObjectiveParts:
    """Batch-mean JCEAR on the graph, from pre-softmax scores of both heads.

    Cross-entropy is taken on the logits directly (fused log-softmax); the
    residual uses the softmax probabilities. With ``lam == 0`` the penalty
    branch is left out of the graph entirely.
    """
    W = what.what if isinstance(what, CondProbMatrix) else np.asarray(what, dtype=np.float64)
    ce = ag.add(ag.softmax_cross_entropy(logits_o, c_o), ag.softmax_cross_entropy(logits_g, c_g))
    f_o = ag.softmax(logits_o)
    f_g = ag.softmax(logits_g)
    res = ag.sub(f_o, ag.matmul(f_g, ag.Tensor(W.T)))
    pen = ag.sum(ag.square(res), axis=-1)
    per_sample = ag.add(ce, ag.mul(pen, lam)) if lam > 0 else ce
    return ObjectiveParts(
        total=ag.mean(per_sample),
        jce=ce.data,
        penalty=pen.data,
        gammas=res.data,
        f_o=f_o.data,
        f_g=f_g.data,
    )
