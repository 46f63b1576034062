"""Autodiff versus central differences on the full dual-branch objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .dualnet import GROUPS, ArchConfig, category_scores, grasp_scores, init_model
from .loss import MISSING, estimate_cond_matrix, jcear_objective, one_hot, regularizer_weight


@dataclass
class GradcheckReport:
    seed: int
    extractor: str
    n_parameters: int
    lam: float
    loss: float
    max_rel_error: float
    worst_group: str

    def to_dict(self) -> dict:
        return asdict(self)


def tiny_arch(seed: int, extractor: str = "mlp") -> ArchConfig:
    if extractor == "smallcnn":
        return ArchConfig(
            input_shape=(1, 6, 6),
            l_o=3,
            l_g=2,
            category_conv=(2, 2),
            category_fc=(4,),
            category_hidden=(3,),
            grasp_conv=(2, 2),
            grasp_fc=(),
            grasp_hidden=(3,),
            seed=seed,
        )
    return ArchConfig(
        input_shape=(1, 3, 3),
        l_o=3,
        l_g=2,
        category_extractor="mlp",
        category_fc=(4,),
        category_hidden=(3,),
        grasp_extractor="mlp",
        grasp_fc=(3,),
        grasp_hidden=(3,),
        seed=seed,
    )


def jcear_gradcheck(seed: int, extractor: str = "mlp", batch: int = 4, eps: float = 1e-5) -> GradcheckReport:
    """Compare backward() with central differences for every parameter of a tiny model.

    Inputs, labels (one grasp label missing), the conditional matrix and a
    finite sigma are all drawn from ``seed`` so the penalty term is active.
    Biases get small random values: with zero biases a dead feature layer
    puts every downstream ReLU exactly on its kink, where central differences
    and the subgradient legitimately disagree.
    """
    arch = tiny_arch(seed, extractor)
    model = init_model(arch)
    rng = np.random.default_rng(seed + 10_000)
    for g in GROUPS:
        setattr(model, g, [a if a.ndim > 1 else rng.uniform(-0.1, 0.1, size=a.shape) for a in model.group(g)])
    x_cat = rng.uniform(0, 1, size=(batch, *arch.input_shape))
    x_grasp = rng.normal(size=(batch, *arch.input_shape))
    cats = rng.integers(0, arch.l_o, size=batch)
    grasps = rng.integers(0, arch.l_g, size=batch)
    grasps[0] = MISSING
    what = estimate_cond_matrix(cats, grasps, arch.l_o, arch.l_g)
    lam = regularizer_weight(rng.uniform(0.5, 1.5, size=arch.l_o))
    c_o, c_g = one_hot(cats, arch.l_o), one_hot(grasps, arch.l_g)

    def objective(groups: dict[str, list]) -> ag.Tensor:
        I_c, lo = category_scores(x_cat, groups["theta1"], groups["theta2"], arch)
        _, _, lg = grasp_scores(x_grasp, I_c, groups["theta3"], groups["theta4"], arch)
        return jcear_objective(lo, lg, c_o, c_g, what, lam).total

    leaves = model.tensors(trainable=GROUPS)
    loss = objective(leaves)
    grads = ag.backward(loss)
    flat_leaves = [t for g in GROUPS for t in leaves[g]]
    sizes = [len(leaves[g]) for g in GROUPS]

    def f(*arrays):
        it = iter(arrays)
        return objective({g: [next(it) for _ in range(n)] for g, n in zip(GROUPS, sizes)}).item()

    fd = ag.finite_diff_grad(f, [t.data for t in flat_leaves], eps=eps)
    worst, worst_group = 0.0, GROUPS[0]
    k = 0
    for g, n in zip(GROUPS, sizes):
        err = ag.max_relative_error([grads[t] for t in flat_leaves[k : k + n]], fd[k : k + n])
        if err > worst:
            worst, worst_group = err, g
        k += n
    return GradcheckReport(seed, extractor, model.num_parameters(), lam, loss.item(), worst, worst_group)


def gradcheck_many(seeds, extractors=("mlp", "smallcnn")) -> list[GradcheckReport]:
    """Alternate extractor kinds across ``seeds``."""
    return [jcear_gradcheck(s, extractors[i % len(extractors)]) for i, s in enumerate(seeds)]
