"""Dual-branch classifier: a category branch and a grasp branch whose
classifier sees the concatenation ``[I_grasp, I_category]``.

Parameters are split into four disjoint groups:

* ``theta1`` category feature extractor
* ``theta2`` category classifier
* ``theta3`` grasp feature extractor
* ``theta4`` grasp classifier
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .errors import ConfigError, DimensionError

GROUPS = ("theta1", "theta2", "theta3", "theta4")
EXTRACTOR_KINDS = ("mlp", "smallcnn")
CHECKPOINT_FORMAT = "jointgrasp-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ArchConfig:
    input_shape: tuple[int, int, int] = (3, 16, 16)
    l_o: int = 8
    l_g: int = 3
    category_extractor: str = "smallcnn"
    category_conv: tuple[int, ...] = (8, 8)
    category_kernel: int = 3
    category_stride: int = 1
    category_fc: tuple[int, ...] = (64,)
    category_hidden: tuple[int, ...] = (32,)
    grasp_extractor: str = "smallcnn"
    grasp_conv: tuple[int, ...] = (4, 4)
    grasp_kernel: int = 3
    grasp_stride: int = 1
    grasp_fc: tuple[int, ...] = ()
    grasp_hidden: tuple[int, ...] = (16,)
    pool: int = 2
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))
        self.validate()

    @classmethod
    def large_preset(cls, l_o: int, l_g: int, seed: int = 0) -> "ArchConfig":
        """224x224 RGB input, category classifier 256/128/64, grasp classifier 128/64."""
        return cls(
            input_shape=(3, 224, 224),
            l_o=l_o,
            l_g=l_g,
            category_extractor="smallcnn",
            category_conv=(4, 4),
            category_kernel=4,
            category_stride=2,
            category_fc=(128,),
            category_hidden=(256, 128, 64),
            grasp_extractor="smallcnn",
            grasp_conv=(4, 4),
            grasp_kernel=4,
            grasp_stride=2,
            grasp_fc=(),
            grasp_hidden=(128, 64),
            seed=seed,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"unknown architecture key {k!r}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    # -- derived dims

    def _extractor_dim(self, branch: str) -> int:
        kind = getattr(self, f"{branch}_extractor")
        fc = getattr(self, f"{branch}_fc")
        if fc:
            return fc[-1]
        if kind == "mlp":
            raise ConfigError(f"{branch} mlp extractor needs at least one fc layer")
        c, h, w = self._conv_output(branch)
        return c * h * w

    def _conv_output(self, branch: str) -> tuple[int, int, int]:
        chans = getattr(self, f"{branch}_conv")
        k = getattr(self, f"{branch}_kernel")
        s = getattr(self, f"{branch}_stride")
        _, h, w = self.input_shape
        for i, _c in enumerate(chans):
            if k > h or k > w:
                raise ConfigError(f"{branch} conv layer {i + 1}: kernel {k} larger than map {h}x{w}")
            h, w = (h - k) // s + 1, (w - k) // s + 1
        if h % self.pool or w % self.pool:
            raise ConfigError(f"{branch}: pool {self.pool} does not divide feature map {h}x{w}")
        return chans[-1], h // self.pool, w // self.pool

    def _flat_input(self, branch: str) -> int:
        if getattr(self, f"{branch}_extractor") == "mlp":
            return int(np.prod(self.input_shape))
        c, h, w = self._conv_output(branch)
        return c * h * w

    @property
    def category_feature_dim(self) -> int:
        return self._extractor_dim("category")

    @property
    def grasp_feature_dim(self) -> int:
        return self._extractor_dim("grasp")

    @property
    def grasp_classifier_input_dim(self) -> int:
        return self.grasp_feature_dim + self.category_feature_dim

    def validate(self) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) <= 0:
            raise ConfigError(f"input_shape must be (C, H, W) with positive sizes, got {self.input_shape}")
        if self.l_o <= 0 or self.l_g <= 0:
            raise ConfigError(f"l_o and l_g must be positive, got {self.l_o}, {self.l_g}")
        for branch in ("category", "grasp"):
            kind = getattr(self, f"{branch}_extractor")
            if kind not in EXTRACTOR_KINDS:
                raise ConfigError(f"{branch}_extractor must be one of {EXTRACTOR_KINDS}, got {kind!r}")
            for key in (f"{branch}_fc", f"{branch}_hidden") + ((f"{branch}_conv",) if kind == "smallcnn" else ()):
                dims = getattr(self, key)
                if any(int(d) <= 0 for d in dims):
                    raise ConfigError(f"{key} contains a zero-dimension layer: {dims}")
            if kind == "smallcnn":
                if len(getattr(self, f"{branch}_conv")) != 2:
                    raise ConfigError(f"{branch}_conv must list exactly two conv layers")
                if getattr(self, f"{branch}_kernel") < 1 or getattr(self, f"{branch}_stride") < 1:
                    raise ConfigError(f"{branch} kernel and stride must be >= 1")
            self._extractor_dim(branch)
        if self.pool < 1:
            raise ConfigError(f"pool must be >= 1, got {self.pool}")


@dataclass
class ModelParams:
    arch: ArchConfig
    theta1: list[np.ndarray] = field(default_factory=list)
    theta2: list[np.ndarray] = field(default_factory=list)
    theta3: list[np.ndarray] = field(default_factory=list)
    theta4: list[np.ndarray] = field(default_factory=list)

    def group(self, name: str) -> list[np.ndarray]:
        if name not in GROUPS:
            raise KeyError(name)
        return getattr(self, name)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, *[[a.copy() for a in self.group(g)] for g in GROUPS])

    def num_parameters(self, groups: Sequence[str] = GROUPS) -> int:
        return int(sum(a.size for g in groups for a in self.group(g)))

    def tensors(self, trainable: Sequence[str] = ()) -> dict[str, list[ag.Tensor]]:
        """Wrap every group as graph leaves; only groups in ``trainable`` carry gradients."""
        return {g: [ag.Tensor(a, requires_grad=g in trainable) for a in self.group(g)] for g in GROUPS}


@dataclass
class ForwardTrace:
    I_category: np.ndarray
    I_grasp: np.ndarray
    I: np.ndarray
    f_o: np.ndarray
    f_g: np.ndarray


# ---------------------------------------------------------------- init


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _init_extractor(rng, cfg: ArchConfig, branch: str) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    if getattr(cfg, f"{branch}_extractor") == "smallcnn":
        k = getattr(cfg, f"{branch}_kernel")
        c_in = cfg.input_shape[0]
        for c_out in getattr(cfg, f"{branch}_conv"):
            out.append(_glorot(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k))
            out.append(np.zeros(c_out))
            c_in = c_out
    out.extend(_init_dense(rng, [cfg._flat_input(branch), *getattr(cfg, f"{branch}_fc")]))
    return out


def _init_dense(rng, dims: Sequence[int]) -> list[np.ndarray]:
    out = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        out.append(_glorot(rng, (d_out, d_in), d_in, d_out))
        out.append(np.zeros(d_out))
    return out


def init_model(cfg: ArchConfig) -> ModelParams:
    """Glorot-uniform weights and zero biases, drawn from ``cfg.seed`` in group order."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    theta1 = _init_extractor(rng, cfg, "category")
    theta2 = _init_dense(rng, [cfg.category_feature_dim, *cfg.category_hidden, cfg.l_o])
    theta3 = _init_extractor(rng, cfg, "grasp")
    theta4 = _init_dense(rng, [cfg.grasp_classifier_input_dim, *cfg.grasp_hidden, cfg.l_g])
    return ModelParams(cfg, theta1, theta2, theta3, theta4)


# ---------------------------------------------------------------- forward


def _batched(x, cfg: ArchConfig) -> tuple[ag.Tensor, bool]:
    x = ag.as_tensor(x)
    if x.shape == tuple(cfg.input_shape):
        return ag.reshape(x, (1, *cfg.input_shape)), True
    if x.data.ndim == 4 and x.shape[1:] == tuple(cfg.input_shape):
        return x, False
    raise DimensionError(f"input shape {x.shape} does not match {cfg.input_shape}")


def _dense_stack(params: Sequence, final: str) -> ag.LayerStack:
    ts = [ag.as_tensor(p) for p in params]
    n = len(ts) // 2
    return ag.LayerStack(
        [ag.Layer(ts[2 * i], ts[2 * i + 1], final if i == n - 1 else "relu") for i in range(n)]
    )


def _extract(x: ag.Tensor, params: Sequence, cfg: ArchConfig, branch: str) -> ag.Tensor:
    ps = list(params)
    if getattr(cfg, f"{branch}_extractor") == "smallcnn":
        stride = getattr(cfg, f"{branch}_stride")
        h = ag.relu(ag.conv2d(x, ps[0], ps[1], stride=stride))
        h = ag.relu(ag.conv2d(h, ps[2], ps[3], stride=stride))
        h = ag.max_pool2d(h, cfg.pool)
        ps = ps[4:]
    else:
        h = x
    h = ag.flatten(h)
    if ps:
        h = ag.eval_layer_stack(h, _dense_stack(ps, "relu"))[-1]
    return h


def _check_group(params: Sequence, expected: int, name: str) -> None:
    if len(params) != expected:
        raise DimensionError(f"{name}: expected {expected} tensors, got {len(params)}")


def category_scores(x, theta1, theta2, cfg: ArchConfig) -> tuple[ag.Tensor, ag.Tensor]:
    """``(I_category, logits)`` for a batch of category-branch inputs."""
    xb, _ = _batched(x, cfg)
    feats = _extract(xb, theta1, cfg, "category")
    logits = ag.eval_layer_stack(feats, _dense_stack(theta2, "identity"))[-1]
    return feats, logits


def grasp_scores(x, I_category, theta3, theta4, cfg: ArchConfig) -> tuple[ag.Tensor, ag.Tensor, ag.Tensor]:
    """``(I_grasp, I, logits)`` for a batch of grasp-branch inputs."""
    xb, _ = _batched(x, cfg)
    I_category = ag.as_tensor(I_category)
    if I_category.data.ndim == 1:
        I_category = ag.reshape(I_category, (1, -1))
    feats = _extract(xb, theta3, cfg, "grasp")
    if I_category.shape[0] != feats.shape[0]:
        raise DimensionError(f"I_category batch {I_category.shape[0]} != input batch {feats.shape[0]}")
    joined = ag.concat([feats, I_category], axis=-1)
    d_in = ag.as_tensor(theta4[0]).shape[1]
    if joined.shape[-1] != d_in:
        raise DimensionError(
            f"concatenated feature length {joined.shape[-1]} != grasp classifier input dim {d_in}"
        )
    logits = ag.eval_layer_stack(joined, _dense_stack(theta4, "identity"))[-1]
    return feats, joined, logits


def _unbatch(t: ag.Tensor, single: bool) -> ag.Tensor:
    return ag.reshape(t, t.shape[1:]) if single else t


def forward_category(x, theta1, theta2, cfg: ArchConfig) -> tuple[ag.Tensor, ag.Tensor]:
    """Return ``(I_category, f_o)``; a single (C, H, W) image gives unbatched outputs."""
    _, single = _batched(x, cfg)
    feats, logits = category_scores(x, theta1, theta2, cfg)
    return _unbatch(feats, single), _unbatch(ag.softmax(logits), single)


def forward_grasp(x, I_category, theta3, theta4, cfg: ArchConfig) -> tuple[ag.Tensor, ag.Tensor]:
    """Return ``(I_grasp, f_g)``; the classifier input is ``[I_grasp, I_category]``."""
    _, single = _batched(x, cfg)
    feats, _, logits = grasp_scores(x, I_category, theta3, theta4, cfg)
    return _unbatch(feats, single), _unbatch(ag.softmax(logits), single)


def forward(x_category, x_grasp, model: ModelParams) -> ForwardTrace:
    """Evaluate both branches without building gradients."""
    cfg = model.arch
    I_c, logits_o = category_scores(x_category, model.theta1, model.theta2, cfg)
    I_g, joined, logits_g = grasp_scores(x_grasp, I_c, model.theta3, model.theta4, cfg)
    return ForwardTrace(
        I_category=I_c.data,
        I_grasp=I_g.data,
        I=joined.data,
        f_o=ag.softmax(logits_o).data,
        f_g=ag.softmax(logits_g).data,
    )


def argmax_lowest(p: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest index (numpy's behaviour)."""
    return np.argmax(np.asarray(p), axis=-1)


def predict(x, model: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Category and grasp indices for raw images (normalized per branch here)."""
    from .data import prepare_inputs

    xb = np.asarray(x, dtype=np.float64)
    single = xb.ndim == 3
    if single:
        xb = xb[None]
    x_cat, x_grasp = prepare_inputs(xb)
    trace = forward(x_cat, x_grasp, model)
    cat, grasp = argmax_lowest(trace.f_o), argmax_lowest(trace.f_g)
    if single:
        return int(cat[0]), int(grasp[0])
    return cat, grasp


# ---------------------------------------------------------------- checkpoints


def _encode(a: np.ndarray) -> dict:
    return {
        "shape": list(a.shape),
        "dtype": "<f8",
        "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii"),
    }


def _decode(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=d.get("dtype", "<f8")).astype(np.float64).reshape(d["shape"])


def save_checkpoint(model: ModelParams, path, extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": model.arch.to_dict(),
        "params": {g: [_encode(a) for a in model.group(g)] for g in GROUPS},
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1))


def load_checkpoint(path) -> ModelParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    arch = ArchConfig.from_dict(doc["arch"])
    model = ModelParams(arch, *[[_decode(d) for d in doc["params"][g]] for g in GROUPS])
    ref = init_model(arch)
    for g in GROUPS:
        got = [a.shape for a in model.group(g)]
        want = [a.shape for a in ref.group(g)]
        if got != want:
            raise DimensionError(f"{path}: {g} shapes {got} do not match architecture {want}")
    return model
