"""Dual-label datasets: normalization, split protocols, label masking,
synthetic generation and CSV manifests."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .loss import MISSING

logger = logging.getLogger(__name__)

PROTOCOLS = ("wwc", "boc", "ocs")
MANIFEST_HEADER = ("path", "object_id", "category", "grasp")


@dataclass(frozen=True)
class DualLabelSample:
    image: np.ndarray = field(repr=False)
    object_id: str
    category: int
    grasp: int = MISSING

    @property
    def has_grasp(self) -> bool:
        return self.grasp != MISSING


@dataclass
class DatasetSplit:
    train: list[DualLabelSample]
    validation: list[DualLabelSample]
    test: list[DualLabelSample]
    seed: int
    protocol: str

    def parts(self) -> dict[str, list[DualLabelSample]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


def stack_images(samples: Sequence[DualLabelSample]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float64)


def labels(samples: Sequence[DualLabelSample]) -> tuple[np.ndarray, np.ndarray]:
    cats = np.array([s.category for s in samples], dtype=np.int64)
    grasps = np.array([s.grasp for s in samples], dtype=np.int64)
    return cats, grasps


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------- normalization


def normalize_image(x, branch: str = "grasp", mode: str = "standard") -> tuple[np.ndarray, tuple[int, ...]]:
    """Normalize one (C, H, W) image for the given branch.

    The category branch divides by 255. The grasp branch standardizes each
    channel by its mean and population standard deviation; ``mode="as-written"``
    instead divides both sums by ``H + W`` and takes the root of the summed
    (unsquared) deviations. Channels whose scale is not positive come back as
    zeros and their indices are returned alongside the image.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise DimensionError(f"expected a (C, H, W) image, got shape {x.shape}")
    if branch == "category":
        return x / 255.0, ()
    if branch != "grasp":
        raise ConfigError(f"branch must be 'category' or 'grasp', got {branch!r}")
    c, h, w = x.shape
    flat = x.reshape(c, -1)
    if mode == "standard":
        mu = flat.mean(axis=1)
        scale = np.sqrt(((flat - mu[:, None]) ** 2).mean(axis=1))
    elif mode == "as-written":
        mu = flat.sum(axis=1) / (h + w)
        arg = (flat - mu[:, None]).sum(axis=1) / (h + w)
        scale = np.sqrt(np.where(arg > 0, arg, 0.0))
    else:
        raise ConfigError(f"unknown normalization mode {mode!r}")
    out = np.zeros_like(flat)
    ok = scale > 0
    out[ok] = (flat[ok] - mu[ok, None]) / scale[ok, None]
    degenerate = tuple(int(i) for i in np.nonzero(~ok)[0])
    if degenerate:
        logger.debug("degenerate channels %s during normalization", degenerate)
    return out.reshape(c, h, w), degenerate


def prepare_inputs(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch version of both branch normalizations for a (B, C, H, W) array."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"expected (B, C, H, W), got {x.shape}")
    b, c = x.shape[:2]
    flat = x.reshape(b, c, -1)
    mu = flat.mean(axis=2, keepdims=True)
    sd = np.sqrt(((flat - mu) ** 2).mean(axis=2, keepdims=True))
    safe = np.where(sd > 0, sd, 1.0)
    grasp = np.where(sd > 0, (flat - mu) / safe, 0.0).reshape(x.shape)
    return x / 255.0, grasp


# ---------------------------------------------------------------- splits


def _object_index(dataset: Sequence[DualLabelSample]) -> dict[str, list[int]]:
    idx: dict[str, list[int]] = defaultdict(list)
    for i, s in enumerate(dataset):
        idx[s.object_id].append(i)
    return dict(idx)


def split_wwc(dataset: Sequence[DualLabelSample], seed: int) -> DatasetSplit:
    """Sample-level 8:1:1 split."""
    n = len(dataset)
    if n < 10:
        raise ConfigError(f"WWC needs at least 10 samples, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_test = max(1, n // 10)
    n_val = max(1, _round_half_up(n / 10))
    test = [dataset[i] for i in perm[:n_test]]
    val = [dataset[i] for i in perm[n_test : n_test + n_val]]
    train = [dataset[i] for i in perm[n_test + n_val :]]
    return DatasetSplit(train, val, test, seed, "wwc")


def split_boc(dataset: Sequence[DualLabelSample], seed: int) -> DatasetSplit:
    """Object-level split: 10% of objects to test, the rest 9:1 train/validation."""
    objects = _object_index(dataset)
    ids = sorted(objects)
    if len(ids) < 3:
        raise ConfigError(f"BOC needs at least 3 distinct objects, got {len(ids)}")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_test = max(1, len(ids) // 10)
    rest = order[n_test:]
    n_val = max(1, _round_half_up(len(rest) / 10))

    def gather(obj_ids):
        return [dataset[i] for o in obj_ids for i in objects[o]]

    return DatasetSplit(gather(rest[n_val:]), gather(rest[:n_val]), gather(order[:n_test]), seed, "boc")


def split_ocs(
    dataset: Sequence[DualLabelSample],
    n: int | Mapping[int, int],
    seed: int,
    n_categories: int | None = None,
) -> DatasetSplit:
    """Category-aware sampling guaranteeing grasp-labelled objects in training.

    For a category with ``m`` objects and quota ``n``: if ``m <= n`` every
    object trains with its grasp labels; otherwise ``n`` objects keep their
    labels, ``m - n - 1`` train with grasp labels masked and one object is
    held out for testing. Training objects are then split 9:1 into train and
    validation.
    """
    quota = (lambda j: int(n[j])) if isinstance(n, Mapping) else (lambda j: int(n))
    objects = _object_index(dataset)
    by_cat: dict[int, list[str]] = defaultdict(list)
    for oid, rows in objects.items():
        cats = {dataset[i].category for i in rows}
        if len(cats) != 1:
            raise ContractError(f"object {oid!r} carries several categories {sorted(cats)}")
        by_cat[cats.pop()].append(oid)
    cat_ids = range(n_categories) if n_categories is not None else sorted(by_cat)
    rng = np.random.default_rng(seed)
    labelled, masked, test_objs = [], [], []
    for j in cat_ids:
        objs = sorted(by_cat.get(j, []))
        if not objs:
            logger.warning("category %d has no objects; skipped by OCS", j)
            continue
        nj = quota(j)
        if nj < 1:
            raise ConfigError(f"OCS quota must be >= 1, got {nj} for category {j}")
        order = [objs[i] for i in rng.permutation(len(objs))]
        if len(order) <= nj:
            labelled.extend(order)
        else:
            labelled.extend(order[:nj])
            masked.extend(order[nj:-1])
            test_objs.append(order[-1])
    pool = labelled + masked
    if len(pool) < 2:
        raise ConfigError("OCS training pool needs at least two objects")
    pool_order = [pool[i] for i in rng.permutation(len(pool))]
    n_val = max(1, _round_half_up(len(pool) / 10))
    masked_set = set(masked)

    def gather(obj_ids, strip: bool):
        out = []
        for o in obj_ids:
            for i in objects[o]:
                s = dataset[i]
                out.append(replace(s, grasp=MISSING) if strip and o in masked_set else s)
        return out

    return DatasetSplit(
        train=gather(pool_order[n_val:], True),
        validation=gather(pool_order[:n_val], True),
        test=gather(test_objs, False),
        seed=seed,
        protocol="ocs",
    )


def make_split(dataset, protocol: str, seed: int, ocs_n: int = 1, n_categories: int | None = None) -> DatasetSplit:
    if protocol == "wwc":
        return split_wwc(dataset, seed)
    if protocol == "boc":
        return split_boc(dataset, seed)
    if protocol == "ocs":
        return split_ocs(dataset, ocs_n, seed, n_categories)
    raise ConfigError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")


def cross_validation(dataset, protocol: str, seed: int, folds: int = 10, **kw) -> Iterator[DatasetSplit]:
    """Repeated random splits, one per fold, seeded ``seed, seed + 1, ...``."""
    for k in range(folds):
        yield make_split(dataset, protocol, seed + k, **kw)


def mask_grasp_labels(dataset: Sequence[DualLabelSample], p: float, seed: int) -> list[DualLabelSample]:
    """Keep exactly ``round(p * L)`` of the ``L`` grasp labels, chosen uniformly."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"retained proportion must be in [0, 1], got {p}")
    labelled = [i for i, s in enumerate(dataset) if s.has_grasp]
    keep_n = _round_half_up(p * len(labelled))
    if keep_n == len(labelled):
        return list(dataset)
    rng = np.random.default_rng(seed)
    keep = set(labelled[i] for i in rng.choice(len(labelled), size=keep_n, replace=False))
    return [s if (i in keep or not s.has_grasp) else replace(s, grasp=MISSING) for i, s in enumerate(dataset)]


# ---------------------------------------------------------------- synthetic data


@dataclass
class SynthConfig:
    l_o: int = 8
    l_g: int = 3
    objects_per_category: int = 10
    views_per_object: int = 20
    image_size: int = 16
    channels: int = 3
    noise: float = 1.0
    object_spread: float = 1.5
    frequencies: int = 4
    grasp_map: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.grasp_map, list):
            self.grasp_map = tuple(self.grasp_map)
        if min(self.l_o, self.l_g, self.objects_per_category, self.views_per_object) < 1:
            raise ConfigError("synthetic sizes must all be >= 1")
        if self.image_size < 1 or self.channels < 1 or self.frequencies < 1:
            raise ConfigError("image_size, channels and frequencies must be >= 1")
        if self.noise < 0 or self.object_spread < 0:
            raise ConfigError("noise and object_spread must be non-negative")
        gm = self.category_to_grasp()
        if any(not 0 <= g < self.l_g for g in gm):
            raise ConfigError(f"grasp_map entries must lie in [0, {self.l_g})")

    def category_to_grasp(self) -> tuple[int, ...]:
        if self.grasp_map is None:
            return tuple(i % self.l_g for i in range(self.l_o))
        if len(self.grasp_map) != self.l_o:
            raise ConfigError(f"grasp_map has {len(self.grasp_map)} entries for {self.l_o} categories")
        return tuple(int(g) for g in self.grasp_map)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"unknown synthetic-data key {k!r}")
        return cls(**d)


def _smooth_field(rng: np.random.Generator, channels: int, size: int, freqs: int) -> np.ndarray:
    """Random low-frequency cosine field with unit standard deviation per channel."""
    coords = (np.arange(size) + 0.5) / size
    basis = np.cos(np.pi * np.outer(np.arange(freqs), coords))  # (freqs, size)
    coef = rng.standard_normal((channels, freqs, freqs))
    f = np.einsum("cuv,uy,vx->cyx", coef, basis, basis)
    f -= f.mean(axis=(1, 2), keepdims=True)
    sd = f.std(axis=(1, 2), keepdims=True)
    return f / np.where(sd > 0, sd, 1.0)


def synth_generate(cfg: SynthConfig) -> list[DualLabelSample]:
    """Seeded dual-label images: category pattern + object offset + view noise."""
    rng = np.random.default_rng(cfg.seed)
    gmap = cfg.category_to_grasp()
    c, s = cfg.channels, cfg.image_size
    bases = [_smooth_field(rng, c, s, cfg.frequencies) for _ in range(cfg.l_o)]
    out = []
    for cat in range(cfg.l_o):
        for k in range(cfg.objects_per_category):
            template = bases[cat] + cfg.object_spread * _smooth_field(rng, c, s, cfg.frequencies)
            oid = f"c{cat:02d}_o{k:03d}"
            for _ in range(cfg.views_per_object):
                view = template + cfg.noise * rng.standard_normal(template.shape) if cfg.noise > 0 else template
                img = np.clip(128.0 + 40.0 * view, 0.0, 255.0)
                out.append(DualLabelSample(image=img, object_id=oid, category=cat, grasp=gmap[cat]))
    return out


# ---------------------------------------------------------------- manifests


def _read_image(path: Path, shape: tuple[int, int, int] | None) -> np.ndarray:
    if path.suffix == ".raw":
        meta = json.loads(path.with_suffix(".json").read_text())
        arr = np.frombuffer(path.read_bytes(), dtype=meta.get("dtype", "<f8")).astype(np.float64)
        arr = arr.reshape(meta["shape"])
        if shape is not None and tuple(arr.shape) != tuple(shape):
            raise DimensionError(f"raw tensor shape {arr.shape} != configured {shape}")
        return arr
    from PIL import Image

    with Image.open(path) as im:
        c = 3 if shape is None else shape[0]
        im = im.convert("L" if c == 1 else "RGB")
        if shape is not None:
            im = im.resize((shape[2], shape[1]))
        arr = np.asarray(im, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def load_manifest(path, input_shape: tuple[int, int, int] | None = None) -> list[DualLabelSample]:
    """Read a ``path,object_id,category,grasp`` CSV; image paths are relative to the manifest."""
    path = Path(path)
    base = path.parent
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows) < 2:
        raise ContractError(f"{path}: manifest contains no samples")
    header = tuple(h.strip() for h in rows[0])
    if header != MANIFEST_HEADER:
        raise ContractError(f"{path}: expected header {','.join(MANIFEST_HEADER)}, got {','.join(header)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise ContractError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        img_path, oid, cat, grasp = (v.strip() for v in row)
        try:
            img = _read_image(base / img_path, input_shape)
        except (OSError, ValueError) as exc:
            raise ContractError(f"{path}:{lineno}: cannot read image {img_path!r}: {exc}") from exc
        try:
            g = MISSING if grasp == "-" else int(grasp)
            out.append(DualLabelSample(image=img, object_id=oid, category=int(cat), grasp=g))
        except ValueError as exc:
            raise ContractError(f"{path}:{lineno}: bad label field: {exc}") from exc
    if not out:
        raise ContractError(f"{path}: manifest contains no samples")
    return out


def write_raw_image(img: np.ndarray, path: Path) -> None:
    arr = np.ascontiguousarray(img, dtype="<f8")
    path.write_bytes(arr.tobytes())
    path.with_suffix(".json").write_text(json.dumps({"shape": list(arr.shape), "dtype": "<f8"}))


def write_dataset(dataset: Sequence[DualLabelSample], out_dir, manifest_name: str = "manifest.csv") -> Path:
    """Store images as raw little-endian tensors and write a manifest next to them."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    counts: Counter = Counter()
    rows = []
    for s in dataset:
        k = counts[s.object_id]
        counts[s.object_id] += 1
        rel = Path("images") / f"{s.object_id}_{k:04d}.raw"
        write_raw_image(s.image, out_dir / rel)
        rows.append((rel.as_posix(), s.object_id, s.category, "-" if s.grasp == MISSING else s.grasp))
    manifest = out_dir / manifest_name
    write_manifest_rows(rows, manifest)
    return manifest


def write_manifest_rows(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)


def summarize(dataset: Sequence[DualLabelSample]) -> dict:
    cats = Counter(s.category for s in dataset)
    grasps = Counter(s.grasp for s in dataset if s.has_grasp)
    return {
        "samples": len(dataset),
        "objects": len({s.object_id for s in dataset}),
        "per_category": {str(k): cats[k] for k in sorted(cats)},
        "per_grasp": {str(k): grasps[k] for k in sorted(grasps)},
        "masked": sum(1 for s in dataset if not s.has_grasp),
    }


def write_split(split: DatasetSplit, out_dir) -> dict:
    """Write train/validation/test manifests plus a JSON summary; returns the summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {"protocol": split.protocol, "seed": split.seed}
    for name, part in split.parts().items():
        write_dataset(part, out_dir / name, manifest_name=f"{name}.csv")
        summary[name] = summarize(part)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
