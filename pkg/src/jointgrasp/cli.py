"""Command-line front end: synth, split, stats, train, eval, gradcheck, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .ablation import comparison_table, run_ablation
from .data import (
    PROTOCOLS,
    SynthConfig,
    load_manifest,
    make_split,
    mask_grasp_labels,
    summarize,
    synth_generate,
    write_dataset,
    write_split,
)
from .dualnet import ArchConfig, init_model, load_checkpoint, save_checkpoint
from .errors import ConfigError, JointGraspError
from .gradcheck import gradcheck_many
from .loss import estimate_cond_matrix, write_cond_csv
from .trainer import VARIANTS, TrainConfig, consistency_residual, evaluate_model, train

logger = logging.getLogger("jointgrasp")

COMMANDS = ("train", "eval", "split", "stats", "gradcheck", "synth", "ablate")
# keys understood in addition to the TrainConfig/ArchConfig/SynthConfig fields
EXTRA_KEYS = ("data", "checkpoint", "protocol", "mask_p", "ocs_n", "variant", "gradcheck_models")


class RunConfig:
    """Flat key/value settings routed to the three config dataclasses."""

    def __init__(self, values: dict):
        train_keys = {f.name for f in fields(TrainConfig)}
        arch_keys = {f.name for f in fields(ArchConfig)}
        synth_keys = {f.name for f in fields(SynthConfig)}
        for k in values:
            if k not in train_keys | arch_keys | synth_keys | set(EXTRA_KEYS):
                raise ConfigError(f"unknown config key {k!r}")
        self.values = dict(values)
        self.train = {k: v for k, v in values.items() if k in train_keys}
        self.arch = {k: v for k, v in values.items() if k in arch_keys}
        self.synth = {k: v for k, v in values.items() if k in synth_keys}

    def get(self, key, default=None):
        return self.values.get(key, default)

    def synth_config(self) -> SynthConfig:
        return SynthConfig.from_dict(self.synth)

    def arch_config(self, l_o: int, l_g: int, input_shape: tuple[int, int, int]) -> ArchConfig:
        d = {"l_o": l_o, "l_g": l_g, "input_shape": tuple(input_shape)}
        d.update(self.arch)
        return ArchConfig.from_dict(d)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.train)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointgrasp", description=__doc__)
    p.add_argument("command", choices=COMMANDS, metavar="command", help=" | ".join(COMMANDS))
    p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides (JSON values)")
    p.add_argument("--config", type=Path, help="flat JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--deterministic", action="store_true", help="omit timestamps and timings from outputs")
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--mask-p", type=float, dest="mask_p")
    p.add_argument("--ocs-n", type=int, dest="ocs_n")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--data", help="dataset manifest CSV (default: synthetic data)")
    p.add_argument("--checkpoint", type=Path, help="model checkpoint for eval")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_run_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config is not None:
        try:
            values.update(json.loads(args.config.read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        values[k.strip()] = _parse_value(v)
    for k in ("seed", "protocol", "mask_p", "ocs_n", "variant", "data"):
        v = getattr(args, k)
        if v is not None:
            values[k] = v
    if args.checkpoint is not None:
        values["checkpoint"] = str(args.checkpoint)
    return RunConfig(values)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _dataset(rc: RunConfig, input_shape=None):
    if rc.get("data"):
        ds = load_manifest(rc.get("data"), input_shape)
        l_o = max(s.category for s in ds) + 1
        l_g = max((s.grasp for s in ds if s.has_grasp), default=0) + 1
        return ds, rc.get("l_o", l_o), rc.get("l_g", l_g)
    synth = rc.synth_config()
    return synth_generate(synth), synth.l_o, synth.l_g


def _input_shape(rc: RunConfig) -> tuple[int, int, int] | None:
    if "input_shape" in rc.arch:
        return tuple(rc.arch["input_shape"])
    if rc.get("data"):
        return None
    s = rc.synth_config()
    return (s.channels, s.image_size, s.image_size)


def _split(rc: RunConfig, ds, l_o: int):
    seed = rc.get("seed", 0)
    split = make_split(ds, rc.get("protocol", "boc"), seed, ocs_n=rc.get("ocs_n", 1), n_categories=l_o)
    p = rc.get("mask_p", 1.0)
    if p < 1.0:
        split = replace(
            split,
            train=mask_grasp_labels(split.train, p, seed),
            validation=mask_grasp_labels(split.validation, p, seed + 1),
        )
    return split


def _report(ev) -> dict:
    return {k: (json.loads(v.to_json()) if v is not None else None) for k, v in ev.items()}


# ---------------------------------------------------------------- commands


def cmd_synth(rc: RunConfig, out: Path) -> dict:
    ds, _, _ = _dataset(RunConfig({k: v for k, v in rc.values.items() if k != "data"}))
    manifest = write_dataset(ds, out)
    summary = summarize(ds)
    _write_json(out / "summary.json", summary)
    return {"manifest": str(manifest), **summary}


def cmd_split(rc: RunConfig, out: Path) -> dict:
    ds, l_o, _ = _dataset(rc, _input_shape(rc))
    return write_split(_split(rc, ds, l_o), out)


def cmd_stats(rc: RunConfig, out: Path) -> dict:
    ds, l_o, l_g = _dataset(rc, _input_shape(rc))
    cats = [s.category for s in ds]
    grasps = [s.grasp for s in ds]
    what = estimate_cond_matrix(cats, grasps, l_o, l_g)
    out.mkdir(parents=True, exist_ok=True)
    write_cond_csv(what, out / "what.csv")
    summary = summarize(ds)
    summary["empty_categories"] = list(what.empty_rows)
    _write_json(out / "summary.json", summary)
    return summary


def cmd_train(rc: RunConfig, out: Path) -> dict:
    ds, l_o, l_g = _dataset(rc, _input_shape(rc))
    shape = _input_shape(rc) or ds[0].image.shape
    arch = rc.arch_config(l_o, l_g, shape)
    cfg = rc.train_config()
    split = _split(rc, ds, l_o)
    variant = rc.get("variant", "v3")
    model, hist = train(init_model(arch), split, cfg, variant=variant)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint.json", extra={"variant": variant, "train": rc.train})
    (out / "history.jsonl").write_text(hist.to_jsonl())
    report = {
        "variant": variant,
        "iterations": len(hist),
        "converged": hist.converged,
        "test": _report(evaluate_model(model, split.test)),
        "validation_residual": consistency_residual(model, split.validation, hist.what) if split.validation else None,
    }
    _write_json(out / "metrics.json", report)
    return report


def cmd_eval(rc: RunConfig, out: Path) -> dict:
    if not rc.get("checkpoint") or not rc.get("data"):
        raise ConfigError("eval needs --checkpoint and --data")
    model = load_checkpoint(rc.get("checkpoint"))
    ds = load_manifest(rc.get("data"), model.arch.input_shape)
    report = _report(evaluate_model(model, ds))
    _write_json(out / "metrics.json", report)
    return report


def cmd_gradcheck(rc: RunConfig, out: Path) -> dict:
    seed = rc.get("seed", 0)
    n = int(rc.get("gradcheck_models", 4))
    reports = gradcheck_many(range(seed, seed + n))
    worst = max(r.max_rel_error for r in reports)
    result = {"models": [r.to_dict() for r in reports], "max_rel_error": worst, "threshold": 1e-4, "ok": worst <= 1e-4}
    _write_json(out / "gradcheck.json", result)
    return result


def cmd_ablate(rc: RunConfig, out: Path) -> dict:
    ds, l_o, l_g = _dataset(rc, _input_shape(rc))
    shape = _input_shape(rc) or ds[0].image.shape
    arch = rc.arch_config(l_o, l_g, shape)
    split = _split(rc, ds, l_o)
    results = run_ablation(split, arch, rc.train_config())
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(comparison_table(results))
    report = {
        v: {"grasp_GA": r.grasp_ga, "grasp_MF1": r.grasp_mf1, "grasp_MRC": r.grasp_mrc, "category_GA": r.category_ga,
            "iterations": len(r.history)}
        for v, r in results.items()
    }
    _write_json(out / "ablation.json", report)
    return report


HANDLERS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "stats": cmd_stats,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_intermixed_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    start = time.time()
    try:
        rc = load_run_config(args)
        result = HANDLERS[args.command](rc, args.out)
    except ConfigError as exc:
        print(f"jointgrasp {args.command}: config error: {exc}", file=sys.stderr)
        return 1
    except (JointGraspError, OSError) as exc:
        print(f"jointgrasp {args.command}: {exc}", file=sys.stderr)
        return 1
    if not args.deterministic:
        _write_json(args.out / "run.json", {"command": args.command, "started": start, "seconds": time.time() - start})
    print(json.dumps(result, sort_keys=True, default=_json_default))
    if args.command == "gradcheck" and not result["ok"]:
        return 1
    return 0


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def main() -> None:
    sys.exit(run_command())
