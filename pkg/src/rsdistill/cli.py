"""``rsdistill`` command line: train, distill, evaluate, sweep, check gradients, analyse.

Configuration resolves in three layers: per-family defaults, then an
optional ``--config`` JSON file, then explicit flags. A flag that sets a
key the config file already sets is refused unless ``--override`` is given.
The resolved configuration and its run id are stored in summary.json; the
same file can be passed back through ``--config`` to repeat the run.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import analysis
from ._build import BUILD_ID
from .data import Dataset, parse_data_uri
from .errors import FormatError, NumericalError, RsdError
from .gradcheck import SUITE, run_suite
from .models import ModelSpec, load_model
from .serialize import load_checkpoint
from .trainer import (OBJECTIVES, TrainConfig, _atomic_write, default_config, distill,
                      evaluate, sweep, train_teacher)

log = logging.getLogger("rsdistill")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
DEFAULT_DATA = "synth://gauss?C=3&n=200&size=16&seed=7"

# flag dest -> (path in the resolved config, help, type)
_MODEL_FLAGS = {
    "family": (("model", "family"), "model family: cnn, transformer or mixer", str),
    "embed_dim": (("model", "embed_dim"), "penultimate embedding width (default 32)", int),
    "depth": (("model", "depth"), "number of blocks (default 3 for cnn, 2 otherwise)", int),
    "width": (("model", "width"), "base channel width of the cnn (default 8)", int),
    "patch_size": (("model", "patch_size"), "patch side for token models (default 4)", int),
    "mlp_ratio": (("model", "mlp_ratio"), "hidden expansion of token MLPs (default 2)", int),
}
_TRAIN_FLAGS = {
    "objective": (("train", "objective"), f"training objective, one of {OBJECTIVES}", str),
    "optimizer": (("train", "optimizer"), "sgd or adam (default sgd for cnn, adam otherwise)",
                  str),
    "lr": (("train", "lr"), "base learning rate (default 0.05 sgd, 1e-3 adam)", float),
    "momentum": (("train", "momentum"), "sgd momentum (default 0.9)", float),
    "weight_decay": (("train", "weight_decay"), "L2 weight decay (default 5e-4 sgd, 0 adam)",
                     float),
    "epochs": (("train", "epochs"), "training epochs (default 30)", int),
    "batch_size": (("train", "batch_size"), "batch size (default 32)", int),
    "schedule": (("train", "schedule"), "constant or cosine (default cosine)", str),
    "lam": (("train", "rsd", "lam"), "weight of the distillation term (default 2.0)", float),
    "kappa": (("train", "rsd", "kappa"), "off-diagonal weight of the RSD loss (default 0.005)",
              float),
    "expansion": (("train", "rsd", "expansion_factor"),
                  "hidden width factor of the decoupler (default 4)", float),
    "temperature": (("train", "rsd", "temperature"), "softmax temperature for kd (default 4.0)",
                    float),
}
_FLAG_NAMES = {"lam": "--lambda", "no_aad": "--no-aad"}


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_CONFIG):
        super().__init__(msg)
        self.code = code


def _flag(dest: str) -> str:
    return _FLAG_NAMES.get(dest, "--" + dest.replace("_", "-"))


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


def _add_common(p: argparse.ArgumentParser, family_default: str) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="JSON config file (a summary.json also works)")
    p.add_argument("--override", action="store_true",
                   help="let explicit flags replace keys set by --config (default off)")
    p.add_argument("--data", default=S, help=f"dataset URI (default {DEFAULT_DATA})")
    p.add_argument("--seed", type=int, default=S,
                   help="seed for initialisation, batch order and extras (default 0)")
    p.add_argument("--out", default=S, help="run directory (required)")
    for dest, (_, text, typ) in _MODEL_FLAGS.items():
        if dest == "family":
            text += f" (default {family_default})"
        p.add_argument(_flag(dest), dest=dest, type=typ, default=S, help=text)
    for dest, (_, text, typ) in _TRAIN_FLAGS.items():
        p.add_argument(_flag(dest), dest=dest, type=typ, default=S, help=text)
    p.add_argument("--no-aad", dest="no_aad", action="store_true", default=S,
                   help="correlate raw student embeddings without the decoupler (default off)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rsdistill", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train-teacher", help="train a teacher with cross-entropy")
    _add_common(t, "cnn")

    d = sub.add_parser("distill", help="train a student against a frozen teacher")
    _add_common(d, "mixer")
    d.add_argument("--teacher", default=argparse.SUPPRESS, help="teacher checkpoint (required)")
    d.add_argument("--arm", default=argparse.SUPPRESS, help="ablation arm tag for reports")

    e = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True, help="model checkpoint")
    e.add_argument("--data", default=DEFAULT_DATA, help="dataset URI (default %(default)s)")
    e.add_argument("--split", choices=("train", "test"), default="test",
                   help="which split to score (default %(default)s)")

    s = sub.add_parser("sweep", help="grid over lambda, kappa, expansion and seeds")
    _add_common(s, "mixer")
    s.add_argument("--teacher", default=argparse.SUPPRESS, help="teacher checkpoint (required)")
    s.add_argument("--lambdas", default=None, help="comma list (default: --lambda)")
    s.add_argument("--kappas", default=None, help="comma list (default: --kappa)")
    s.add_argument("--expansions", default=None, help="comma list (default: --expansion)")
    s.add_argument("--seeds", default="0", help="comma list of seeds (default %(default)s)")

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--seeds", type=int, default=5, help="random cases per op (default 5)")
    g.add_argument("--ops", default=None, help="comma list of op names (default all)")
    g.add_argument("--tolerance", type=float, default=1e-4,
                   help="max relative error (default %(default)s)")

    sub.add_parser("version", help="print the build identifier")

    a = sub.add_parser("analysis", help="representation analysis")
    asub = a.add_subparsers(dest="analysis_command", required=True, parser_class=_Parser)
    c = asub.add_parser("cka", help="linear CKA grid between teacher and student taps")
    c.add_argument("--teacher", required=True, help="teacher checkpoint")
    c.add_argument("--student", required=True, help="student checkpoint")
    c.add_argument("--data", default=DEFAULT_DATA,
                   help="dataset URI; the test split is the probe set (default %(default)s)")
    c.add_argument("--out", required=True, help="grid.csv or grid.csv,grid.pgm")
    c.add_argument("--teacher-taps", default=None, help="comma list (default all)")
    c.add_argument("--student-taps", default=None, help="comma list (default all)")
    r = asub.add_parser("report", help="ablation tables from run directories")
    r.add_argument("--runs", required=True, help="directory searched for summary.json files")
    r.add_argument("--out", required=True, help="output table.csv")
    return p


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def _get(d: dict, path):
    for k in path:
        if not isinstance(d, dict) or k not in d:
            return None
        d = d[k]
    return d


def _has(d: dict, path) -> bool:
    for k in path:
        if not isinstance(d, dict) or k not in d:
            return False
        d = d[k]
    return True


def _set(d: dict, path, value) -> None:
    for k in path[:-1]:
        d = d.setdefault(k, {})
    d[path[-1]] = value


def _read_config(path: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read --config {path}: {exc}", EXIT_IO) from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"--config {path} is not valid JSON: {exc}") from exc
    if isinstance(doc, dict) and "resolved" in doc:
        doc = doc["resolved"]
    if not isinstance(doc, dict):
        raise CliError(f"--config {path} must hold a JSON object")
    unknown = set(doc) - {"data", "model", "train", "teacher", "arm", "out"}
    if unknown:
        raise CliError(f"unknown top-level config keys {sorted(unknown)} in {path}")
    return doc


def _explicit(ns: argparse.Namespace) -> list:
    """(dest, config path, value) for every flag given on the command line."""
    got = []
    for dest, (path, _, _) in {**_MODEL_FLAGS, **_TRAIN_FLAGS}.items():
        if hasattr(ns, dest):
            got.append((dest, path, getattr(ns, dest)))
    if hasattr(ns, "no_aad"):
        got.append(("no_aad", ("train", "rsd", "use_aad"), False))
    for dest in ("data", "teacher", "arm", "out"):
        if hasattr(ns, dest):
            got.append((dest, (dest,), getattr(ns, dest)))
    if hasattr(ns, "seed"):
        got.append(("seed", ("train", "seed"), ns.seed))
        got.append(("seed", ("model", "seed"), ns.seed))
    return got


def resolve(ns: argparse.Namespace, family_default: str, objective_default: str) -> dict:
    """Merge defaults, --config and flags into one validated configuration dict."""
    given = _read_config(ns.config) if hasattr(ns, "config") else {}
    from_file = copy.deepcopy(given)
    clashes = []
    for dest, path, value in _explicit(ns):
        if _has(from_file, path) and path != ("out",):
            if not ns.override:
                clashes.append(_flag(dest))
                continue
            log.info("%s overrides config value %r", _flag(dest), _get(from_file, path))
        _set(given, path, value)
    if clashes:
        raise CliError(f"flags {sorted(set(clashes))} also set in --config; "
                       "pass --override to let the flags win")

    if "out" not in given:
        raise CliError("missing required flag --out")
    data_uri = given.get("data", DEFAULT_DATA)
    model_in = dict(given.get("model", {}))
    family = model_in.get("family", family_default)
    train_in = dict(given.get("train", {}))
    rsd_in = dict(train_in.pop("rsd", {}))
    train_in.setdefault("objective", objective_default)
    try:
        cfg = default_config(family, **{k: v for k, v in train_in.items()})
        cfg = replace(cfg, rsd=replace(cfg.rsd, **rsd_in))
    except TypeError as exc:
        raise CliError(f"bad train config: {exc}") from exc
    resolved = {"data": data_uri, "model": {**model_in, "family": family},
                "train": cfg.to_dict(), "out": given["out"]}
    for k in ("teacher", "arm"):
        if k in given:
            resolved[k] = given[k]
    return resolved


def _load_data(uri: str) -> tuple[Dataset, Dataset]:
    try:
        return parse_data_uri(uri)
    except FormatError as exc:
        raise CliError(f"cannot read data {uri!r}: {exc}", EXIT_IO) from exc


def _model_spec(model_cfg: dict, data: Dataset) -> ModelSpec:
    fields = dict(model_cfg)
    fields.update(image_size=data.image_shape[1], in_channels=data.image_shape[0],
                  num_classes=data.num_classes)
    try:
        return ModelSpec(**fields)
    except TypeError as exc:
        raise CliError(f"bad model config: {exc}") from exc


def _teacher_header(path: str) -> dict:
    if not Path(path).is_file():
        raise CliError(f"teacher checkpoint not found: {path}")
    header, _ = load_checkpoint(path)
    if header.get("kind") != "model":
        raise CliError(f"{path} is not a model checkpoint")
    return header


def _run_id(resolved: dict) -> str:
    return _digest({k: v for k, v in resolved.items() if k != "out"})


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_train_teacher(ns) -> int:
    resolved = resolve(ns, "cnn", "ce")
    cfg = TrainConfig.from_dict(resolved["train"])
    if cfg.objective != "ce":
        raise CliError(f"train-teacher only supports --objective ce, got {cfg.objective!r}")
    data = _load_data(resolved["data"])
    spec = _model_spec(resolved["model"], data[0])
    rid = _run_id(resolved)
    _, rec = train_teacher(spec, data, cfg, resolved["out"],
                           summary_extra={"resolved": resolved, "run_id": rid})
    print(f"run {rid} best_test_acc {rec.final['best_test_acc']:.4f} "
          f"final_test_acc {rec.final['final_test_acc']:.4f}")
    return EXIT_OK


def _validate_distill(resolved: dict, data) -> tuple[ModelSpec, TrainConfig]:
    if "teacher" not in resolved:
        raise CliError("missing required flag --teacher")
    header = _teacher_header(resolved["teacher"])
    cfg = TrainConfig.from_dict(resolved["train"])
    spec = _model_spec(resolved["model"], data[0])
    t_spec = header["spec"]
    if t_spec["num_classes"] != spec.num_classes:
        raise CliError(f"teacher has {t_spec['num_classes']} classes, data {spec.num_classes}")
    if (t_spec["in_channels"], t_spec["image_size"]) != (spec.in_channels, spec.image_size):
        raise CliError("teacher input shape does not match the dataset")
    if cfg.objective == "rsd" and not cfg.rsd.use_aad and t_spec["embed_dim"] != spec.embed_dim:
        raise CliError(f"--no-aad needs equal embedding widths: teacher {t_spec['embed_dim']}, "
                       f"student {spec.embed_dim}")
    return spec, cfg


def _cmd_distill(ns) -> int:
    resolved = resolve(ns, "mixer", "rsd")
    data = _load_data(resolved["data"])
    spec, cfg = _validate_distill(resolved, data)
    teacher = load_model(resolved["teacher"])
    rid = _run_id(resolved)
    _, rec = distill(teacher, spec, data, cfg, resolved["out"], arm=resolved.get("arm"),
                     summary_extra={"resolved": resolved, "run_id": rid})
    print(f"run {rid} final_test_acc {rec.final['final_test_acc']:.4f} "
          f"param_overhead_count {rec.final['param_overhead_count']}")
    return EXIT_OK


def _floats(text, fallback) -> list:
    if text is None:
        return [fallback]
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise CliError(f"bad number list {text!r}") from exc


def _cmd_sweep(ns) -> int:
    resolved = resolve(ns, "mixer", "rsd")
    data = _load_data(resolved["data"])
    spec, base = _validate_distill(resolved, data)
    lams = _floats(ns.lambdas, base.rsd.lam)
    kappas = _floats(ns.kappas, base.rsd.kappa)
    exps = _floats(ns.expansions, base.rsd.expansion_factor)
    try:
        seeds = [int(v) for v in ns.seeds.split(",") if v.strip()]
    except ValueError as exc:
        raise CliError(f"bad --seeds {ns.seeds!r}") from exc
    if not (lams and kappas and exps and seeds):
        raise CliError("every sweep axis needs at least one value")
    for lam, kappa, e in ((a, b, c) for a in lams for b in kappas for c in exps):
        replace(base.rsd, lam=lam, kappa=kappa, expansion_factor=e)  # validates the grid
    resolved["grid"] = {"lams": lams, "kappas": kappas, "expansions": exps, "seeds": seeds}
    teacher = load_model(resolved["teacher"])
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "config.json", json.dumps(resolved, sort_keys=True, indent=2))
    result = sweep(teacher, spec, data, base, lams, kappas, exps, seeds, out)
    failed = sum(r.error is not None for r in result.records)
    summary = {"resolved": resolved, "run_id": _run_id(resolved), "table": result.table,
               "cells": [{"config_hash": r.config_hash, "error": r.error,
                          "final": r.final} for r in result.records]}
    _atomic_write(out / "summary.json", json.dumps(summary, sort_keys=True, indent=2))
    for row in result.table:
        med = "nan" if row["median"] is None else f"{row['median']:.4f}"
        print(f"lam {row['lam']:g} kappa {row['kappa']:g} exp {row['expansion_factor']:g} "
              f"n {row['n']} median {med}")
    if failed:
        print(f"{failed} cell(s) failed; see summary.json")
    return EXIT_OK


def _cmd_eval(ns) -> int:
    if not Path(ns.checkpoint).is_file():
        raise CliError(f"checkpoint not found: {ns.checkpoint}", EXIT_IO)
    train, test = _load_data(ns.data)
    model = load_model(ns.checkpoint)
    acc = evaluate(model, test if ns.split == "test" else train)
    print(f"{ns.split}_acc {acc:.6f}")
    return EXIT_OK


def _cmd_gradcheck(ns) -> int:
    subset = None
    if ns.ops:
        subset = [o.strip() for o in ns.ops.split(",") if o.strip()]
        unknown = sorted(set(subset) - set(SUITE))
        if unknown:
            raise CliError(f"unknown ops {unknown}; available: {sorted(SUITE)}")
    report = run_suite(range(ns.seeds), subset, ns.tolerance)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_NUMERICAL


def _taps(text):
    return None if text is None else [t.strip() for t in text.split(",") if t.strip()]


def _cmd_analysis(ns) -> int:
    if ns.analysis_command == "report":
        if not Path(ns.runs).is_dir():
            raise CliError(f"--runs {ns.runs} is not a directory", EXIT_IO)
        rows = analysis.ablation_report(analysis.load_records(ns.runs))
        Path(ns.out).write_text(analysis.report_csv(rows))
        for r in rows:
            med = "-" if r["median"] is None else f"{r['median']:.4f}"
            print(f"{r['table']:4s} {r['arm']:9s} n={r['n']} median {med}")
        return EXIT_OK
    outs = ns.out.split(",")
    if len(outs) > 2:
        raise CliError("--out takes grid.csv or grid.csv,grid.pgm")
    for p in (ns.teacher, ns.student):
        if not Path(p).is_file():
            raise CliError(f"checkpoint not found: {p}", EXIT_IO)
    _, probe = _load_data(ns.data)
    grid = analysis.cka_grid(load_model(ns.teacher), load_model(ns.student), probe,
                             (_taps(ns.teacher_taps), _taps(ns.student_taps)))
    grid.save(outs[0], outs[1] if len(outs) == 2 else None)
    print(grid.to_csv(), end="")
    return EXIT_OK


_COMMANDS = {"train-teacher": _cmd_train_teacher, "distill": _cmd_distill, "eval": _cmd_eval,
             "sweep": _cmd_sweep, "gradcheck": _cmd_gradcheck, "analysis": _cmd_analysis}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except CliError as exc:
        print(exc, file=sys.stderr)
        return exc.code
    logging.basicConfig(level=logging.INFO if getattr(ns, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if ns.command == "version":
        print(BUILD_ID)
        return EXIT_OK
    try:
        return _COMMANDS[ns.command](ns)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (RsdError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
