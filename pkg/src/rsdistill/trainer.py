"""Deterministic teacher training, student distillation, evaluation and sweeps."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import BatchPlan, Dataset, batch_indices
from .errors import ConfigError, NumericalError, RsdError
from .models import FrozenModel, Model, ModelSpec, build, freeze, save_model
from .nn import Linear
from .optim import SGD, Adam, lr_at
from .rsd import (AadModule, RsdConfig, ce_loss, feature_mse_loss,
                  full_objective, kd_kld_loss, rsd_on_logits, rsd_terms, pearson_matrix)
from .tensor import Tensor

log = logging.getLogger(__name__)

OBJECTIVES = ("ce", "kd", "feature_mse", "rsd", "rsd_logits")
EVAL_CHUNK = 256


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "ce"
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    schedule: str = "cosine"
    rsd: RsdConfig = field(default_factory=RsdConfig)

    def __post_init__(self):
        if isinstance(self.rsd, dict):
            object.__setattr__(self, "rsd", RsdConfig(**self.rsd))
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}; choose from {OBJECTIVES}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("weight_decay must be >= 0 and momentum in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "rsd" in d and isinstance(d["rsd"], dict):
            extra = set(d["rsd"]) - set(RsdConfig.__dataclass_fields__)
            if extra:
                raise ConfigError(f"unknown rsd config keys {sorted(extra)}")
            d["rsd"] = RsdConfig(**d["rsd"])
        return cls(**d)

    def hash(self) -> str:
        return _digest(self.to_dict())


def default_config(family: str, **overrides) -> TrainConfig:
    """Conventional per-family optimiser: SGD for CNNs, Adam for token models."""
    if family == "cnn":
        base = TrainConfig(optimizer="sgd", lr=0.05, momentum=0.9, weight_decay=5e-4)
    else:
        base = TrainConfig(optimizer="adam", lr=1e-3, weight_decay=0.0)
    return replace(base, **overrides)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    config: dict
    epochs: list
    final: dict
    wall_ms: list = field(default_factory=list)
    arm: Optional[str] = None
    student: Optional[dict] = None
    error: Optional[str] = None

    @property
    def config_hash(self) -> str:
        return _digest(self.config)

    @property
    def content_id(self) -> str:
        """Hash of everything except wall-clock timings."""
        return _digest({"config": self.config, "epochs": self.epochs, "final": self.final,
                        "student": self.student, "error": self.error})

    def to_dict(self) -> dict:
        return {"config": self.config, "config_hash": self.config_hash,
                "content_id": self.content_id, "epochs": self.epochs, "final": self.final,
                "wall_ms": self.wall_ms, "arm": self.arm, "student": self.student,
                "error": self.error}

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(d["config"], d["epochs"], d["final"], d.get("wall_ms", []), d.get("arm"),
                   d.get("student"), d.get("error"))


class RunWriter:
    """Owns one run directory: config.json, metrics.jsonl, summary.json, ckpt/."""

    def __init__(self, out_dir, config: dict):
        self.root = Path(out_dir)
        self.ckpt = self.root / "ckpt"
        self.ckpt.mkdir(parents=True, exist_ok=True)
        _atomic_write(self.root / "config.json", json.dumps(config, sort_keys=True, indent=2))
        self.metrics = open(self.root / "metrics.jsonl", "w")

    def epoch(self, row: dict) -> None:
        self.metrics.write(json.dumps(row, sort_keys=True) + "\n")
        self.metrics.flush()

    def finish(self, summary: dict) -> None:
        self.metrics.close()
        _atomic_write(self.root / "summary.json", json.dumps(summary, sort_keys=True, indent=2))

    def abort(self) -> None:
        self.metrics.close()


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict_logits(model, data: Dataset) -> np.ndarray:
    net = model.model if isinstance(model, FrozenModel) else model
    was_training = net.training
    out = [net.forward(Tensor(data.images[i:i + EVAL_CHUNK]), "eval").logits.data
           for i in range(0, len(data), EVAL_CHUNK)]
    if was_training:
        net.train()
    return np.concatenate(out)


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(model, data: Dataset) -> float:
    """Top-1 accuracy in eval mode."""
    return accuracy_from_logits(predict_logits(model, data), data.labels)


def embeddings(model, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """(logits, penultimate) for the whole split, eval mode."""
    net = model.model if isinstance(model, FrozenModel) else model
    was_training = net.training
    logits, emb = [], []
    for i in range(0, len(data), EVAL_CHUNK):
        o = net.forward(Tensor(data.images[i:i + EVAL_CHUNK]), "eval")
        logits.append(o.logits.data)
        emb.append(o.penultimate.data)
    if was_training:
        net.train()
    return np.concatenate(logits), np.concatenate(emb)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def _make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.momentum, cfg.weight_decay)
    return Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)


LossFn = Callable[[object, np.ndarray, np.ndarray], tuple[Tensor, dict]]


def _fit(model: Model, train: Dataset, test: Dataset, cfg: TrainConfig, loss_fn: LossFn,
         extra_params: list, overhead: int, writer: Optional[RunWriter],
         record_config: dict) -> tuple[RunRecord, dict]:
    plan = BatchPlan(cfg.batch_size, cfg.seed)
    if cfg.batch_size > len(train):
        raise ConfigError(f"batch size {cfg.batch_size} exceeds training set size {len(train)}")
    opt = _make_optimizer(model.parameters() + list(extra_params), cfg)
    epochs, wall = [], []
    best_acc, best_state = -1.0, model.state_dict()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(cfg.lr, epoch, cfg.epochs, cfg.schedule)
        model.train()
        sums: dict = {}
        correct = seen = 0
        for idx in batch_indices(len(train), plan, epoch):
            y = train.labels[idx]
            out = model.forward(Tensor(train.images[idx]), "train")
            loss, parts = loss_fn(out, idx, y)
            if not np.isfinite(loss.data).all():
                if writer is not None:
                    save_model(model, writer.ckpt / "last_good.ckpt")
                    writer.abort()
                raise NumericalError(f"non-finite loss at epoch {epoch}: {parts}")
            model.zero_grad()
            for p in extra_params:
                p.grad = None
            loss.backward()
            opt.step(lr)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            correct += int(np.sum(np.argmax(out.logits.data, axis=1) == y))
            seen += len(idx)
        test_acc = evaluate(model, test)
        row = {"epoch": epoch, "lr": lr, "loss": {k: v / seen for k, v in sums.items()},
               "train_acc": correct / seen, "test_acc": test_acc}
        epochs.append(row)
        wall.append(round((time.perf_counter() - t0) * 1000.0, 3))
        if writer is not None:
            writer.epoch(row)
        if test_acc > best_acc:
            best_acc, best_state = test_acc, model.state_dict()
    final = {"best_test_acc": best_acc, "final_test_acc": epochs[-1]["test_acc"],
             "final_train_acc": epochs[-1]["train_acc"], "param_overhead_count": overhead,
             "steps": cfg.epochs * (len(train) // cfg.batch_size)}
    return RunRecord(record_config, epochs, final, wall), best_state


def _ce_only(out, idx, y):
    ce = ce_loss(out.logits, y)
    v = ce.item()
    return ce, {"ce": v, "rsd_diag": 0.0, "rsd_offdiag": 0.0, "total": v}


def _summary(record: RunRecord, extra: dict) -> dict:
    d = record.to_dict()
    d.update(extra)
    return d


def train_teacher(spec: ModelSpec, data: tuple[Dataset, Dataset], cfg: TrainConfig,
                  out_dir=None, summary_extra: Optional[dict] = None
                  ) -> tuple[FrozenModel, RunRecord]:
    """Train with plain cross-entropy, keep the best-test-accuracy weights, freeze."""
    if cfg.objective != "ce":
        raise ConfigError(f"teachers train with objective 'ce', got {cfg.objective!r}")
    train, test = data
    _check_data(spec, train)
    model = build(spec)
    rec_cfg = {"train": cfg.to_dict(), "model": spec.to_dict(), "role": "teacher"}
    writer = RunWriter(out_dir, rec_cfg) if out_dir is not None else None
    record, best = _fit(model, train, test, cfg, _ce_only, [], 0, writer, rec_cfg)
    model.load_state_dict(best)
    if writer is not None:
        save_model(model, writer.ckpt / "best.ckpt")
        writer.finish(_summary(record, {"checkpoint": "ckpt/best.ckpt", **(summary_extra or {})}))
    return freeze(model), record


def _check_data(spec: ModelSpec, ds: Dataset) -> None:
    want = (spec.in_channels, spec.image_size, spec.image_size)
    if ds.image_shape != want:
        raise ConfigError(f"model expects images {want}, dataset has {ds.image_shape}")
    if ds.num_classes != spec.num_classes:
        raise ConfigError(f"model has {spec.num_classes} classes, dataset {ds.num_classes}")


def _teacher_cache(teacher: FrozenModel, train: Dataset) -> tuple[np.ndarray, np.ndarray]:
    return embeddings(teacher, train)


def build_distill_loss(teacher: FrozenModel, student_spec: ModelSpec, train: Dataset,
                       cfg: TrainConfig):
    """Loss closure, trainable extras (AAD / adaptor) and their parameter overhead."""
    rc = cfg.rsd
    d_t, d_s = teacher.spec.embed_dim, student_spec.embed_dim
    obj = cfg.objective
    if obj != "ce" and teacher.spec.num_classes != student_spec.num_classes:
        raise ConfigError("teacher and student must share the class count")
    t_logits, t_emb = _teacher_cache(teacher, train) if obj != "ce" else (None, None)
    extra_rng = np.random.default_rng([cfg.seed, 7])

    if obj == "ce":
        return _ce_only, None, 0

    if obj == "kd":
        def loss_fn(out, idx, y):
            ce = ce_loss(out.logits, y)
            kd = kd_kld_loss(out.logits, t_logits[idx], rc.temperature)
            total = ce + kd * rc.lam
            return total, {"ce": ce.item(), "kd": kd.item(), "rsd_diag": 0.0,
                           "rsd_offdiag": 0.0, "total": total.item()}
        return loss_fn, None, 0

    if obj == "feature_mse":
        psi = Linear(d_s, d_t, extra_rng)

        def loss_fn(out, idx, y):
            ce = ce_loss(out.logits, y)
            fm = feature_mse_loss(out.penultimate, t_emb[idx], psi)
            total = ce + fm * rc.lam
            return total, {"ce": ce.item(), "feature_mse": fm.item(), "rsd_diag": 0.0,
                           "rsd_offdiag": 0.0, "total": total.item()}
        return loss_fn, psi, psi.num_parameters()

    if obj == "rsd_logits":
        def loss_fn(out, idx, y):
            ce = ce_loss(out.logits, y)
            t = Tensor(t_logits[idx])
            r = rsd_on_logits(t, out.logits, rc.kappa)
            total = ce + r * rc.lam
            diag, off = rsd_terms(pearson_matrix(t, out.logits.detach()), rc.kappa)
            return total, {"ce": ce.item(), "rsd_diag": diag, "rsd_offdiag": off,
                           "total": total.item()}
        return loss_fn, None, 0

    # rsd over penultimate embeddings
    if rc.apply_to == "logits":
        raise ConfigError("apply_to='logits' is the rsd_logits objective")
    if not rc.use_aad and d_s != d_t:
        raise ConfigError(f"RSD without AAD needs equal embedding widths, got D_s={d_s}, "
                          f"D_t={d_t}")
    aad = AadModule(d_s, d_t, rc.expansion_factor, rng=extra_rng) if rc.use_aad else None

    def loss_fn(out, idx, y):
        total, br = full_objective(out.logits, y, Tensor(t_emb[idx]), out.penultimate, aad,
                                   rc, training=True)
        return total, br.to_dict()
    return loss_fn, aad, aad.param_count() if aad is not None else 0


def distill(teacher, student_spec: ModelSpec, data: tuple[Dataset, Dataset], cfg: TrainConfig,
            out_dir=None, arm: Optional[str] = None, summary_extra: Optional[dict] = None
            ) -> tuple[Model, RunRecord]:
    """Train a student on CE plus the configured distillation term.

    The teacher runs in eval mode and is never updated. Trainable extras
    (AAD, feature adaptor) share the student's optimiser and are dropped
    from the saved checkpoint.
    """
    teacher = freeze(teacher)
    train, test = data
    _check_data(student_spec, train)
    before = teacher.checksum()
    loss_fn, extras, overhead = build_distill_loss(teacher, student_spec, train, cfg)
    student = build(student_spec)
    extra_params = extras.parameters() if extras is not None else []
    rec_cfg = {"train": cfg.to_dict(), "model": student_spec.to_dict(), "role": "student",
               "teacher": teacher.spec.to_dict()}
    writer = RunWriter(out_dir, rec_cfg) if out_dir is not None else None
    record, _ = _fit(student, train, test, cfg, loss_fn, extra_params, overhead, writer, rec_cfg)
    record.arm = arm
    if teacher.checksum() != before:
        raise RuntimeError("teacher parameters changed during distillation")
    if writer is not None:
        save_model(student, writer.ckpt / "student.ckpt")
        writer.finish(_summary(record, {"checkpoint": "ckpt/student.ckpt",
                                        **(summary_extra or {})}))
    return student, record


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    records: list
    table: list


def aggregate(records: list, keys=("lam", "kappa", "expansion_factor"),
              metric: str = "final_test_acc") -> list:
    """Median/min/max of ``metric`` per hyper-parameter cell (failed runs skipped)."""
    cells: dict = {}
    for r in records:
        rsd = r.config["train"]["rsd"]
        key = tuple(rsd[k] for k in keys)
        cells.setdefault(key, [])
        if r.error is None:
            cells[key].append(r.final[metric])
    rows = []
    for key, vals in cells.items():
        row = dict(zip(keys, key))
        row.update(n=len(vals),
                   median=float(np.median(vals)) if vals else None,
                   min=float(np.min(vals)) if vals else None,
                   max=float(np.max(vals)) if vals else None)
        rows.append(row)
    return rows


def sweep(teacher, student_spec: ModelSpec, data, base: TrainConfig, lams=None, kappas=None,
          expansions=None, seeds=(0,), out_dir=None) -> SweepResult:
    """Run every (lambda, kappa, expansion, seed) cell; failures are recorded, not raised.

    Each cell reseeds the student initialisation, batch order and AAD with
    its own seed.
    """
    lams = list(lams) if lams is not None else [base.rsd.lam]
    kappas = list(kappas) if kappas is not None else [base.rsd.kappa]
    expansions = list(expansions) if expansions is not None else [base.rsd.expansion_factor]
    records = []
    for lam, kappa, exp, seed in itertools.product(lams, kappas, expansions, seeds):
        rsd = replace(base.rsd, lam=lam, kappa=kappa, expansion_factor=exp)
        cfg = replace(base, rsd=rsd, seed=seed)
        spec = replace(student_spec, seed=seed)
        cell_dir = None
        if out_dir is not None:
            cell_dir = Path(out_dir) / f"lam{lam:g}_kappa{kappa:g}_exp{exp:g}_seed{seed}"
        try:
            _, rec = distill(teacher, spec, data, cfg, cell_dir)
        except RsdError as exc:
            log.warning("sweep cell lam=%g kappa=%g exp=%g seed=%d failed: %s",
                        lam, kappa, exp, seed, exc)
            rec = RunRecord({"train": cfg.to_dict(), "model": spec.to_dict(),
                             "role": "student"}, [], {}, error=str(exc))
        records.append(rec)
    return SweepResult(records, aggregate(records))
