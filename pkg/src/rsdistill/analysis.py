"""Linear CKA grids between layer taps and ablation tables over run records."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset
from .errors import ConfigError, FormatError
from .models import FrozenModel
from .tensor import Tensor
from .trainer import EVAL_CHUNK, RunRecord

log = logging.getLogger(__name__)

DEGENERATE_EPS = 1e-12


@dataclass(frozen=True)
class CkaResult:
    value: float
    degenerate: bool


def _center(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"CKA expects an N×D matrix, got shape {x.shape}")
    return x - x.mean(axis=0, keepdims=True)


def linear_cka_full(x, y) -> CkaResult:
    """Linear CKA with a flag for zero-variance inputs (reported as 0)."""
    xc, yc = _center(x), _center(y)
    if xc.shape[0] != yc.shape[0]:
        raise ValueError(f"CKA needs the same examples: N={xc.shape[0]} vs N={yc.shape[0]}")
    if xc.shape[0] < 2:
        raise ValueError("CKA needs at least 2 examples")
    # rescale first so the norms below neither overflow nor underflow
    sx, sy = np.abs(xc).max(), np.abs(yc).max()
    if sx <= DEGENERATE_EPS or sy <= DEGENERATE_EPS:
        return CkaResult(0.0, True)
    xc, yc = xc / sx, yc / sy
    denom = np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)
    if denom <= DEGENERATE_EPS:
        return CkaResult(0.0, True)
    return CkaResult(float(np.linalg.norm(yc.T @ xc) ** 2 / denom), False)


def linear_cka(x, y) -> float:
    return linear_cka_full(x, y).value


def gram_cka(x, y) -> float:
    """HSIC ratio on centred linear Gram matrices; O(N²) reference for ``linear_cka``."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    n = x.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    kx, ky = h @ (x @ x.T) @ h, h @ (y @ y.T) @ h
    hsic = lambda a, b: float(np.sum(a * b))
    return hsic(kx, ky) / np.sqrt(hsic(kx, kx) * hsic(ky, ky))


# ---------------------------------------------------------------------------
# activation dumps and grids
# ---------------------------------------------------------------------------

@dataclass
class ActivationDump:
    """Eval-mode activations per tap, flattened to N×D, over one probe set."""

    taps: dict
    n: int

    def __getitem__(self, name: str) -> np.ndarray:
        return self.taps[name]


def capture(model, probe: Dataset, taps: Optional[list] = None) -> ActivationDump:
    net = model.model if isinstance(model, FrozenModel) else model
    names = list(net.tap_names)
    wanted = names if taps is None else list(taps)
    unknown = [t for t in wanted if t not in names]
    if unknown:
        raise ConfigError(f"unknown tap(s) {unknown} for {net.spec.family}; "
                          f"available: {names}")
    was_training = net.training
    chunks: dict = {t: [] for t in wanted}
    for i in range(0, len(probe), EVAL_CHUNK):
        out = net.forward(Tensor(probe.images[i:i + EVAL_CHUNK]), "eval")
        for t in wanted:
            a = out.taps[t].data
            chunks[t].append(a.reshape(a.shape[0], -1))
    if was_training:
        net.train()
    return ActivationDump({t: np.concatenate(v) for t, v in chunks.items()}, len(probe))


@dataclass
class CkaGrid:
    rows: list
    cols: list
    values: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.rows), len(self.cols)):
            raise ValueError(f"grid values {self.values.shape} do not match "
                             f"{len(self.rows)}×{len(self.cols)} tap names")
        if self.degenerate is None:
            self.degenerate = np.zeros(self.values.shape, dtype=bool)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([""] + list(self.cols))
        for name, row in zip(self.rows, self.values):
            w.writerow([name] + ["%.17g" % v for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CkaGrid":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or len(rows[0]) < 2:
            raise FormatError("CKA grid CSV has no header", 0)
        cols = rows[0][1:]
        names, vals = [], []
        for r in rows[1:]:
            if len(r) != len(cols) + 1:
                raise FormatError(f"row {r[:1]} has {len(r) - 1} values, expected {len(cols)}", 0)
            names.append(r[0])
            vals.append([float(v) for v in r[1:]])
        return cls(names, cols, np.array(vals).reshape(len(names), len(cols)))

    def to_pgm(self, cell: int = 8) -> bytes:
        """Binary greyscale image, one ``cell``-pixel square per entry; brighter is higher."""
        px = np.clip(np.rint(np.clip(self.values, 0.0, 1.0) * 255), 0, 255).astype(np.uint8)
        img = np.kron(px, np.ones((cell, cell), dtype=np.uint8))
        h, w = img.shape
        return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()

    def save(self, csv_path, pgm_path=None) -> None:
        Path(csv_path).write_text(self.to_csv())
        if pgm_path is not None:
            Path(pgm_path).write_bytes(self.to_pgm())


def grid_from_dumps(a: ActivationDump, b: ActivationDump) -> CkaGrid:
    if a.n != b.n:
        raise ValueError(f"activation dumps cover different probe sets ({a.n} vs {b.n})")
    rows, cols = list(a.taps), list(b.taps)
    vals = np.zeros((len(rows), len(cols)))
    flags = np.zeros_like(vals, dtype=bool)
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            res = linear_cka_full(a[r], b[c])
            vals[i, j], flags[i, j] = res.value, res.degenerate
    if flags.any():
        log.warning("%d degenerate CKA cell(s) reported as 0", int(flags.sum()))
    return CkaGrid(rows, cols, vals, flags)


def cka_grid(teacher, student, probe: Dataset, taps=None) -> CkaGrid:
    """CKA over all (teacher tap, student tap) pairs.

    ``taps`` is either one list applied to both models or a
    ``(teacher_taps, student_taps)`` pair; ``None`` means every tap.
    """
    if taps is None or (taps and isinstance(taps[0], str)):
        t_taps = s_taps = taps
    else:
        t_taps, s_taps = taps
    return grid_from_dumps(capture(teacher, probe, t_taps), capture(student, probe, s_taps))


# ---------------------------------------------------------------------------
# ablation tables
# ---------------------------------------------------------------------------

RSD_ARMS = ("baseline", "corr", "decorr")
AAD_ARMS = ("rsd", "no_aad")


def classify(record: RunRecord) -> tuple[Optional[str], Optional[str]]:
    """(RSD-table arm, AAD-table arm) for a record; an explicit ``arm`` tag wins."""
    if record.arm in RSD_ARMS:
        return record.arm, None
    if record.arm in AAD_ARMS:
        return None, record.arm
    train = record.config.get("train", {})
    obj = train.get("objective")
    rsd = train.get("rsd", {})
    if obj == "ce" or (obj == "rsd" and rsd.get("lam") == 0):
        return "baseline", None
    if obj != "rsd":
        return None, None
    rsd_arm = "corr" if rsd.get("kappa") == 0 else "decorr"
    aad_arm = "rsd" if rsd.get("use_aad", True) else "no_aad"
    return rsd_arm, aad_arm


def _stats(table: str, arm: str, vals: list) -> dict:
    if not vals:
        return {"table": table, "arm": arm, "n": 0, "median": None, "min": None, "max": None}
    return {"table": table, "arm": arm, "n": len(vals), "median": float(np.median(vals)),
            "min": float(np.min(vals)), "max": float(np.max(vals))}


def ablation_report(records, metric: str = "final_test_acc", include_missing: bool = True
                    ) -> list:
    """Per-arm median/min/max rows for the RSD table then the AAD table.

    Arms with no successful runs appear with ``n=0`` and empty statistics
    so a partial sweep is visibly partial. Tables with no runs at all are
    omitted.
    """
    by: dict = {}
    for r in records:
        if r.error is not None:
            continue
        rsd_arm, aad_arm = classify(r)
        v = r.final[metric]
        if rsd_arm:
            by.setdefault(("rsd", rsd_arm), []).append(v)
        if aad_arm:
            by.setdefault(("aad", aad_arm), []).append(v)
    rows = []
    for table, arms in (("rsd", RSD_ARMS), ("aad", AAD_ARMS)):
        present = [a for a in arms if (table, a) in by]
        if not present:
            continue
        for a in arms:
            if (table, a) in by or include_missing:
                rows.append(_stats(table, a, by.get((table, a), [])))
    return rows


def report_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["table", "arm", "n", "median", "min", "max"])
    for r in rows:
        w.writerow([r["table"], r["arm"], r["n"]] +
                   ["" if r[k] is None else "%.17g" % r[k] for k in ("median", "min", "max")])
    return buf.getvalue()


def load_records(runs_dir) -> list:
    """Every summary.json under ``runs_dir`` as a RunRecord, in sorted path order."""
    out = []
    for p in sorted(Path(runs_dir).rglob("summary.json")):
        d = json.loads(p.read_text())
        if "config" not in d:
            continue
        rec = RunRecord.from_dict(d)
        if rec.arm is None:
            rec.arm = d.get("arm")
        out.append(rec)
    return out
