"""Ablation table over the kappa arms plus a CKA grid for one student.

Writes table.csv, grid.csv and grid.pgm to ./demo_out.
"""

from dataclasses import replace
from pathlib import Path

from rsdistill import RsdConfig, distill, train_teacher
from rsdistill.analysis import ablation_report, cka_grid, report_csv
from rsdistill.data import synth_gaussian_task
from rsdistill.models import ModelSpec
from rsdistill.trainer import default_config

out = Path("demo_out")
out.mkdir(exist_ok=True)
data = synth_gaussian_task(200, 3, 16, seed=7, noise=0.9)
teacher, _ = train_teacher(ModelSpec("cnn"), data, default_config("cnn", epochs=40))

base = default_config("mixer", epochs=20)
arms = [replace(base, objective="ce"),
        replace(base, objective="rsd", rsd=RsdConfig(kappa=0.0)),
        replace(base, objective="rsd", rsd=RsdConfig(kappa=5e-3)),
        replace(base, objective="rsd", rsd=RsdConfig(use_aad=False))]

records, last = [], None
for cfg in arms:
    for seed in (0, 1, 2):
        last, rec = distill(teacher, ModelSpec("mixer", seed=seed), data, replace(cfg, seed=seed))
        records.append(rec)

(out / "table.csv").write_text(report_csv(ablation_report(records)))
print((out / "table.csv").read_text())

# rows are teacher taps, columns student taps
grid = cka_grid(teacher, last, data[1])
grid.save(out / "grid.csv", out / "grid.pgm")
print(grid.to_csv())
