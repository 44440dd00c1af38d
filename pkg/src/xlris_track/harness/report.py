"""Run report and CSV emission. Floats are written with 17 significant digits so
they parse back to the identical double."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

MSE_COLUMNS = ("snr_db", "trajectory_kind", "input_source", "n_elements", "mse_m2", "n_samples")
LOSS_COLUMNS = ("stage", "epoch", "train_loss", "val_loss")
ABLATION_COLUMNS = ("model", "snr_db", "trajectory_kind", "input_source", "mse_m2", "n_samples")
CONVERGENCE_COLUMNS = ("trajectory_kind", "plateau_epoch", "epochs_run", "final_val_loss")


def fmt(x) -> str:
    """17 significant digits for floats, plain text otherwise; ``None`` is empty."""
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.17g}"
    return str(x)


@dataclass
class StageRecord:
    name: str
    status: str  # "ran", "skipped" (already complete) or "failed"
    seconds: float
    error: str = ""


@dataclass
class RunReport:
    config_hash: str
    seed: int
    run_dir: str
    stages: list = field(default_factory=list)
    loss_curve_paths: list = field(default_factory=list)
    mse_rows: list = field(default_factory=list)  # dicts keyed by MSE_COLUMNS
    notes: list = field(default_factory=list)

    def record(self, rec: StageRecord) -> None:
        if any(s.name == rec.name for s in self.stages):
            raise ValueError(f"stage {rec.name} recorded twice")
        self.stages.append(rec)

    @property
    def failed(self) -> bool:
        return any(s.status == "failed" for s in self.stages)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def write_rows(path, columns, rows) -> Path:
    """Write dict rows with a fixed column order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r[c]) for c in columns])
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_mse_csv(rows, path) -> Path:
    return write_rows(path, MSE_COLUMNS, rows)


def read_mse_csv(path):
    out = []
    for r in read_rows(path):
        out.append({"snr_db": float(r["snr_db"]), "trajectory_kind": r["trajectory_kind"],
                    "input_source": r["input_source"], "n_elements": int(r["n_elements"]),
                    "mse_m2": float(r["mse_m2"]), "n_samples": int(r["n_samples"])})
    return out


def write_loss_curves(curves, path) -> Path:
    """``curves`` maps a stage label to ``[(epoch, train_loss, val_loss_or_None), ...]``."""
    rows = [{"stage": stage, "epoch": int(e), "train_loss": float(tr),
             "val_loss": None if va is None else float(va)}
            for stage, curve in curves.items() for e, tr, va in curve]
    return write_rows(path, LOSS_COLUMNS, rows)


def read_loss_curves(path) -> dict:
    curves = {}
    for r in read_rows(path):
        va = float(r["val_loss"]) if r["val_loss"] else None
        curves.setdefault(r["stage"], []).append((int(r["epoch"]), float(r["train_loss"]), va))
    return curves
