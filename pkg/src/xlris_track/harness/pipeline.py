"""Staged pipeline: generate -> train-recon -> extract-features -> train-tracker -> evaluate.

Artifacts live under ``<out>/<config hash>/``; each stage owns one
subdirectory and marks it complete with a ``DONE`` file. Every random stream
is derived as ``child_seed(master, label, index)``.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import channel_sim as cs
from .. import features as ft
from .. import reconstruction as rc
from .. import tracker as tk
from .. import trajectory as tj
from ..seeding import child_rng, child_seed
from . import report as rp
from .config import STAGES, ExperimentConfig

log = logging.getLogger(__name__)

STAGE_DIRS = {
    "generate": "data",
    "train-recon": "recon",
    "extract-features": "features",
    "train-tracker": "tracker",
    "evaluate": "results",
}
ABLATIONS = {
    "ae_stacked_bilstm": {},
    "ae_stacked_lstm": {"bidirectional": False},
    "ae_lstm": {"bidirectional": False, "layers": 1},
}


class StageFailure(RuntimeError):
    def __init__(self, stage: str, report: rp.RunReport, cause: BaseException):
        self.stage, self.report = stage, report
        super().__init__(f"stage {stage} failed: {cause}")


class RunLockedError(RuntimeError):
    """Another live process owns the run directory."""


# ---- config -> domain objects ----

def make_geometry(cfg: ExperimentConfig) -> cs.ScenarioGeometry:
    g = cfg.geometry
    return cs.build_geometry(g.n1, g.n2, g.m1, g.m2, spacing=g.spacing,
                             ris_center=tuple(g.ris_center), bs_center=tuple(g.bs_center),
                             wavelength=g.wavelength)


def make_bounds(cfg: ExperimentConfig) -> tj.WorkspaceBounds:
    return tj.WorkspaceBounds(*cfg.trajectory.bounds)


def make_scenario(cfg: ExperimentConfig, geom=None) -> tj.Scenario:
    s, g = cfg.scenario, cfg.geometry
    return tj.build_scenario(geom or make_geometry(cfg), make_bounds(cfg),
                             child_seed(cfg.seed, "scenario"), n_scatterers=s.n_scatterers,
                             power_ratio=s.power_ratio, omega_mode=s.omega_mode,
                             beta=complex(*g.beta), tx_power_dbm=s.tx_power_dbm,
                             ris_noise=s.ris_noise)


def kind_params(cfg: ExperimentConfig) -> tj.KindParams:
    t = cfg.trajectory
    return tj.KindParams(t.amplitude, t.wave_length, t.wave_span, t.spiral_a, t.spiral_b,
                         t.spiral_dtheta)


def recon_config(cfg: ExperimentConfig) -> rc.ReconConfig:
    g, r = cfg.geometry, cfg.recon
    return rc.ReconConfig(g.m1, g.m2, g.n1, g.n2, tuple(r.upsample_target), r.upsample_mode,
                          r.n_dense_modules, r.blocks_per_module, r.growth_channels,
                          r.initial_channels, r.compression)


def music_config(cfg: ExperimentConfig) -> ft.MusicConfig:
    f = cfg.features
    return ft.MusicConfig(f.k_rows, f.k_cols, f.snapshots, f.resolution_deg,
                          tuple(f.theta_range_deg), tuple(f.phi_range_deg), 1, f.preprocess,
                          f.pilot_mode)


def cnn_config(cfg: ExperimentConfig, source: str) -> ft.CNNConfig:
    g, f = cfg.geometry, cfg.features
    rows, cols = (g.m1, g.m2) if source == "bs" else (g.n1, g.n2)
    return ft.CNNConfig(rows, cols, f.n_f, tuple(f.filters), f.kernel, f.pool)


def tracker_config(cfg: ExperimentConfig, n_features: int, **overrides) -> tk.TrackerConfig:
    t = cfg.tracker
    base = tk.TrackerConfig(n_features, t.window, t.layers, t.hidden, t.decoder_hidden, t.dropout)
    return replace(base, **overrides)


def tracker_hyper(cfg: ExperimentConfig) -> tk.TrackerHyper:
    t = cfg.tracker
    return tk.TrackerHyper(t.epochs, t.batch_size, t.lr, t.patience)


# ---- shared helpers ----

def trajectory_splits(ds: tj.Dataset, cfg: ExperimentConfig) -> dict:
    """``fit`` / ``val`` / ``test`` trajectory indices; val is carved from train."""
    train = ds.indices("train")
    n_val = min(max(int(round(len(train) * cfg.tracker.val_fraction)), 1), len(train) - 1)
    perm = child_rng(cfg.seed, f"val/{ds.kind}").permutation(train)
    return {"fit": np.sort(perm[n_val:]), "val": np.sort(perm[:n_val]), "test": ds.indices("test")}


def source_signals(ds: tj.Dataset, source: str, snr: float, recon_model=None) -> np.ndarray:
    if source == "bs":
        return ds.y[snr]
    if source == "true_ris":
        return ds.y_r[snr]
    return rc.recon_forward(ds.y[snr], recon_model)


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, out_root, force: bool = False):
        self.cfg = cfg
        self.out_root = Path(out_root)
        self.run_dir = self.out_root / cfg.config_hash()
        self.force = force
        self._datasets = None

    # -- bookkeeping --

    def stage_dir(self, stage: str) -> Path:
        return self.run_dir / STAGE_DIRS[stage]

    def is_done(self, stage: str) -> bool:
        return (self.stage_dir(stage) / "DONE").exists()

    def _lock(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        path = self.run_dir / "run.lock"
        for _ in range(2):
            try:
                fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                try:
                    pid = int(path.read_text().strip() or 0)
                except (OSError, ValueError):
                    pid = 0
                if pid and _alive(pid) and pid != os.getpid():
                    raise RunLockedError(f"{self.run_dir} is locked by process {pid}")
                path.unlink(missing_ok=True)  # stale lock from a dead process
                continue
            with os.fdopen(fd, "w") as fh:
                fh.write(str(os.getpid()))
            return path
        raise RunLockedError(f"could not acquire {path}")

    def run(self, stages, force_stages=()) -> rp.RunReport:
        """Run ``stages`` in dependency order; stages already complete are skipped
        unless listed in ``force_stages`` (or ``force`` was set)."""
        report = rp.RunReport(self.cfg.config_hash(), self.cfg.seed, str(self.run_dir))
        stages = [s for s in STAGES if s in set(stages)]
        if not stages:
            return report
        lock = self._lock()
        try:
            (self.run_dir / "config.json").write_text(
                json.dumps(self.cfg.to_dict(), indent=1, sort_keys=True))
            for stage in stages:
                forced = self.force or stage in force_stages
                t0 = time.perf_counter()
                if self.is_done(stage) and not forced:
                    report.record(rp.StageRecord(stage, "skipped", 0.0))
                    log.info("%s: already complete", stage)
                    continue
                d = self.stage_dir(stage)
                if d.exists():
                    shutil.rmtree(d)
                d.mkdir(parents=True)
                log.info("%s: running", stage)
                try:
                    getattr(self, "_" + stage.replace("-", "_"))(d, report)
                except Exception as exc:  # recorded, then surfaced as a stage failure
                    report.record(rp.StageRecord(stage, "failed", time.perf_counter() - t0,
                                                 f"{type(exc).__name__}: {exc}"))
                    self._write_report(report)
                    raise StageFailure(stage, report, exc) from exc
                (d / "DONE").write_text(self.cfg.config_hash())
                report.record(rp.StageRecord(stage, "ran", time.perf_counter() - t0))
                log.info("%s: done in %.1f s", stage, report.stages[-1].seconds)
            self._collect(report)
            self._write_report(report)
        finally:
            lock.unlink(missing_ok=True)
        return report

    def _write_report(self, report: rp.RunReport) -> None:
        (self.run_dir / "report.json").write_text(report.to_json())

    def _collect(self, report: rp.RunReport) -> None:
        for stage, name in (("train-recon", "loss_curves.csv"),
                            ("extract-features", "loss_curves.csv"),
                            ("train-tracker", "loss_curves.csv"),
                            ("evaluate", "loss_curves.csv")):
            p = self.stage_dir(stage) / name
            if p.exists() and str(p) not in report.loss_curve_paths:
                report.loss_curve_paths.append(str(p))
        mse = self.stage_dir("evaluate") / "mse_vs_snr.csv"
        if mse.exists():
            report.mse_rows = rp.read_mse_csv(mse)
        notes = self.stage_dir("evaluate") / "notes.json"
        if notes.exists():
            report.notes = json.loads(notes.read_text())

    def datasets(self) -> dict:
        if self._datasets is None:
            d = self.stage_dir("generate")
            if not self.is_done("generate"):
                raise FileNotFoundError(f"no completed dataset under {d}; run generate first")
            self._datasets = {k: tj.load_dataset(d / k) for k in self.cfg.trajectory.kinds}
        return self._datasets

    # -- stages --

    def _generate(self, d: Path, report) -> None:
        cfg = self.cfg
        geom = make_geometry(cfg)
        scenario = make_scenario(cfg, geom)
        self._datasets = None
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", cs.NearFieldWarning)
            for kind in cfg.trajectory.kinds:
                ds = tj.generate_dataset(kind, cfg.trajectory.count, cfg.trajectory.steps,
                                         cfg.snr_db, scenario, make_bounds(cfg),
                                         child_seed(cfg.seed, "generate"), kind_params(cfg),
                                         cfg.trajectory.test_fraction)
                tj.save_dataset(ds, d / kind)
        near = [str(w.message) for w in caught if issubclass(w.category, cs.NearFieldWarning)]
        (d / "scenario.json").write_text(json.dumps({
            "reference_power": scenario.reference_power,
            "ris_reference_power": scenario.ris_reference_power,
            "near_field_warnings": near,
        }, indent=1))

    def _pairs(self, split: str):
        ys, yrs = [], []
        for kind, ds in self.datasets().items():
            idx = trajectory_splits(ds, self.cfg)[split]
            for snr in ds.snr_grid:
                ys.append(ds.y[snr][idx].reshape(-1, ds.y[snr].shape[-1]))
                yrs.append(ds.y_r[snr][idx].reshape(-1, ds.y_r[snr].shape[-1]))
        return np.concatenate(ys), np.concatenate(yrs)

    def _train_recon(self, d: Path, report) -> None:
        cfg, r = self.cfg, self.cfg.recon
        if "recon_ris" not in cfg.tracker.sources:
            (d / "skipped.txt").write_text("recon_ris not among tracker sources\n")
            return
        train, val = self._pairs("fit"), self._pairs("val")
        cap = 2000
        if len(val[0]) > cap:
            keep = np.sort(child_rng(cfg.seed, "recon/val").choice(len(val[0]), cap, replace=False))
            val = (val[0][keep], val[1][keep])
        hyper = rc.ReconHyper(r.epochs, r.batch_size, r.lr, r.patience, r.max_train)
        model, curve = rc.train_recon(train, val, recon_config(cfg), hyper,
                                      child_seed(cfg.seed, "recon"))
        rc.save_recon(model, d / "model")
        rp.write_loss_curves({"recon": curve}, d / "loss_curves.csv")
        metrics = {}
        for snr in cfg.snr_db:
            num = den = 0.0
            for ds in self.datasets().values():
                idx = trajectory_splits(ds, cfg)["test"]
                est = rc.recon_forward(ds.y[snr][idx], model)
                num += float(np.sum(np.abs(est - ds.y_r[snr][idx]) ** 2))
                den += float(np.sum(np.abs(ds.y_r[snr][idx]) ** 2))
            metrics[str(snr)] = num / den
        (d / "metrics.json").write_text(json.dumps({"test_nmse_by_snr": metrics}, indent=1))

    def _extract_features(self, d: Path, report) -> None:
        cfg = self.cfg
        geom = make_geometry(cfg)
        recon_model = None
        if "recon_ris" in cfg.tracker.sources:
            recon_model = rc.load_recon(self.stage_dir("train-recon") / "model")
        mcfg = music_config(cfg)
        subs = ft.partition_subarrays(geom, mcfg.k_rows, mcfg.k_cols)
        steer = ft.steering_for(subs[0], mcfg)
        f = cfg.features
        curves, degenerate = {}, {}
        for source in cfg.tracker.sources:
            signals = {(k, s): source_signals(ds, source, s, recon_model)
                       for k, ds in self.datasets().items() for s in ds.snr_grid}
            fit_x, fit_p = [], []
            for (kind, snr), sig in signals.items():
                ds = self.datasets()[kind]
                idx = trajectory_splits(ds, cfg)["fit"]
                fit_x.append(sig[idx].reshape(-1, sig.shape[-1]))
                fit_p.append(ds.positions[idx].reshape(-1, 3))
            hyper = ft.CNNHyper(f.cnn_epochs, f.cnn_batch_size, f.cnn_lr, f.cnn_max_train)
            cnn, curve = ft.pretrain_cnn(np.concatenate(fit_x), np.concatenate(fit_p),
                                         cnn_config(cfg, source), hyper,
                                         child_seed(cfg.seed, f"cnn/{source}"))
            curves[f"cnn/{source}"] = [(e, tr, None) for e, tr in curve]
            ft.save_cnn(cnn, d / source / "cnn")
            use_aoa = source != "bs"
            layout = ft.FeatureLayout(f.n_f, 4, 2 * len(subs) if use_aoa else 0)
            ris_power = None
            for kind, ds in self.datasets().items():
                values = {}
                ris_power = ds.meta["ris_reference_power"]
                for snr in ds.snr_grid:
                    sig = signals[(kind, snr)]
                    cnn_f = ft.extract_cnn(sig, cnn)
                    tf_f, deg = ft.tf_features(sig)
                    degenerate[f"{source}/{kind}/{snr}"] = int(np.sum(deg))
                    if use_aoa:
                        var = cs.noise_variance_for_snr(ris_power, snr)
                        rng = child_rng(cfg.seed, f"music/{source}/{kind}/{snr}")
                        aoa = ft.aoa_features(sig.reshape(-1, sig.shape[-1]), subs, mcfg, var,
                                              rng, steer=steer)
                        aoa = aoa.reshape(sig.shape[:-1] + (layout.n_aoa,))
                    else:
                        aoa = np.zeros(sig.shape[:-1] + (0,))
                    values[snr] = ft.final_features(cnn_f, tf_f, aoa, layout)
                    log.info("features %s/%s/%g dB done", source, kind, snr)
                ft.save_features(ft.FeatureSet(source, kind, layout, values,
                                               {"master_seed": cfg.seed}), d / source / kind)
        rp.write_loss_curves(curves, d / "loss_curves.csv")
        (d / "degenerate_spectra.json").write_text(json.dumps(degenerate, indent=1))

    def sequences(self, source: str, split: str, kinds=None) -> tk.SequenceSet:
        cfg = self.cfg
        sets = []
        for kind, ds in self.datasets().items():
            if kinds is not None and kind not in kinds:
                continue
            fs = ft.load_features(self.stage_dir("extract-features") / source / kind)
            idx = trajectory_splits(ds, cfg)[split]
            for snr in ds.snr_grid:
                sets.append(tk.build_sequences(fs.values[snr][idx], ds.positions[idx],
                                               cfg.tracker.window, traj_ids=idx, snr_db=snr,
                                               kind=kind, source=source))
        return tk.SequenceSet.concat(sets)

    def tracker_jobs(self):
        """``(label, source, kinds, overrides)`` for every tracker this config trains."""
        t = self.cfg.tracker
        jobs = [(f"tracker/{s}", s, None, {}) for s in t.sources]
        if t.ablations:
            jobs += [(f"ablation/{name}", t.ablation_source, None, ov)
                     for name, ov in ABLATIONS.items() if ov]
        if t.convergence:
            jobs += [(f"convergence/{k}", t.convergence_source, [k], {})
                     for k in self.cfg.trajectory.kinds]
        return jobs

    def _train_tracker(self, d: Path, report) -> None:
        curves = {}
        for label, source, kinds, overrides in self.tracker_jobs():
            train = self.sequences(source, "fit", kinds)
            val = self.sequences(source, "val", kinds)
            tcfg = tracker_config(self.cfg, train.features.shape[-1], **overrides)
            model, curve = tk.train_tracker(train, val, tcfg, tracker_hyper(self.cfg),
                                            child_seed(self.cfg.seed, label))
            tk.save_tracker(model, d / label)
            curves[label] = curve
            log.info("%s: best val %.4g m^2", label, min(v for _, _, v in curve))
        rp.write_loss_curves(curves, d / "loss_curves.csv")

    def _evaluate(self, d: Path, report) -> None:
        cfg = self.cfg
        tdir = self.stage_dir("train-tracker")
        n_elements = cfg.geometry.n1 * cfg.geometry.n2
        rows, notes, models = [], [], {}
        for source in cfg.tracker.sources:
            model = tk.load_tracker(tdir / "tracker" / source)
            models[source] = model
            grouped, extra = tk.evaluate(model, self.sequences(source, "test"))
            notes += extra
            rows += [{"snr_db": g.snr_db, "trajectory_kind": g.trajectory_kind,
                      "input_source": g.input_source, "n_elements": n_elements,
                      "mse_m2": g.mse_m2, "n_samples": g.n_samples} for g in grouped]
        rp.write_mse_csv(rows, d / "mse_vs_snr.csv")

        if cfg.tracker.ablations:
            src = cfg.tracker.ablation_source
            test = self.sequences(src, "test")
            abl = []
            for name, ov in ABLATIONS.items():
                model = models[src] if not ov else tk.load_tracker(tdir / "ablation" / name)
                grouped, _ = tk.evaluate(model, test)
                abl += [{"model": name, **{k: getattr(g, k) for k in
                                           ("snr_db", "trajectory_kind", "input_source",
                                            "mse_m2", "n_samples")}} for g in grouped]
                pooled = tk.sample_mse(model, test)
                for snr in cfg.snr_db:
                    sel = test.subset(np.flatnonzero(test.snr_db == snr))
                    abl.append({"model": name, "snr_db": snr, "trajectory_kind": "all",
                                "input_source": src, "mse_m2": tk.sample_mse(model, sel),
                                "n_samples": len(sel)})
                log.info("ablation %s pooled test MSE %.4g", name, pooled)
            rp.write_rows(d / "ablation.csv", rp.ABLATION_COLUMNS, abl)

        curves = {}
        for stage in ("train-recon", "extract-features", "train-tracker"):
            p = self.stage_dir(stage) / "loss_curves.csv"
            if p.exists():
                curves.update(rp.read_loss_curves(p))
        rp.write_loss_curves(curves, d / "loss_curves.csv")

        if cfg.tracker.convergence:
            conv = []
            for kind in cfg.trajectory.kinds:
                curve = curves[f"convergence/{kind}"]
                conv.append({"trajectory_kind": kind, "plateau_epoch": tk.plateau_epoch(curve),
                             "epochs_run": curve[-1][0], "final_val_loss": curve[-1][2]})
            rp.write_rows(d / "convergence.csv", rp.CONVERGENCE_COLUMNS, conv)
        (d / "notes.json").write_text(json.dumps(notes))


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def run_pipeline(cfg: ExperimentConfig, out_root, stages=None, force: bool = False):
    """Run ``stages`` (default: the config's own list) and return the RunReport."""
    return Pipeline(cfg, out_root, force).run(cfg.stages if stages is None else stages)
