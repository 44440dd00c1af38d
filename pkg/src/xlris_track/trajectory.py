"""User movement patterns and paired BS/RIS signal datasets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import channel_sim as cs
from .seeding import child_rng, child_seed

KINDS = ("random_walk", "wave", "spiral")


class TrajectoryBoundsError(ValueError):
    """A generated path leaves the workspace."""


@dataclass(frozen=True)
class WorkspaceBounds:
    x_max: float = 10.0
    y_max: float = 10.0
    z_max: float = 3.0

    def __post_init__(self):
        if min(self.x_max, self.y_max, self.z_max) <= 0:
            raise ValueError(f"workspace extents must be positive: {self}")

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.x_max, self.y_max, self.z_max])

    def contains(self, pts, tol: float = 1e-12) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return np.all((pts >= -tol) & (pts <= self.upper + tol), axis=-1)


@dataclass
class Trajectory:
    kind: str
    points: np.ndarray  # (steps, 3)
    seed: int | None = None

    def __len__(self):
        return len(self.points)


def _check_start(start, steps, bounds):
    if steps < 2:
        raise ValueError(f"a trajectory needs at least 2 points, got {steps}")
    if not bounds.contains(start):
        raise TrajectoryBoundsError(f"start {start} outside workspace {bounds}")


def _finish(kind, pts, bounds, seed=None):
    if not np.all(bounds.contains(pts)):
        raise TrajectoryBoundsError(f"{kind} path leaves the workspace")
    return Trajectory(kind, pts, seed)


def random_walk(start, steps: int, bounds: WorkspaceBounds, rng, max_attempts: int = 100):
    """Unit random direction times a step length drawn from (0, 1].

    Directions that would leave the box are re-drawn; after ``max_attempts``
    failures the step is reflected back off the walls instead.
    """
    start = np.asarray(start, dtype=float)
    _check_start(start, steps, bounds)
    rng = np.random.default_rng(rng)
    hi = bounds.upper
    pts = [start]
    for _ in range(steps - 1):
        length = 1.0 - rng.uniform()  # (0, 1]
        for _ in range(max_attempts):
            u = rng.normal(size=3)
            u /= np.linalg.norm(u)
            nxt = pts[-1] + length * u
            if bounds.contains(nxt):
                break
        else:
            nxt = np.mod(nxt, 2 * hi)  # fold back off the walls as often as needed
            nxt = np.where(nxt > hi, 2 * hi - nxt, nxt)
        pts.append(nxt)
    return _finish("random_walk", np.array(pts), bounds)


def wave(start, steps: int, amplitude: float, wavelength_w: float, bounds: WorkspaceBounds,
         max_span: float = 6.0):
    if amplitude < 0 or wavelength_w <= 0:
        raise ValueError(f"need amplitude >= 0 and wavelength > 0, got {amplitude}, {wavelength_w}")
    start = np.asarray(start, dtype=float)
    _check_start(start, steps, bounds)
    span = min(max_span, bounds.x_max - start[0])
    dx = np.linspace(0.0, span, steps)
    pts = np.empty((steps, 3))
    pts[:, 0] = start[0] + dx
    pts[:, 1] = start[1] + amplitude * np.sin(2 * np.pi * dx / wavelength_w)
    pts[:, 2] = start[2]
    return _finish("wave", pts, bounds)


def spiral(start, steps: int, a: float, b: float, dtheta: float, bounds: WorkspaceBounds):
    """Archimedean spiral ``r = a + b*theta`` in the horizontal plane of ``start``."""
    if a < 0 or dtheta <= 0:
        raise ValueError(f"need a >= 0 and dtheta > 0, got {a}, {dtheta}")
    start = np.asarray(start, dtype=float)
    _check_start(start, steps, bounds)
    theta = np.arange(steps) * dtheta
    r = a + b * theta
    pts = np.empty((steps, 3))
    pts[:, 0] = start[0] + r * np.cos(theta)
    pts[:, 1] = start[1] + r * np.sin(theta)
    pts[:, 2] = start[2]
    return _finish("spiral", pts, bounds)


@dataclass
class KindParams:
    amplitude: float = 2.0
    wave_length: float = 5.0
    wave_span: float = 6.0
    spiral_a: float = 0.1
    spiral_b: float = 3.0
    spiral_dtheta: float = np.pi / 20


def draw_trajectory(kind: str, steps: int, bounds: WorkspaceBounds, rng,
                    params: KindParams | None = None, max_redraws: int = 10_000) -> Trajectory:
    """Draw a random start inside the box and build a path, re-drawing the
    start until the whole path fits."""
    if kind not in KINDS:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    params = params or KindParams()
    rng = np.random.default_rng(rng)
    for _ in range(max_redraws):
        start = rng.uniform(0.0, 1.0, 3) * bounds.upper
        try:
            if kind == "random_walk":
                return random_walk(start, steps, bounds, rng)
            if kind == "wave":
                return wave(start, steps, params.amplitude, params.wave_length, bounds,
                            max_span=params.wave_span)
            return spiral(start, steps, params.spiral_a, params.spiral_b,
                          params.spiral_dtheta, bounds)
        except TrajectoryBoundsError:
            continue
    raise TrajectoryBoundsError(f"could not fit a {kind} path after {max_redraws} starts")


@dataclass
class Scenario:
    """Static propagation environment shared by every record of a dataset."""

    geom: cs.ScenarioGeometry
    scatterers: cs.ScattererSet
    omega: np.ndarray
    H: np.ndarray
    pilot: complex
    reference_power: float  # mean per-antenna noiseless BS power over the workspace
    ris_reference_power: float  # same, per RIS element
    ris_noise: bool = False

    def noise_variance(self, snr_db: float) -> float:
        return cs.noise_variance_for_snr(self.reference_power, snr_db)

    def ris_noise_variance(self, snr_db: float) -> float:
        return cs.noise_variance_for_snr(self.ris_reference_power, snr_db)


def build_scenario(geom, bounds: WorkspaceBounds, seed: int, n_scatterers: int = 9,
                   power_ratio: float = 10.0, omega_mode: str = "ones", beta: complex = 1.0,
                   tx_power_dbm: float = 30.0, ris_noise: bool = False,
                   n_reference: int = 2000) -> Scenario:
    scat = cs.draw_scatterers(n_scatterers, bounds.upper, child_rng(seed, "scatterers"),
                              power_ratio=power_ratio)
    omega = cs.make_phase_profile(geom.n_elements, omega_mode, child_rng(seed, "omega"))
    H = cs.bs_ris_channel(geom, beta)
    pilot = cs.pilot_from_power(tx_power_dbm)
    ref = child_rng(seed, "reference").uniform(0.0, 1.0, (n_reference, 3)) * bounds.upper
    y_r = cs.mu_ris_channel(ref, scat, geom) * pilot
    power = cs.bs_signal_power(H, omega, y_r)
    ris_power = float(np.mean(np.abs(y_r) ** 2))
    return Scenario(geom, scat, omega, H, pilot, power, ris_power, ris_noise)


@dataclass
class Dataset:
    kind: str
    positions: np.ndarray  # (count, steps, 3)
    y: dict  # snr_db -> (count, steps, M) complex
    y_r: dict  # snr_db -> (count, steps, N) complex
    split: np.ndarray  # (count,) of "train" / "test"
    traj_ids: np.ndarray  # (count,)
    seeds: np.ndarray  # (count,)
    snr_grid: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def steps(self) -> int:
        return self.positions.shape[1]

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)


def split_trajectories(count: int, test_fraction: float, rng) -> np.ndarray:
    """Train/test tag per trajectory; at least one of each when ``count >= 2``."""
    n_test = int(round(count * test_fraction))
    if count >= 2:
        n_test = min(max(n_test, 1), count - 1)
    tags = np.array(["train"] * count, dtype=object)
    tags[np.random.default_rng(rng).permutation(count)[:n_test]] = "test"
    return tags.astype(str)


def generate_dataset(kind: str, count: int, steps: int, snr_grid, scenario: Scenario,
                     bounds: WorkspaceBounds, seed: int, params: KindParams | None = None,
                     test_fraction: float = 0.2) -> Dataset:
    """Trajectories of one kind with per-step BS and RIS signals at every SNR.

    Trajectory ``i`` uses child seed ``(seed, kind, i)`` and its noise at SNR
    ``s`` uses ``(seed, kind/noise/s, i)``, so records are independent of
    generation order.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    geom = scenario.geom
    positions = np.empty((count, steps, 3))
    seeds = np.empty(count, dtype=np.uint64)
    for i in range(count):
        seeds[i] = child_seed(seed, f"traj/{kind}", i)
        positions[i] = draw_trajectory(kind, steps, bounds, np.random.default_rng(seeds[i]),
                                       params).points
    flat = positions.reshape(-1, 3)
    clean_r = cs.mu_ris_channel(flat, scenario.scatterers, geom) * scenario.pilot
    clean_y = clean_r @ cs.cascade(scenario.H, scenario.omega).T
    cs.check_near_field(flat, geom)
    ys, yrs = {}, {}
    for snr in snr_grid:
        var = scenario.noise_variance(snr)
        y = np.empty((count, steps, geom.n_antennas), dtype=complex)
        y_r = np.empty((count, steps, geom.n_elements), dtype=complex)
        for i in range(count):
            rng = child_rng(seed, f"noise/{kind}/{snr}", i)
            sl = slice(i * steps, (i + 1) * steps)
            y[i] = clean_y[sl] + cs.complex_noise(rng, (steps, geom.n_antennas), var)
            y_r[i] = clean_r[sl]
            if scenario.ris_noise:
                y_r[i] = y_r[i] + cs.complex_noise(rng, (steps, geom.n_elements),
                                                   scenario.ris_noise_variance(snr))
        ys[float(snr)] = y
        yrs[float(snr)] = y_r
    split = split_trajectories(count, test_fraction, child_rng(seed, f"split/{kind}"))
    return Dataset(
        kind=kind,
        positions=positions,
        y=ys,
        y_r=yrs,
        split=split,
        traj_ids=np.arange(count),
        seeds=seeds,
        snr_grid=[float(s) for s in snr_grid],
        meta={
            "geometry_hash": geometry_hash(geom),
            "master_seed": int(seed),
            "reference_power": scenario.reference_power,
            "ris_reference_power": scenario.ris_reference_power,
        },
    )


def geometry_hash(geom: cs.ScenarioGeometry) -> str:
    h = hashlib.sha256()
    for arr in (geom.ris_elements, geom.bs_antennas):
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    h.update(np.float64(geom.wavelength).astype("<f8").tobytes())
    return h.hexdigest()[:16]


# --- persistence: key/value manifest plus little-endian float64 payloads ---

def _write_complex(path: Path, arr: np.ndarray) -> None:
    np.ascontiguousarray(arr, dtype="<c16").tofile(path)


def _read_complex(path: Path, shape) -> np.ndarray:
    return np.fromfile(path, dtype="<c16").reshape(shape).astype(complex)


def save_dataset(ds: Dataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    count, steps = ds.count, ds.steps
    m = next(iter(ds.y.values())).shape[-1] if ds.y else 0
    n = next(iter(ds.y_r.values())).shape[-1] if ds.y_r else 0
    np.ascontiguousarray(ds.positions, dtype="<f8").tofile(d / "positions.bin")
    for i, snr in enumerate(ds.snr_grid):
        _write_complex(d / f"y_{i}.bin", ds.y[snr])
        _write_complex(d / f"yr_{i}.bin", ds.y_r[snr])
    header = {
        "kind": ds.kind,
        "count": count,
        "steps": steps,
        "n_antennas": m,
        "n_elements": n,
        "snr_grid": json.dumps(ds.snr_grid),
        "split": "".join("T" if s == "test" else "R" for s in ds.split),
        "seeds": json.dumps([int(s) for s in ds.seeds]),
        "layout": "little-endian float64; complex samples interleaved (re, im)",
    }
    header.update({k: json.dumps(v) for k, v in ds.meta.items()})
    (d / "manifest.txt").write_text("".join(f"{k}: {v}\n" for k, v in header.items()))
    return d


def _read_manifest(path: Path) -> dict:
    out = {}
    for line in path.read_text().splitlines():
        key, _, value = line.partition(": ")
        out[key] = value
    return out


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    h = _read_manifest(d / "manifest.txt")
    count, steps = int(h["count"]), int(h["steps"])
    m, n = int(h["n_antennas"]), int(h["n_elements"])
    snr_grid = json.loads(h["snr_grid"])
    positions = np.fromfile(d / "positions.bin", dtype="<f8").reshape(count, steps, 3)
    ys = {s: _read_complex(d / f"y_{i}.bin", (count, steps, m)) for i, s in enumerate(snr_grid)}
    yrs = {s: _read_complex(d / f"yr_{i}.bin", (count, steps, n)) for i, s in enumerate(snr_grid)}
    split = np.array(["test" if c == "T" else "train" for c in h["split"]])
    reserved = {"kind", "count", "steps", "n_antennas", "n_elements", "snr_grid", "split",
                "seeds", "layout"}
    meta = {k: json.loads(v) for k, v in h.items() if k not in reserved}
    return Dataset(h["kind"], positions.astype(float), ys, yrs, split, np.arange(count),
                   np.array(json.loads(h["seeds"]), dtype=np.uint64), snr_grid, meta)
