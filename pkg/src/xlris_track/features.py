"""Per-slot feature extraction from (reconstructed) RIS signals.

The final vector is ``[cnn | tf | aoa]``:

* ``cnn``: a small conv net over the real/imag image of the signal,
* ``tf``: time-domain mean/variance plus FFT energy and spectral entropy of
  the min-max normalized magnitude sequence,
* ``aoa``: MUSIC angle estimates ``(theta, phi)`` per RIS sub-array.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_nn as tn
from .reconstruction import TrainingDivergedError
from .tensor_nn.layers import conv_params, dense_params
from .tensor_nn.tensor import Parameter, ShapeError, Tensor, no_grad


class DegenerateSpectrumWarning(UserWarning):
    pass


class MusicError(ArithmeticError):
    """Covariance could not be eigendecomposed."""


# ---- image preprocessing and CNN ----

def preprocess_ris(y_hat, n1: int, n2: int) -> Tensor:
    """``2 x n1 x n2`` real/imag image of an RIS signal (batched inputs allowed)."""
    y_hat = np.asarray(y_hat)
    if y_hat.shape[-1] != n1 * n2:
        raise ShapeError(f"RIS signal length {y_hat.shape[-1]} != n1*n2 = {n1 * n2}")
    grid = y_hat.reshape(y_hat.shape[:-1] + (n1, n2))
    return Tensor(np.stack([grid.real, grid.imag], axis=-3))


@dataclass
class CNNConfig:
    rows: int = 10
    cols: int = 10
    n_f: int = 32
    filters: tuple = (16, 32)
    kernel: int = 3
    pool: int = 2

    def __post_init__(self):
        self.filters = tuple(self.filters)

    @property
    def flat_size(self) -> int:
        h, w = self.rows, self.cols
        for _ in self.filters:
            h, w = h // self.pool, w // self.pool
        if h < 1 or w < 1:
            raise ShapeError(f"{self.rows}x{self.cols} input too small for {len(self.filters)} pools")
        return self.filters[-1] * h * w


@dataclass
class CNNExtractor:
    cfg: CNNConfig
    convs: list  # [(weight, bias), ...]
    dense_w: Parameter
    dense_b: Parameter
    input_scale: float = 1.0

    def parameters(self):
        out = [p for wb in self.convs for p in wb]
        return out + [self.dense_w, self.dense_b]


def init_cnn(cfg: CNNConfig, rng, prefix: str = "cnn") -> CNNExtractor:
    rng = np.random.default_rng(rng)
    convs, c_in = [], 2
    for i, c_out in enumerate(cfg.filters):
        convs.append(conv_params(rng, c_in, c_out, cfg.kernel, f"{prefix}.conv{i}"))
        c_in = c_out
    w, b = dense_params(rng, cfg.flat_size, cfg.n_f, f"{prefix}.dense")
    return CNNExtractor(cfg, convs, w, b)


def cnn_features(t, model: CNNExtractor) -> Tensor:
    """conv+ReLU -> maxpool, repeated per filter stage, then flatten -> dense."""
    t = t if isinstance(t, Tensor) else Tensor(t)
    single = t.ndim == 3
    x = t.reshape((1,) + t.shape) if single else t
    if x.shape[-2:] != (model.cfg.rows, model.cfg.cols):
        raise ShapeError(f"CNN expects {model.cfg.rows}x{model.cfg.cols} input, got {x.shape[-2:]}")
    pad = model.cfg.kernel // 2
    for w, b in model.convs:
        x = tn.pool2d(tn.relu(tn.conv2d(x, w, b, padding=pad)), "max", model.cfg.pool)
    out = tn.dense(tn.flatten(x, 1), model.dense_w, model.dense_b)
    return out.reshape(out.shape[1:]) if single else out


@dataclass
class CNNHyper:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    max_train: int | None = 6000


def _cnn_input(signals, model: CNNExtractor) -> Tensor:
    return preprocess_ris(np.asarray(signals) / model.input_scale, model.cfg.rows, model.cfg.cols)


def pretrain_cnn(signals, positions, cfg: CNNConfig, hyper: CNNHyper, seed: int):
    """Fit the extractor with a temporary linear position head, then drop the head.

    ``signals`` is ``(B, rows*cols)`` complex, ``positions`` ``(B, 3)``. Returns
    ``(extractor, curve)`` where ``curve`` lists ``(epoch, train_loss)`` on
    standardized positions.
    """
    signals = np.asarray(signals)
    positions = np.asarray(positions, dtype=float)
    rng = np.random.default_rng(seed)
    if hyper.max_train is not None and len(signals) > hyper.max_train:
        keep = np.sort(rng.choice(len(signals), hyper.max_train, replace=False))
        signals, positions = signals[keep], positions[keep]
    model = init_cnn(cfg, rng)
    model.input_scale = float(np.sqrt(np.mean(np.abs(signals) ** 2))) or 1.0
    head_w, head_b = dense_params(rng, cfg.n_f, 3, "cnn.aux_head")
    mu, sd = positions.mean(axis=0), positions.std(axis=0)
    target = (positions - mu) / np.where(sd > 0, sd, 1.0)
    params = model.parameters() + [head_w, head_b]
    opt = tn.Adam(params, lr=hyper.lr)
    x_all = _cnn_input(signals, model).data
    curve = []
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(signals))
        losses = []
        for s in range(0, len(order), hyper.batch_size):
            idx = order[s:s + hyper.batch_size]
            opt.zero_grad()
            feats = tn.relu(cnn_features(Tensor(x_all[idx]), model))
            loss = tn.mse_loss(tn.dense(feats, head_w, head_b), target[idx])
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(f"pretrain_cnn: non-finite loss at epoch {epoch}")
            tn.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        curve.append((epoch, float(np.mean(losses))))
    return model, curve


def save_cnn(model: CNNExtractor, directory) -> Path:
    meta = {"config": asdict(model.cfg), "input_scale": model.input_scale}
    return tn.save_checkpoint(model.parameters(), directory, meta)


def load_cnn(directory) -> CNNExtractor:
    _, meta = tn.read_checkpoint(directory)
    model = init_cnn(CNNConfig(**meta["config"]), 0)
    tn.load_into(model.parameters(), directory)
    model.input_scale = meta["input_scale"]
    return model


def extract_cnn(signals, model: CNNExtractor, batch_size: int = 512) -> np.ndarray:
    signals = np.asarray(signals)
    flat = signals.reshape(-1, signals.shape[-1])
    outs = []
    with no_grad():
        for s in range(0, len(flat), batch_size):
            outs.append(cnn_features(_cnn_input(flat[s:s + batch_size], model), model).data)
    return np.concatenate(outs).reshape(signals.shape[:-1] + (model.cfg.n_f,))


# ---- time and frequency statistics ----

_FLAT_TOL = 1e-12


def normalize_signal(v) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant vector maps to zeros.

    Spans below ``_FLAT_TOL`` of the largest magnitude count as constant, so
    rounding noise in e.g. ``|exp(j w n)|`` is not blown up to full scale.
    """
    v = np.asarray(v, dtype=float)
    if v.shape[-1] == 0:
        raise ValueError("cannot normalize an empty signal")
    lo = v.min(axis=-1, keepdims=True)
    span = v.max(axis=-1, keepdims=True) - lo
    live = span > _FLAT_TOL * np.abs(v).max(axis=-1, keepdims=True)
    safe = np.where(live, span, 1.0)
    return np.where(live, (v - lo) / safe, 0.0)


def spectral_stats(x):
    """Unnormalized FFT energy, probability mass and entropy along the last axis.

    Returns ``(energy, entropy, p, degenerate)``. ``0 ln 0`` is taken as 0;
    an all-zero spectrum yields entropy 0 and ``degenerate=True``.
    """
    e = np.abs(np.fft.fft(np.asarray(x), axis=-1)) ** 2
    energy = e.sum(axis=-1)
    degenerate = energy <= 0
    p = e / np.where(degenerate, 1.0, energy)[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    entropy = np.where(degenerate, 0.0, -terms.sum(axis=-1))
    # rounding can push a one-hot spectrum a hair below zero
    entropy = np.maximum(entropy, 0.0)
    return energy, entropy, p, degenerate


def tf_features(y_hat):
    """``([mu, var, E_fft, H_fft], degenerate)`` of the normalized magnitude sequence.

    Works on a single signal or a batch along the last axis.
    """
    y_hat = np.asarray(y_hat)
    if y_hat.shape[-1] < 2:
        raise ValueError("tf_features needs at least 2 samples")
    v = normalize_signal(np.abs(y_hat))
    energy, entropy, _, degenerate = spectral_stats(v)
    feats = np.stack([v.mean(axis=-1), v.var(axis=-1), energy, entropy], axis=-1)
    return feats, degenerate


# ---- sub-arrays and MUSIC ----

@dataclass(frozen=True)
class SubArray:
    index: int
    elements: np.ndarray  # indices into the parent array, row-major within the tile
    rows: int
    cols: int
    spacing: float
    wavelength: float
    center: np.ndarray
    row_axis: np.ndarray
    col_axis: np.ndarray

    @property
    def size(self) -> int:
        return self.rows * self.cols


def partition_subarrays(geom, k_rows: int, k_cols: int):
    """Contiguous ``k_rows x k_cols`` tiling of the RIS into equal rectangles."""
    n1, n2 = geom.n1, geom.n2
    if k_rows < 1 or k_cols < 1 or n1 % k_rows or n2 % k_cols:
        raise ValueError(f"{n1}x{n2} RIS cannot be tiled by {k_rows}x{k_cols}")
    r, c = n1 // k_rows, n2 // k_cols
    grid = np.arange(n1 * n2).reshape(n1, n2)
    subs = []
    for a in range(k_rows):
        for b in range(k_cols):
            idx = grid[a * r:(a + 1) * r, b * c:(b + 1) * c].reshape(-1)
            subs.append(SubArray(a * k_cols + b, idx, r, c, geom.element_spacing,
                                 geom.wavelength, geom.ris_elements[idx].mean(axis=0),
                                 geom.ris_row_axis, geom.ris_col_axis))
    return subs


def true_angles(p, sub: SubArray):
    """Ground-truth ``(theta, phi)`` of a source as seen from a sub-array center."""
    u = np.asarray(p, dtype=float) - sub.center
    u = u / np.linalg.norm(u, axis=-1, keepdims=True)
    cos_t = np.clip(u @ sub.row_axis, -1.0, 1.0)
    theta = np.arccos(cos_t)
    sin_t = np.sqrt(1.0 - cos_t ** 2)
    cos_p = np.clip((u @ sub.col_axis) / np.where(sin_t > 0, sin_t, 1.0), -1.0, 1.0)
    return theta, np.arccos(cos_p)


def _unitary_dft(n: int) -> np.ndarray:
    return np.fft.fft(np.eye(n), axis=0, norm="ortho")


@dataclass
class MusicConfig:
    k_rows: int = 2
    k_cols: int = 2
    snapshots: int = 64
    resolution_deg: float = 1.0
    theta_range_deg: tuple = (0.0, 180.0)
    phi_range_deg: tuple = (0.0, 180.0)
    n_sources: int = 1
    preprocess: bool = True  # per-snapshot normalize + FFT
    pilot_mode: str = "random_phase"

    def grid(self):
        step = self.resolution_deg
        th = np.deg2rad(np.arange(self.theta_range_deg[0], self.theta_range_deg[1] + step / 2, step))
        ph = np.deg2rad(np.arange(self.phi_range_deg[0], self.phi_range_deg[1] + step / 2, step))
        return th, ph


class SteeringGrid:
    """Factored steering vectors ``a(theta, phi) = a_e(theta) kron a_a(theta, phi)``.

    Element ``(i, j)`` of a tile has phase ``k d (i cos(theta) + j sin(theta) cos(phi))``.
    With ``transform`` set, both factors are taken through the unitary DFT used
    to preprocess the snapshots so the Kronecker structure survives.
    """

    def __init__(self, rows, cols, spacing, wavelength, theta, phi, transform: bool):
        k = 2 * np.pi / wavelength
        self.theta, self.phi = theta, phi
        self.rows, self.cols = rows, cols
        ae = np.exp(1j * k * spacing * np.outer(np.cos(theta), np.arange(rows)))  # (T, r)
        arg = np.sin(theta)[:, None, None] * np.cos(phi)[None, :, None] * np.arange(cols)
        aa = np.exp(1j * k * spacing * arg)  # (T, P, c)
        if transform:
            ae = ae @ _unitary_dft(rows).T
            aa = aa @ _unitary_dft(cols).T
        self.ae, self.aa = ae, aa
        self._aa_t = np.ascontiguousarray(np.swapaxes(aa, 1, 2))  # (T, c, P)
        self.norm2 = (np.sum(np.abs(ae) ** 2, axis=1)[:, None]
                      * np.sum(np.abs(aa) ** 2, axis=2))  # (T, P)

    def projection(self, es: np.ndarray) -> np.ndarray:
        """``||E_s^H a||^2`` on the grid for signal subspaces ``es`` of shape (B, r*c, d)."""
        b, _, d = es.shape
        m = np.conj(es).reshape(b, self.rows, self.cols * d)
        u = (self.ae @ m).reshape(b, len(self.theta), self.cols, d)  # (B, T, c, d)
        # batched over theta: (T, B*d, c) @ (T, c, P)
        lhs = u.transpose(1, 0, 3, 2).reshape(len(self.theta), b * d, self.cols)
        val = np.matmul(lhs, self._aa_t).reshape(len(self.theta), b, d, -1)
        return np.sum(val.real ** 2 + val.imag ** 2, axis=2).transpose(1, 0, 2)


def pilot_sequence(rng, s: int, mode: str) -> np.ndarray:
    if mode == "constant":
        return np.ones(s, dtype=complex)
    if mode == "random_phase":
        return np.exp(1j * rng.uniform(0.0, 2 * np.pi, s))
    raise ValueError(f"unknown pilot mode {mode!r}")


def _preprocess_snapshots(x: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Scale each column by its peak magnitude, then apply a unitary 2D DFT over the tile."""
    peak = np.max(np.abs(x), axis=-2, keepdims=True)
    x = x / np.where(peak > 0, peak, 1.0)
    shape = x.shape
    tiles = x.reshape(shape[:-2] + (rows, cols, shape[-1]))
    f = np.fft.fft2(tiles, axes=(-3, -2), norm="ortho")
    return f.reshape(shape)


def subarray_snapshots(signal, sub: SubArray, s: int, noise_variance: float, rng,
                       pilot_mode: str = "random_phase", preprocess: bool = True) -> np.ndarray:
    """``S`` repeated-pilot snapshots of one sub-array, shape ``(|sub|, S)``.

    ``signal`` is the full RIS signal (or a batch ``(B, N)``, giving
    ``(B, |sub|, S)``). Column ``s`` is ``signal[sub] * pilot_s + noise``.
    """
    if s < 2:
        raise ValueError("need at least 2 snapshots for a mean-subtracted covariance")
    if noise_variance < 0:
        raise ValueError(f"noise variance must be >= 0, got {noise_variance}")
    rng = np.random.default_rng(rng)
    signal = np.asarray(signal)
    part = signal[..., sub.elements]
    pilots = pilot_sequence(rng, s, pilot_mode)
    x = part[..., :, None] * pilots
    if noise_variance > 0:
        scale = np.sqrt(noise_variance / 2.0)
        x = x + scale * (rng.normal(size=x.shape) + 1j * rng.normal(size=x.shape))
    return _preprocess_snapshots(x, sub.rows, sub.cols) if preprocess else x


def covariance(snapshots) -> np.ndarray:
    """``(1/S) sum (x_s - xbar)(x_s - xbar)^H`` over the last axis; batched."""
    x = np.asarray(snapshots)
    if x.shape[-1] < 2:
        raise ValueError("covariance needs at least 2 snapshots")
    xc = x - x.mean(axis=-1, keepdims=True)
    r = xc @ np.conj(np.swapaxes(xc, -1, -2)) / x.shape[-1]
    return 0.5 * (r + np.conj(np.swapaxes(r, -1, -2)))


def signal_subspace(r: np.ndarray, n_sources: int) -> np.ndarray:
    if not np.all(np.isfinite(r)):
        raise MusicError("covariance contains non-finite entries")
    try:
        w, v = np.linalg.eigh(r)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(r.reshape((-1,) + r.shape[-2:])).max()
        raise MusicError(f"eigendecomposition failed (condition number {cond:.3g})") from exc
    return v[..., -n_sources:]


def music_spectrum(r, steer: SteeringGrid, n_sources: int = 1) -> np.ndarray:
    """``1 / (a^H E_n E_n^H a)`` on the grid, via ``||a||^2 - ||E_s^H a||^2``."""
    r = np.asarray(r)
    single = r.ndim == 2
    es = signal_subspace(r[None] if single else r, n_sources)
    if n_sources >= es.shape[-2]:
        raise ValueError("n_sources must be smaller than the sub-array size")
    den = steer.norm2 - steer.projection(es)
    floor = 1e-12 * steer.norm2
    spec = 1.0 / np.maximum(den, floor)
    return spec[0] if single else spec


def music_aoa(r, steer: SteeringGrid, n_sources: int = 1):
    """Grid argmax of the MUSIC spectrum; ties go to the smallest theta, then phi."""
    spec = music_spectrum(r, steer, n_sources)
    flat = spec.reshape(spec.shape[:-2] + (-1,))
    idx = np.argmax(flat, axis=-1)  # first maximum in theta-major order
    ti, pi = np.divmod(idx, len(steer.phi))
    return steer.theta[ti], steer.phi[pi]


def steering_for(sub: SubArray, cfg: MusicConfig) -> SteeringGrid:
    theta, phi = cfg.grid()
    return SteeringGrid(sub.rows, sub.cols, sub.spacing, sub.wavelength, theta, phi, cfg.preprocess)


def aoa_features(signals, subs, cfg: MusicConfig, noise_variance: float, rng,
                 steer: SteeringGrid | None = None, chunk: int = 256) -> np.ndarray:
    """``[theta_1, phi_1, ..., theta_K, phi_K]`` for each signal in a batch ``(B, N)``."""
    signals = np.asarray(signals)
    single = signals.ndim == 1
    batch = signals[None] if single else signals
    rng = np.random.default_rng(rng)
    steer = steer or steering_for(subs[0], cfg)
    out = np.empty((len(batch), 2 * len(subs)))
    for s in range(0, len(batch), chunk):
        part = batch[s:s + chunk]
        for k, sub in enumerate(subs):
            snaps = subarray_snapshots(part, sub, cfg.snapshots, noise_variance, rng,
                                       cfg.pilot_mode, cfg.preprocess)
            th, ph = music_aoa(covariance(snaps), steer, cfg.n_sources)
            out[s:s + chunk, 2 * k] = th
            out[s:s + chunk, 2 * k + 1] = ph
    return out[0] if single else out


# ---- assembly ----

@dataclass(frozen=True)
class FeatureLayout:
    n_cnn: int
    n_tf: int
    n_aoa: int

    @property
    def size(self) -> int:
        return self.n_cnn + self.n_tf + self.n_aoa

    @property
    def offsets(self) -> dict:
        a, b = self.n_cnn, self.n_cnn + self.n_tf
        return {"cnn": (0, a), "tf": (a, b), "aoa": (b, self.size)}

    def split(self, final: np.ndarray) -> dict:
        return {k: final[..., lo:hi] for k, (lo, hi) in self.offsets.items()}


def final_features(cnn, tf, aoa, layout: FeatureLayout | None = None) -> np.ndarray:
    """``[cnn | tf | aoa]`` along the last axis."""
    cnn, tf, aoa = (np.asarray(a, dtype=float) for a in (cnn, tf, aoa))
    if layout is not None and (cnn.shape[-1], tf.shape[-1], aoa.shape[-1]) != (
            layout.n_cnn, layout.n_tf, layout.n_aoa):
        raise ShapeError(
            f"feature lengths {(cnn.shape[-1], tf.shape[-1], aoa.shape[-1])} do not match "
            f"layout {(layout.n_cnn, layout.n_tf, layout.n_aoa)}")
    return np.concatenate([cnn, tf, aoa], axis=-1)


# ---- persistence ----

@dataclass
class FeatureSet:
    """Features for one dataset and input source: ``values[snr]`` is ``(count, steps, F)``."""

    source: str
    kind: str
    layout: FeatureLayout
    values: dict
    meta: dict = field(default_factory=dict)


def save_features(fs: FeatureSet, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    snrs = sorted(fs.values)
    for i, snr in enumerate(snrs):
        np.ascontiguousarray(fs.values[snr], dtype="<f8").tofile(d / f"features_{i}.bin")
    shape = next(iter(fs.values.values())).shape if fs.values else (0, 0, fs.layout.size)
    header = {
        "source": fs.source,
        "kind": fs.kind,
        "snr_grid": json.dumps(snrs),
        "shape": json.dumps(list(shape)),
        "layout": json.dumps(asdict(fs.layout)),
        "offsets": json.dumps(fs.layout.offsets),
        "index": "trajectory id, slot, feature",
    }
    header.update({k: json.dumps(v) for k, v in fs.meta.items()})
    (d / "manifest.txt").write_text("".join(f"{k}: {v}\n" for k, v in header.items()))
    return d


def load_features(directory) -> FeatureSet:
    d = Path(directory)
    h = {}
    for line in (d / "manifest.txt").read_text().splitlines():
        k, _, v = line.partition(": ")
        h[k] = v
    snrs = json.loads(h["snr_grid"])
    shape = tuple(json.loads(h["shape"]))
    values = {s: np.fromfile(d / f"features_{i}.bin", dtype="<f8").reshape(shape)
              for i, s in enumerate(snrs)}
    reserved = {"source", "kind", "snr_grid", "shape", "layout", "offsets", "index"}
    meta = {k: json.loads(v) for k, v in h.items() if k not in reserved}
    return FeatureSet(h["source"], h["kind"], FeatureLayout(**json.loads(h["layout"])), values, meta)
