"""Stacked Bi-LSTM encoder / LSTM decoder that predicts the next-slot MU position."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_nn as tn
from .reconstruction import TrainingDivergedError
from .tensor_nn.layers import LSTMCell
from .tensor_nn.tensor import mean, square, tsum


# ---- sequences ----

@dataclass
class SequenceSample:
    features: np.ndarray  # (T, F)
    target: np.ndarray  # (3,)
    traj_id: int
    snr_db: float
    kind: str = ""
    source: str = ""


@dataclass
class SequenceSet:
    """A batch of windows stored as arrays; ``sample(i)`` gives one record."""

    features: np.ndarray  # (B, T, F)
    targets: np.ndarray  # (B, 3)
    traj_ids: np.ndarray  # (B,)
    snr_db: np.ndarray  # (B,)
    kinds: np.ndarray  # (B,) str
    sources: np.ndarray  # (B,) str
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.targets)

    def sample(self, i: int) -> SequenceSample:
        return SequenceSample(self.features[i], self.targets[i], int(self.traj_ids[i]),
                              float(self.snr_db[i]), str(self.kinds[i]), str(self.sources[i]))

    def subset(self, idx) -> SequenceSet:
        idx = np.asarray(idx)
        return SequenceSet(self.features[idx], self.targets[idx], self.traj_ids[idx],
                           self.snr_db[idx], self.kinds[idx], self.sources[idx], 0)

    @classmethod
    def concat(cls, sets) -> SequenceSet:
        sets = list(sets)
        if not sets:
            raise ValueError("nothing to concatenate")
        return cls(*(np.concatenate([getattr(s, f) for s in sets]) for f in
                     ("features", "targets", "traj_ids", "snr_db", "kinds", "sources")),
                   skipped=sum(s.skipped for s in sets))


def window_indices(length: int, t: int):
    """``[(input_slots, target_slot), ...]`` for one trajectory of ``length`` slots."""
    return [(list(range(k, k + t)), k + t) for k in range(length - t)]


def build_sequences(features, positions, t: int, traj_ids=None, snr_db: float = 0.0,
                    kind: str = "", source: str = "") -> SequenceSet:
    """Slide a ``t``-slot window over each trajectory; the target is the next slot.

    Args:
        features: ``(count, L, F)`` per-slot feature vectors.
        positions: ``(count, L, 3)`` MU positions.
        t: window length T.
        traj_ids: ids carried into each sample (defaults to ``0..count-1``).

    Trajectories with ``L <= t`` yield nothing and are counted in ``skipped``.
    Windows never cross trajectory boundaries.
    """
    features, positions = np.asarray(features, float), np.asarray(positions, float)
    if t < 1:
        raise ValueError("T must be at least 1")
    if features.shape[:2] != positions.shape[:2]:
        raise tn.ShapeError(f"features {features.shape} vs positions {positions.shape}")
    count, length, n_feat = features.shape
    ids = np.arange(count) if traj_ids is None else np.asarray(traj_ids)
    if length <= t:
        empty = np.empty((0,))
        return SequenceSet(np.empty((0, t, n_feat)), np.empty((0, 3)), empty.astype(int),
                           empty, empty.astype(str), empty.astype(str), skipped=count)
    w = length - t
    starts = np.arange(w)
    slots = starts[:, None] + np.arange(t)[None, :]  # (w, t)
    feats = features[:, slots].reshape(count * w, t, n_feat)
    targets = positions[:, starts + t].reshape(count * w, 3)
    n = count * w
    return SequenceSet(feats, targets, np.repeat(ids, w), np.full(n, float(snr_db)),
                       np.full(n, kind, dtype=object), np.full(n, source, dtype=object))


# ---- model ----

@dataclass
class TrackerConfig:
    n_features: int
    window: int = 10  # T
    layers: int = 2  # L_s
    hidden: int = 64  # per direction
    decoder_hidden: int = 64
    dropout: float = 0.2
    bidirectional: bool = True

    def validate(self) -> list:
        errs = []
        if self.n_features < 1:
            errs.append("tracker n_features must be positive")
        if self.window < 1:
            errs.append("tracker window T must be at least 1")
        if self.layers < 1:
            errs.append("tracker layers must be at least 1")
        if self.hidden < 1 or self.decoder_hidden < 1:
            errs.append("tracker hidden sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            errs.append("tracker dropout must be in [0, 1)")
        return errs

    @property
    def context_size(self) -> int:
        return self.hidden * (2 if self.bidirectional else 1)


@dataclass
class EncoderLayer:
    fwd: LSTMCell
    bwd: LSTMCell | None


@dataclass
class TrackerModel:
    cfg: TrackerConfig
    encoder: list
    proj_h_w: tn.Parameter
    proj_h_b: tn.Parameter
    proj_c_w: tn.Parameter
    proj_c_b: tn.Parameter
    decoder: LSTMCell
    head_w: tn.Parameter
    head_b: tn.Parameter
    feature_mean: np.ndarray = field(default=None)
    feature_std: np.ndarray = field(default=None)

    def parameters(self):
        ps = []
        for layer in self.encoder:
            ps += layer.fwd.parameters()
            if layer.bwd is not None:
                ps += layer.bwd.parameters()
        ps += [self.proj_h_w, self.proj_h_b, self.proj_c_w, self.proj_c_b]
        ps += self.decoder.parameters()
        return ps + [self.head_w, self.head_b]

    def snapshot(self):
        return [p.data.copy() for p in self.parameters()]

    def restore(self, snap) -> None:
        for p, v in zip(self.parameters(), snap):
            p.data = v.copy()


def init_tracker(cfg: TrackerConfig, rng) -> TrackerModel:
    errs = cfg.validate()
    if errs:
        raise ValueError("; ".join(errs))
    rng = np.random.default_rng(rng)
    encoder, n_in = [], cfg.n_features
    for i in range(cfg.layers):
        fwd = LSTMCell.init(rng, n_in, cfg.hidden, f"enc{i}.fwd")
        bwd = LSTMCell.init(rng, n_in, cfg.hidden, f"enc{i}.bwd") if cfg.bidirectional else None
        encoder.append(EncoderLayer(fwd, bwd))
        n_in = cfg.context_size
    ph_w, ph_b = tn.dense_params(rng, cfg.context_size, cfg.decoder_hidden, "proj_h")
    pc_w, pc_b = tn.dense_params(rng, cfg.context_size, cfg.decoder_hidden, "proj_c")
    # the decoder reads a single zero token, so its input width is irrelevant
    dec = LSTMCell.init(rng, 1, cfg.decoder_hidden, "dec")
    head_w, head_b = tn.dense_params(rng, cfg.decoder_hidden, 3, "head")
    return TrackerModel(cfg, encoder, ph_w, ph_b, pc_w, pc_b, dec, head_w, head_b,
                        np.zeros(cfg.n_features), np.ones(cfg.n_features))


def _as_sequence(x, model: TrackerModel):
    """Standardize ``(B, T, F)`` (or ``(T, F)``) and split into per-slot tensors."""
    x = np.asarray(x, float)
    if x.shape[-1] != model.cfg.n_features:
        raise tn.ShapeError(f"feature dim {x.shape[-1]} != model input {model.cfg.n_features}")
    x = (x - model.feature_mean) / model.feature_std
    return [tn.Tensor(x[..., t, :]) for t in range(x.shape[-2])]


def encoder_forward(sequence, model: TrackerModel, training: bool = False, rng=None):
    """Run the stacked encoder over a list of per-slot tensors.

    Returns the context ``(h, c)``: the last layer's final forward and backward
    states, each concatenated as ``[forward, backward]``.
    """
    if not sequence:
        raise tn.ShapeError("encoder over an empty sequence")
    if sequence[0].shape[-1] != model.cfg.n_features:
        raise tn.ShapeError(
            f"encoder input {sequence[0].shape[-1]} != layer-1 size {model.cfg.n_features}")
    rng = np.random.default_rng(rng)
    seq = sequence
    for i, layer in enumerate(model.encoder):
        if i > 0:
            seq = [tn.dropout(s, model.cfg.dropout, training, rng) for s in seq]
        if layer.bwd is None:
            seq, (h, c) = tn.lstm_unroll(seq, layer.fwd)
        else:
            seq, (hf, cf), (hb, cb) = tn.bilstm_forward(seq, layer.fwd, layer.bwd)
            h, c = tn.concat([hf, hb], axis=-1), tn.concat([cf, cb], axis=-1)
    return h, c


def decoder_forward(context, model: TrackerModel, training: bool = False, rng=None):
    """One decoding step from the projected context on a zero token, then dense(3)."""
    h_ctx, c_ctx = context
    if h_ctx.shape[-1] != model.cfg.context_size or c_ctx.shape[-1] != model.cfg.context_size:
        raise tn.ShapeError(f"context {h_ctx.shape[-1]} != {model.cfg.context_size}")
    h0 = tn.dense(h_ctx, model.proj_h_w, model.proj_h_b)
    c0 = tn.dense(c_ctx, model.proj_c_w, model.proj_c_b)
    token = tn.Tensor(np.zeros(h_ctx.shape[:-1] + (1,)))
    out, _ = tn.lstm_step(token, (h0, c0), model.decoder)
    out = tn.dropout(out, model.cfg.dropout, training, rng)
    return tn.dense(out, model.head_w, model.head_b)


def tracker_forward(x, model: TrackerModel, training: bool = False, rng=None):
    """``(B, T, F)`` raw features -> ``(B, 3)`` position tensor."""
    rng = np.random.default_rng(rng)
    ctx = encoder_forward(_as_sequence(x, model), model, training, rng)
    return decoder_forward(ctx, model, training, rng)


def predict(model: TrackerModel, x, batch_size: int = 512) -> np.ndarray:
    x = np.asarray(x, float)
    out = np.empty((len(x), 3))
    with tn.no_grad():
        for s in range(0, len(x), batch_size):
            out[s:s + batch_size] = tracker_forward(x[s:s + batch_size], model).data
    return out


# ---- training ----

@dataclass
class TrackerHyper:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    patience: int | None = None  # None: run every epoch


def position_loss(pred, target):
    """Mean over samples of the squared Euclidean error, in m^2."""
    return mean(tsum(square(pred - target), axis=-1))


def sample_mse(model: TrackerModel, data: SequenceSet) -> float:
    err = predict(model, data.features) - data.targets
    return float(np.mean(np.sum(err ** 2, axis=-1)))


def fit_standardization(model: TrackerModel, features, targets) -> None:
    flat = np.asarray(features, float).reshape(-1, model.cfg.n_features)
    model.feature_mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    model.feature_std = np.where(std > 0, std, 1.0)
    model.head_b.data = np.asarray(targets, float).mean(axis=0)


def train_tracker(train: SequenceSet, val: SequenceSet, cfg: TrackerConfig, hyper: TrackerHyper,
                  seed, model: TrackerModel | None = None):
    """Adam on the position loss. Returns ``(model, curve)``.

    ``curve`` rows are ``(epoch, train_loss, val_loss)``; epoch 0 is the initial
    model. The model is restored to its lowest-validation-loss epoch.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train_tracker needs nonempty train and validation sets")
    rng = np.random.default_rng(seed)
    if model is None:
        model = init_tracker(cfg, rng)
        fit_standardization(model, train.features, train.targets)
    params = model.parameters()
    opt = tn.Adam(params, lr=hyper.lr)
    curve = [(0, sample_mse(model, train), sample_mse(model, val))]
    best, best_snap, stale = curve[0][2], model.snapshot(), 0
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for step, s in enumerate(range(0, len(order), hyper.batch_size)):
            idx = order[s:s + hyper.batch_size]
            opt.zero_grad()
            pred = tracker_forward(train.features[idx], model, training=True, rng=rng)
            loss = position_loss(pred, tn.Tensor(train.targets[idx]))
            if not np.isfinite(loss.data):
                raise _diverged(epoch, step, float(loss.data), params)
            tn.backward(loss)
            opt.step()
            losses.append(float(loss.data) * len(idx))
        val_loss = sample_mse(model, val)
        if not np.isfinite(val_loss):
            raise _diverged(epoch, -1, val_loss, params)
        curve.append((epoch, sum(losses) / len(train), val_loss))
        if val_loss < best:
            best, best_snap, stale = val_loss, model.snapshot(), 0
        else:
            stale += 1
            if hyper.patience is not None and stale >= hyper.patience:
                break
    model.restore(best_snap)
    return model, curve


def _diverged(epoch, step, loss, params):
    norms = ", ".join(f"{p.name}={np.linalg.norm(p.data):.3g}" for p in params[:6])
    return TrainingDivergedError(
        f"train_tracker: non-finite loss {loss} at epoch {epoch}, step {step}; "
        f"param norms: {norms}")


def plateau_epoch(curve, window: int = 5, tol: float = 0.01):
    """First epoch whose ``window``-epoch validation losses stay within ``tol`` of
    their minimum, or ``None`` if the curve never settles."""
    vals = [v for _, _, v in curve]
    for e in range(len(vals) - window + 1):
        seg = vals[e:e + window]
        if max(seg) <= (1 + tol) * min(seg):
            return curve[e][0]
    return None


# ---- evaluation ----

@dataclass
class MSERow:
    snr_db: float
    trajectory_kind: str
    input_source: str
    mse_m2: float
    n_samples: int


def evaluate(model: TrackerModel, data: SequenceSet, predictions=None):
    """MSE grouped by ``(snr_db, kind, source)``, sorted by those keys.

    Returns ``(rows, notes)``; groups with no samples never occur in the output.
    """
    pred = predict(model, data.features) if predictions is None else np.asarray(predictions)
    return grouped_mse(pred, data)


def grouped_mse(pred, data: SequenceSet):
    sq = np.sum((np.asarray(pred) - data.targets) ** 2, axis=-1)
    groups = defaultdict(list)
    for i in range(len(data)):
        groups[(float(data.snr_db[i]), str(data.kinds[i]), str(data.sources[i]))].append(i)
    rows, notes = [], []
    for key in sorted(groups):
        idx = groups[key]
        if not idx:
            notes.append(f"empty group {key} omitted")
            continue
        # sum in index order so the mean does not depend on dict or batch layout
        rows.append(MSERow(*key, float(np.sum(np.sort(sq[idx])) / len(idx)), len(idx)))
    return rows, notes


# ---- persistence ----

def save_tracker(model: TrackerModel, directory) -> Path:
    meta = {"config": asdict(model.cfg), "feature_mean": model.feature_mean.tolist(),
            "feature_std": model.feature_std.tolist()}
    return tn.save_checkpoint(model.parameters(), directory, meta)


def load_tracker(directory) -> TrackerModel:
    _, meta = tn.read_checkpoint(directory)
    model = init_tracker(TrackerConfig(**meta["config"]), 0)
    tn.load_into(model.parameters(), directory)
    model.feature_mean = np.asarray(meta["feature_mean"])
    model.feature_std = np.asarray(meta["feature_std"])
    return model
