"""Reconstruct the RIS-side signal from the low-dimensional BS signal.

The network turns the complex BS vector into a two-channel image, lifts it
to three channels with a 1x1 convolution, runs densely connected blocks with
pooling transitions in between and finishes with ReLU plus a linear head
that emits ``2N`` reals (first ``N`` real parts, last ``N`` imaginary parts).
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_nn as tn
from .tensor_nn.layers import BatchNormState, conv_params, dense_params
from .tensor_nn.tensor import Parameter, ShapeError, Tensor, no_grad


class TrainingDivergedError(RuntimeError):
    """Loss became NaN or infinite during training."""


@dataclass
class ReconConfig:
    m1: int = 4
    m2: int = 4
    n1: int = 10
    n2: int = 10
    upsample_target: tuple = (32, 32)
    upsample_mode: str = "bilinear"
    n_dense_modules: int = 2
    blocks_per_module: int = 3
    growth_channels: int = 8
    initial_channels: int = 3
    compression: float = 0.5

    def __post_init__(self):
        self.upsample_target = tuple(self.upsample_target)
        dims = [self.m1, self.m2, self.n1, self.n2, *self.upsample_target, self.n_dense_modules,
                self.blocks_per_module, self.growth_channels, self.initial_channels]
        if min(dims) < 1:
            raise ValueError(f"recon config sizes must be positive: {self}")

    @property
    def output_length(self) -> int:
        return 2 * self.n1 * self.n2

    def channel_plan(self):
        """Channel count and spatial size after each module's dense blocks and transition.

        Returns a list of ``(block_out_channels, transition_out_channels, h, w)``
        where ``h, w`` are the sizes after the transition's pooling.
        """
        c = self.initial_channels
        h, w = self.upsample_target
        plan = []
        for _ in range(self.n_dense_modules):
            c_blocks = c + self.blocks_per_module * self.growth_channels
            if h < 2 or w < 2:
                raise ShapeError(f"transition needs spatial dims >= 2, got {h}x{w}")
            c = max(1, int(math.floor(c_blocks * self.compression)))
            h, w = h // 2, w // 2
            plan.append((c_blocks, c, h, w))
        return plan

    @property
    def flat_features(self) -> int:
        _, c, h, w = self.channel_plan()[-1]
        return c * h * w


@dataclass
class DenseBlock:
    gamma: Parameter
    beta: Parameter
    bn: BatchNormState
    weight: Parameter
    bias: Parameter

    def parameters(self):
        return [self.gamma, self.beta, self.weight, self.bias]


@dataclass
class Transition:
    weight: Parameter
    bias: Parameter

    def parameters(self):
        return [self.weight, self.bias]


@dataclass
class ReconModel:
    cfg: ReconConfig
    tri_w: Parameter
    tri_b: Parameter
    modules: list  # list of (list[DenseBlock], Transition)
    head_w: Parameter
    head_b: Parameter
    # input scale and per-component target standardization, fitted on training data
    input_scale: float = 1.0
    target_mean: np.ndarray = field(default=None)
    target_std: np.ndarray = field(default=None)

    def parameters(self):
        params = [self.tri_w, self.tri_b]
        for blocks, trans in self.modules:
            for blk in blocks:
                params += blk.parameters()
            params += trans.parameters()
        return params + [self.head_w, self.head_b]

    def bn_states(self):
        return [blk.bn for blocks, _ in self.modules for blk in blocks]

    def snapshot(self):
        """Copy of every mutable array, for restoring the best epoch."""
        return ([p.data.copy() for p in self.parameters()],
                [(s.running_mean.copy(), s.running_var.copy()) for s in self.bn_states()])

    def restore(self, snap):
        values, stats = snap
        for p, v in zip(self.parameters(), values):
            p.data = v.copy()
        for s, (m, v) in zip(self.bn_states(), stats):
            s.running_mean, s.running_var = m.copy(), v.copy()

    def checkpoint_arrays(self):
        """Parameters plus batch-norm running stats as named arrays."""
        out = list(self.parameters())
        for i, s in enumerate(self.bn_states()):
            out.append(Parameter(s.running_mean, f"bn{i}.running_mean"))
            out.append(Parameter(s.running_var, f"bn{i}.running_var"))
        return out


def init_recon(cfg: ReconConfig, rng) -> ReconModel:
    rng = np.random.default_rng(rng)
    tri_w, tri_b = conv_params(rng, 2, cfg.initial_channels, 1, "tri")
    modules = []
    c = cfg.initial_channels
    for mi, (c_blocks, c_trans, _, _) in enumerate(cfg.channel_plan()):
        blocks = []
        for bi in range(cfg.blocks_per_module):
            c_in = c + bi * cfg.growth_channels
            w, b = conv_params(rng, c_in, cfg.growth_channels, 3, f"m{mi}.b{bi}.conv")
            blocks.append(DenseBlock(Parameter(np.ones(c_in), f"m{mi}.b{bi}.gamma"),
                                     Parameter(np.zeros(c_in), f"m{mi}.b{bi}.beta"),
                                     BatchNormState(c_in), w, b))
        tw, tb = conv_params(rng, c_blocks, c_trans, 1, f"m{mi}.trans")
        modules.append((blocks, Transition(tw, tb)))
        c = c_trans
    head_w, head_b = dense_params(rng, cfg.flat_features, cfg.output_length, "head")
    return ReconModel(cfg, tri_w, tri_b, modules, head_w, head_b,
                      target_mean=np.zeros(cfg.output_length),
                      target_std=np.ones(cfg.output_length))


# ---- building blocks ----

def preprocess_bs(y, m1: int, m2: int, target=None, mode: str = "bilinear") -> Tensor:
    """Complex BS vector(s) to a ``2 x h x w`` (or batched) real tensor.

    Channel 0 holds the real part and channel 1 the imaginary part of ``y``
    laid out row-major on the ``m1 x m2`` antenna grid.
    """
    y = np.asarray(y)
    if y.shape[-1] != m1 * m2:
        raise ShapeError(f"BS signal length {y.shape[-1]} != m1*m2 = {m1 * m2}")
    grid = y.reshape(y.shape[:-1] + (m1, m2))
    base = np.stack([grid.real, grid.imag], axis=-3)
    t = Tensor(base)
    if target is None or tuple(target) == (m1, m2):
        return t
    return tn.upsample(t, target[0], target[1], mode)


def tri_channel_conv(t, weight, bias) -> Tensor:
    t = tn.Tensor(t) if not isinstance(t, Tensor) else t
    channels = t.shape[-3]
    if channels != 2:
        raise ShapeError(f"tri-channel conv expects 2 input channels, got {channels}")
    return tn.conv2d(t, weight, bias)


def dense_block_forward(t: Tensor, block: DenseBlock, training: bool) -> Tensor:
    """``concat(t, conv3x3(relu(bn(t))))`` along the channel axis."""
    if t.shape[-3] != block.gamma.shape[0]:
        raise ShapeError(f"dense block expects {block.gamma.shape[0]} channels, got {t.shape[-3]}")
    x = t if t.ndim == 4 else t.reshape((1,) + t.shape)
    z = tn.batch_norm(x, block.gamma, block.beta, block.bn, training=training)
    z = tn.conv2d(tn.relu(z), block.weight, block.bias, padding=1)
    out = tn.concat([x, z], axis=1)
    return out if t.ndim == 4 else out.reshape(out.shape[1:])


def dense_module_forward(t: Tensor, blocks, training: bool) -> Tensor:
    for blk in blocks:
        t = dense_block_forward(t, blk, training)
    return t


def transition_forward(t: Tensor, trans: Transition) -> Tensor:
    """1x1 channel compression then 2x2 average pooling with stride 2."""
    if t.shape[-1] < 2 or t.shape[-2] < 2:
        raise ShapeError(f"transition needs spatial dims >= 2, got {t.shape[-2:]}")
    return tn.pool2d(tn.conv2d(t, trans.weight, trans.bias), "avg", 2, 2)


def recon_head(features, model: ReconModel) -> Tensor:
    """Linear output stage applied to post-ReLU flattened features."""
    return tn.dense(features, model.head_w, model.head_b)


def recon_network(y, model: ReconModel, training: bool = False) -> Tensor:
    """Standardized ``2N`` outputs for a batch ``(B, M)`` of BS signals."""
    cfg = model.cfg
    y = np.asarray(y) / model.input_scale
    single = y.ndim == 1
    t = preprocess_bs(y[None] if single else y, cfg.m1, cfg.m2, cfg.upsample_target,
                      cfg.upsample_mode)
    t = tri_channel_conv(t, model.tri_w, model.tri_b)
    for blocks, trans in model.modules:
        t = transition_forward(dense_module_forward(t, blocks, training), trans)
    out = recon_head(tn.relu(tn.flatten(t, 1)), model)
    return out.reshape(out.shape[1:]) if single else out


def unpack_complex(v: np.ndarray) -> np.ndarray:
    """Split-half real layout to complex: ``v[:N] + 1j * v[N:]``."""
    n = v.shape[-1] // 2
    return v[..., :n] + 1j * v[..., n:]


def pack_complex(z: np.ndarray) -> np.ndarray:
    return np.concatenate([z.real, z.imag], axis=-1)


def recon_forward(y, model: ReconModel, batch_size: int = 256) -> np.ndarray:
    """Reconstructed complex RIS signal(s), de-standardized, in eval mode."""
    y = np.asarray(y)
    single = y.ndim == 1
    yb = y[None] if single else y.reshape(-1, y.shape[-1])
    outs = []
    with no_grad():
        for s in range(0, len(yb), batch_size):
            outs.append(recon_network(yb[s:s + batch_size], model, training=False).data)
    z = unpack_complex(np.concatenate(outs) * model.target_std + model.target_mean)
    return z[0] if single else z.reshape(y.shape[:-1] + (z.shape[-1],))


# ---- training ----

@dataclass
class ReconHyper:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    patience: int = 5
    max_train: int | None = None  # subsample cap on training pairs


def fit_standardization(model: ReconModel, y_train: np.ndarray, yr_train: np.ndarray) -> None:
    model.input_scale = float(np.sqrt(np.mean(np.abs(y_train) ** 2))) or 1.0
    packed = pack_complex(yr_train)
    model.target_mean = packed.mean(axis=0)
    std = packed.std(axis=0)
    model.target_std = np.where(std > 0, std, 1.0)


def _standardized_targets(model, yr):
    return (pack_complex(yr) - model.target_mean) / model.target_std


def recon_loss(model: ReconModel, y: np.ndarray, yr: np.ndarray, batch_size: int = 256) -> float:
    """Eval-mode MSE over standardized real components."""
    total = 0.0
    with no_grad():
        for s in range(0, len(y), batch_size):
            pred = recon_network(y[s:s + batch_size], model, training=False).data
            total += float(np.sum((pred - _standardized_targets(model, yr[s:s + batch_size])) ** 2))
    return total / (len(y) * model.cfg.output_length)


def _diverged(stage, epoch, step, loss, params):
    norms = ", ".join(f"{p.name}={np.linalg.norm(p.data):.3g}" for p in params[:6])
    return TrainingDivergedError(
        f"{stage}: non-finite loss {loss} at epoch {epoch}, step {step}; param norms: {norms}"
    )


def train_recon(train, val, cfg: ReconConfig, hyper: ReconHyper, seed: int, model=None):
    """Fit the network on ``(y, y_r)`` pairs.

    ``train`` and ``val`` are tuples of complex arrays ``(y (B, M), y_r (B, N))``.
    Epoch 0 of the returned curve is the freshly initialized model. Returns
    ``(model, curve)`` with ``curve`` a list of ``(epoch, train_loss, val_loss)``;
    the model is restored to the epoch with the lowest validation loss.
    """
    y_tr, yr_tr = (np.asarray(a) for a in train)
    y_va, yr_va = (np.asarray(a) for a in val)
    if len(y_tr) == 0 or len(y_va) == 0:
        raise ValueError("train_recon needs nonempty train and validation sets")
    rng = np.random.default_rng(seed)
    if hyper.max_train is not None and len(y_tr) > hyper.max_train:
        keep = np.sort(rng.choice(len(y_tr), hyper.max_train, replace=False))
        y_tr, yr_tr = y_tr[keep], yr_tr[keep]
    if model is None:
        model = init_recon(cfg, rng)
        fit_standardization(model, y_tr, yr_tr)
    params = model.parameters()
    opt = tn.Adam(params, lr=hyper.lr)
    targets = _standardized_targets(model, yr_tr)

    curve = [(0, recon_loss(model, y_tr, yr_tr), recon_loss(model, y_va, yr_va))]
    best, best_snap, stale = curve[0][2], model.snapshot(), 0
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(y_tr))
        batch_losses = []
        for step, s in enumerate(range(0, len(order), hyper.batch_size)):
            idx = order[s:s + hyper.batch_size]
            if len(idx) < 2:  # batch-norm needs more than one sample
                continue
            opt.zero_grad()
            loss = tn.mse_loss(recon_network(y_tr[idx], model, training=True), targets[idx])
            if not np.isfinite(loss.data):
                raise _diverged("train_recon", epoch, step, float(loss.data), params)
            tn.backward(loss)
            opt.step()
            batch_losses.append(float(loss.data))
        val_loss = recon_loss(model, y_va, yr_va)
        if not np.isfinite(val_loss):
            raise _diverged("train_recon", epoch, -1, val_loss, params)
        curve.append((epoch, float(np.mean(batch_losses)), val_loss))
        if val_loss < best:
            best, best_snap, stale = val_loss, model.snapshot(), 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    model.restore(best_snap)
    return model, curve


def write_loss_csv(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e, tr, va in curve:
            w.writerow([e, repr(float(tr)), repr(float(va))])


def save_recon(model: ReconModel, directory) -> Path:
    meta = {
        "config": asdict(model.cfg),
        "output_packing": "split-half: first N reals are real parts, last N imaginary parts",
        "input_scale": model.input_scale,
        "target_mean": model.target_mean.tolist(),
        "target_std": model.target_std.tolist(),
    }
    return tn.save_checkpoint(model.checkpoint_arrays(), directory, meta)


def load_recon(directory) -> ReconModel:
    arrays, meta = tn.read_checkpoint(directory)
    cfg = ReconConfig(**meta["config"])
    model = init_recon(cfg, 0)
    tn.load_into(model.parameters(), directory)
    for i, s in enumerate(model.bn_states()):
        s.running_mean = arrays[f"bn{i}.running_mean"].copy()
        s.running_var = arrays[f"bn{i}.running_var"].copy()
    model.input_scale = meta["input_scale"]
    model.target_mean = np.asarray(meta["target_mean"])
    model.target_std = np.asarray(meta["target_std"])
    return model
