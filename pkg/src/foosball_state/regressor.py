"""Per-rod convolutional regressor, written directly against numpy.

Backbone: three blocks of 3x3 convolution (1->8->16->32 channels, stride 1,
zero padding 1), ReLU and 2x2 max pooling, then global average pooling and
a linear 32->3 head without activation. The head predicts
``(s, cos phi, sin phi)`` where ``s`` is the shift scaled to [-1, 1].

Activations are kept channels-first as (C, N, H, W) so that patch copies
move whole image rows; each convolution is one matrix product over the
patch matrix.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from foosball_state import angles
from foosball_state.core import RodConfig, RodId, RodState, Role, Team
from foosball_state.dataset import split_indices

log = logging.getLogger(__name__)

CHANNELS = (1, 8, 16, 32)
PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b",
               "head_w", "head_b")

MODEL_MAGIC = b"FSRM"
MODEL_VERSION = 1


class Prediction(NamedTuple):
    s_norm: float
    cos_v: float
    sin_v: float


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RegressorModel:
    params: dict[str, np.ndarray]
    rod_id: RodId
    input_size: tuple[int, int] = (256, 64)  # (w, h)
    input_center: float = 0.5
    split_seed: int = 0
    split_ratio: float = 0.8

    @property
    def dtype(self) -> np.dtype:
        return self.params["head_w"].dtype

    def astype(self, dtype) -> RegressorModel:
        return RegressorModel({k: v.astype(dtype) for k, v in self.params.items()},
                              self.rod_id, self.input_size, self.input_center,
                              self.split_seed, self.split_ratio)

    def copy(self) -> RegressorModel:
        return self.astype(self.dtype)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


def init_model(rod_id: RodId, seed: int = 0, input_size: tuple[int, int] = (256, 64),
               dtype=np.float32, input_center: float = 0.5) -> RegressorModel:
    """He-normal convolutions, Glorot-uniform head, zero biases."""
    w, h = input_size
    if h % 8 or w % 8:
        raise ValueError("input size must be divisible by 8 for three 2x2 pools")
    rng = np.random.default_rng(seed)
    params = {}
    for i, (cin, cout) in enumerate(zip(CHANNELS, CHANNELS[1:]), start=1):
        std = math.sqrt(2.0 / (cin * 9))
        params[f"conv{i}_w"] = rng.normal(0.0, std, (cout, cin, 3, 3)).astype(dtype)
        params[f"conv{i}_b"] = np.zeros(cout, dtype=dtype)
    limit = math.sqrt(6.0 / (CHANNELS[-1] + 3))
    params["head_w"] = rng.uniform(-limit, limit, (3, CHANNELS[-1])).astype(dtype)
    params["head_b"] = np.zeros(3, dtype=dtype)
    return RegressorModel(params, rod_id, input_size, input_center)


# -- layers ----------------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    """Patch matrix ``(c*9, n*h*w)`` for a channels-first batch ``(c, n, h, w)``."""
    c, n, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 3, 3, n, h, w), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(c * 9, n * h * w)


def _conv_forward(x, w, b):
    _, n, h, wd = x.shape
    cols = _im2col(x)
    out = w.reshape(w.shape[0], -1) @ cols
    out += b[:, None]
    return out.reshape(w.shape[0], n, h, wd), cols


def _conv_backward(dout, cols, x_shape, w, need_dx=True):
    f = w.shape[0]
    d2 = dout.reshape(f, -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    if not need_dx:
        return None, dw, db
    c, n, h, wd = x_shape
    dcols = (w.reshape(f, -1).T @ d2).reshape(c, 3, 3, n, h, wd)
    dxp = np.zeros((c, n, h + 2, wd + 2), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + wd] += dcols[:, i, j]
    return dxp[:, :, 1:-1, 1:-1], dw, db


_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _pool_forward(x):
    """2x2 max pool over the last two axes.

    Returns the pooled array and one boolean winner mask per window
    position; ties go to the first position in row-major order.
    """
    q = [x[..., i::2, j::2] for i, j in _POOL_OFFSETS]
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    taken = q[0] == out
    masks = [taken]
    for k in (1, 2):
        m = q[k] == out
        m &= ~taken
        taken = taken | m
        masks.append(m)
    masks.append(~taken)
    return out, masks


def _pool_backward(dout, masks, x_shape):
    dx = np.empty(x_shape, dtype=dout.dtype)
    for m, (i, j) in zip(masks, _POOL_OFFSETS):
        np.multiply(dout, m, out=dx[..., i::2, j::2])
    return dx


@dataclass
class _Cache:
    shapes: list = field(default_factory=list)
    cols: list = field(default_factory=list)
    relu_masks: list = field(default_factory=list)
    pool_masks: list = field(default_factory=list)
    feat: np.ndarray | None = None
    pre_gap_shape: tuple | None = None


def preprocess(cutouts, model: RegressorModel) -> np.ndarray:
    """uint8 or [0, 1] cutouts ``(N, h, w)`` -> centered float batch ``(1, N, h, w)``."""
    x = np.asarray(cutouts)
    if x.ndim == 2:
        x = x[None]
    w, h = model.input_size
    if x.shape[1:] != (h, w):
        raise ValueError(f"expected cutouts of shape ({h}, {w}), got {x.shape[1:]}")
    if x.dtype == np.uint8:
        x = x.astype(model.dtype) / model.dtype.type(255)
    else:
        x = x.astype(model.dtype, copy=False)
    return (x - model.dtype.type(model.input_center))[None]


def forward_batch(model: RegressorModel, x: np.ndarray, cache: _Cache | None = None) -> np.ndarray:
    """Head outputs ``(N, 3)`` for a preprocessed batch ``(1, N, h, w)``.

    Pooling runs before the ReLU; the two commute for max pooling.
    """
    p = model.params
    a = x
    for i in (1, 2, 3):
        z, cols = _conv_forward(a, p[f"conv{i}_w"], p[f"conv{i}_b"])
        pooled, masks = _pool_forward(z)
        relu = pooled > 0
        pooled *= relu
        if cache is not None:
            cache.shapes.append(a.shape)
            cache.cols.append(cols)
            cache.pool_masks.append(masks)
            cache.relu_masks.append(relu)
        a = pooled
    feat = a.mean(axis=(2, 3)).T
    if cache is not None:
        cache.feat = feat
        cache.pre_gap_shape = a.shape
    return feat @ p["head_w"].T + p["head_b"]


def backward(model: RegressorModel, cache: _Cache, dout: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    grads = {"head_w": dout.T @ cache.feat, "head_b": dout.sum(axis=0)}
    c, n, h, w = cache.pre_gap_shape
    da = np.broadcast_to((p["head_w"].T @ dout.T)[:, :, None, None] / (h * w), (c, n, h, w))
    for i in (3, 2, 1):
        x_shape = cache.shapes[i - 1]
        dp = da * cache.relu_masks[i - 1]
        cn, nn_, ph, pw = dp.shape
        dz = _pool_backward(dp, cache.pool_masks[i - 1], (cn, nn_, 2 * ph, 2 * pw))
        da, dw, db = _conv_backward(dz, cache.cols[i - 1], x_shape, p[f"conv{i}_w"],
                                    need_dx=i > 1)
        grads[f"conv{i}_w"] = dw
        grads[f"conv{i}_b"] = db
    return grads


def activation_signature(model: RegressorModel, x: np.ndarray) -> tuple[np.ndarray, ...]:
    """ReLU sign patterns and pool winners; equal signatures mean the same linear piece."""
    cache = _Cache()
    forward_batch(model, x, cache)
    return tuple(cache.relu_masks) + tuple(m for ms in cache.pool_masks for m in ms)


def forward(model: RegressorModel, cutout: np.ndarray) -> Prediction:
    out = forward_batch(model, preprocess(cutout, model))[0]
    return Prediction(float(out[0]), float(out[1]), float(out[2]))


def predict_batch(model: RegressorModel, cutouts, batch_size: int = 32) -> np.ndarray:
    x = np.asarray(cutouts)
    outs = [forward_batch(model, preprocess(x[i:i + batch_size], model))
            for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0, 3), dtype=model.dtype)


def mse(pred, target) -> float:
    """Mean squared error over the three head components (and the batch)."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(d * d))


loss = mse


def loss_and_grads(model: RegressorModel, x: np.ndarray, y: np.ndarray):
    cache = _Cache()
    out = forward_batch(model, x, cache)
    diff = out - y
    value = float(np.mean(diff.astype(np.float64) ** 2))
    dout = (2.0 / diff.size) * diff
    return value, backward(model, cache, dout.astype(model.dtype))


# -- targets and decoding ----------------------------------------------------

def make_target(shift_mm: float, rotation_deg: float, rod: RodConfig) -> np.ndarray:
    e = angles.encode_angle(rotation_deg)
    return np.array([angles.normalize_shift(shift_mm, rod.shift_half_range), e.cos_v, e.sin_v])


def decode_prediction(pred: Sequence[float], rod: RodConfig) -> RodState:
    s_norm, cos_v, sin_v = (float(v) for v in pred)
    return RodState(angles.denormalize_shift(s_norm, rod.shift_half_range),
                    angles.decode_angle((cos_v, sin_v)))


def predict_rod_state(model: RegressorModel, cutout: np.ndarray, rod: RodConfig) -> RodState:
    return decode_prediction(forward(model, cutout), rod)


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    split: float = 0.8
    seed: int = 0
    input_center: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.split <= 1:
            raise ValueError("split must be in (0, 1]")


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[k] -= step.astype(params[k].dtype)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float


def train(cutouts, targets, cfg: TrainConfig = TrainConfig(), rod_id: RodId | None = None,
          model: RegressorModel | None = None) -> tuple[RegressorModel, list[EpochStats]]:
    """Fit one rod's regressor with MSE + Adam for exactly ``cfg.epochs`` passes.

    ``targets`` rows are ``(normalized shift, cos, sin)``. The split uses
    ``cfg.seed``; the epoch shuffles use a stream derived from it.
    """
    x_all = np.asarray(cutouts)
    y_all = np.asarray(targets, dtype=np.float64)
    n = len(x_all)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if y_all.shape != (n, 3):
        raise ValueError(f"targets must have shape ({n}, 3), got {y_all.shape}")
    if model is None:
        h, w = x_all.shape[1:3]
        model = init_model(rod_id or RodId(Team.BLACK, Role.GOAL), seed=cfg.seed,
                           input_size=(w, h), input_center=cfg.input_center)
    model.split_seed, model.split_ratio = cfg.seed, cfg.split
    tr, va = split_indices(n, cfg.split, cfg.seed)
    x_tr = preprocess(x_all[tr], model)
    y_tr = y_all[tr].astype(model.dtype)
    x_va = preprocess(x_all[va], model) if len(va) else None

    opt = Adam(model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng([cfg.seed, 1])
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(tr))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            value, grads = loss_and_grads(model, x_tr[:, b], y_tr[b])
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"{model.rod_id}: non-finite loss at epoch {epoch}, batch starting {start}")
            total += value * len(b)
            opt.step(model.params, grads)
        val = float("nan")
        if x_va is not None:
            val = mse(np.concatenate([forward_batch(model, x_va[:, i:i + 32])
                                      for i in range(0, len(va), 32)]), y_all[va])
        history.append(EpochStats(epoch, total / len(tr), val))
        log.debug("%s epoch %d train %.5f val %.5f", model.rod_id, epoch, total / len(tr), val)
    return model, history


# -- gradient check ------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    excluded_ties: int
    worst: tuple[str, tuple[int, ...]] | None


def gradient_check(model: RegressorModel, cutout: np.ndarray, target, epsilon: float = 1e-5,
                   n_params: int = 200, seed: int = 0,
                   names: Sequence[str] = PARAM_NAMES) -> GradCheckResult:
    """Compare backprop gradients with central differences on random parameters.

    Parameters whose +/- ``epsilon`` perturbation flips a ReLU or changes a
    max-pool winner sit on a kink and are skipped. The model must be float64.
    """
    if model.dtype != np.float64:
        raise ValueError("gradient check needs a float64 model")
    x = preprocess(cutout, model)
    y = np.asarray(target, dtype=np.float64).reshape(x.shape[0], 3)
    _, grads = loss_and_grads(model, x, y)
    base_sig = activation_signature(model, x)

    rng = np.random.default_rng(seed)
    sizes = [model.params[k].size for k in names]
    if n_params >= sum(sizes):
        picks_by_name = {k: np.arange(size) for k, size in zip(names, sizes)}
    else:
        # one parameter from every tensor, the rest uniformly without replacement
        offsets = np.cumsum([0] + sizes)
        first = [int(o + rng.integers(size)) for o, size in zip(offsets, sizes)]
        rest = np.setdiff1d(np.arange(offsets[-1]), first)
        chosen = np.concatenate([first, rng.choice(rest, max(0, n_params - len(first)),
                                                   replace=False)])
        picks_by_name = {k: chosen[(chosen >= lo) & (chosen < hi)] - lo
                         for k, lo, hi in zip(names, offsets, offsets[1:])}

    worst, worst_at, checked, excluded = 0.0, None, 0, 0
    for name in names:
        arr = model.params[name]
        flat = arr.reshape(-1)
        for j in picks_by_name[name]:
            old = flat[j]
            flat[j] = old + epsilon
            sig_p = activation_signature(model, x)
            lp = mse(forward_batch(model, x), y)
            flat[j] = old - epsilon
            sig_m = activation_signature(model, x)
            lm = mse(forward_batch(model, x), y)
            flat[j] = old
            if not all(np.array_equal(a, b) for a, b in zip(base_sig, sig_p)) or \
                    not all(np.array_equal(a, b) for a, b in zip(base_sig, sig_m)):
                excluded += 1
                continue
            numeric = (lp - lm) / (2 * epsilon)
            analytic = float(grads[name].reshape(-1)[j])
            denom = max(abs(numeric), abs(analytic))
            rel = 0.0 if denom == 0 else abs(numeric - analytic) / denom
            checked += 1
            if rel > worst:
                worst, worst_at = rel, (name, np.unravel_index(j, arr.shape))
    return GradCheckResult(worst, checked, excluded, worst_at)


# -- persistence ---------------------------------------------------------------

_HEADER = struct.Struct("<4sHBBBHHQddH")


def _team_code(rid: RodId) -> tuple[int, int]:
    return list(Team).index(rid.team), list(Role).index(rid.role)


def model_to_bytes(model: RegressorModel) -> bytes:
    """Little-endian: header, per-tensor (name, shape) table, raw parameters."""
    dcode = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}[model.dtype]
    team, role = _team_code(model.rod_id)
    w, h = model.input_size
    parts = [_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, dcode, team, role, w, h,
                          model.split_seed, model.split_ratio, model.input_center,
                          len(PARAM_NAMES))]
    for name in PARAM_NAMES:
        arr = model.params[name]
        enc = name.encode("ascii")
        parts.append(struct.pack("<BB", len(enc), arr.ndim) + enc)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for name in PARAM_NAMES:
        parts.append(model.params[name].astype(model.dtype.newbyteorder("<"), copy=False).tobytes())
    return b"".join(parts)


def model_from_bytes(data: bytes) -> RegressorModel:
    if len(data) < _HEADER.size:
        raise ValueError("model file truncated")
    magic, version, dcode, team, role, w, h, seed, ratio, center, count = \
        _HEADER.unpack_from(data, 0)
    if magic != MODEL_MAGIC:
        raise ValueError("not a regressor model file")
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    dtype = np.dtype({4: "<f4", 8: "<f8"}[dcode])
    off = _HEADER.size
    table = []
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        name = data[off:off + nlen].decode("ascii")
        off += nlen
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        table.append((name, shape))
    params = {}
    for name, shape in table:
        size = int(np.prod(shape)) * dtype.itemsize
        if off + size > len(data):
            raise ValueError("model file truncated")
        params[name] = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)),
                                     offset=off).reshape(shape).astype(dtype.newbyteorder("="))
        off += size
    if off != len(data):
        raise ValueError("trailing bytes in model file")
    if tuple(params) != PARAM_NAMES or params["head_w"].shape[0] != 3:
        raise ValueError("model file does not describe the 3-output regressor")
    return RegressorModel(params, RodId(list(Team)[team], list(Role)[role]), (w, h),
                          float(center), int(seed), float(ratio))


def model_filename(rid: RodId) -> str:
    return f"{rid.name}.fsrm"


def save_model(model: RegressorModel, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path: str | Path) -> RegressorModel:
    return model_from_bytes(Path(path).read_bytes())
