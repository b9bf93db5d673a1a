"""The nowcasting network: stacked convolutional recurrent layers separated by
batch normalization, then a sigmoid Conv3D head, unrolled over three input
frames. One model is trained per forecast horizon.

Tensor layout is (batch, time, channel, rows, cols).
"""
from __future__ import annotations

import copy
import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .cells import CELL_TYPES, CellState, CellWeights, cell_backward, cell_forward
from .gridio import (
    HOUR,
    N_TIME_FEATURES,
    GridFrame,
    NormalizationSpec,
    SampleWindow,
    denormalize,
    encode_time_features,
    normalize,
)
from .tensor import ConvKernel, conv3d_same, conv3d_same_backward, glorot_uniform, sigmoid

N_STEPS = 3
FULL_INPUT_CHANNELS = 1 + N_TIME_FEATURES


class DivergenceError(FloatingPointError):
    """A non-finite activation appeared during a forward pass."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    rows: int
    cols: int
    horizon: int = 1
    layer_channels: tuple = (128, 128, 64)
    kernel: tuple = (5, 5)
    cell_type: str = "convlstm"
    activation: str = "relu"
    head_kernel: tuple = (3, 3, 3)
    input_channels: int = FULL_INPUT_CHANNELS
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "layer_channels", tuple(int(c) for c in self.layer_channels))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "head_kernel", tuple(int(k) for k in self.head_kernel))
        if self.horizon not in (1, 2, 3):
            raise ValueError(f"horizon must be 1, 2 or 3, got {self.horizon}")
        if not self.layer_channels:
            raise ValueError("layer_channels must not be empty")
        if any(k % 2 == 0 for k in self.kernel + self.head_kernel):
            raise ValueError("kernel sizes must be odd")
        if self.cell_type not in CELL_TYPES:
            raise ValueError(f"cell_type must be one of {CELL_TYPES}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError("activation must be 'relu' or 'tanh'")
        if self.input_channels not in (1, FULL_INPUT_CHANNELS):
            raise ValueError(f"input_channels must be 1 or {FULL_INPUT_CHANNELS}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid shape must be positive")

    @property
    def shape(self) -> tuple:
        return (self.rows, self.cols)


@dataclass
class BatchNorm:
    """Per-channel normalization over (batch, time, rows, cols)."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9

    @classmethod
    def initialize(cls, channels, dtype=np.float32, eps=1e-5, momentum=0.9):
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), eps, momentum)

    def forward(self, x, train: bool):
        axes = (0, 1, 3, 4)
        shape = (1, 1, -1, 1, 1)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean[...] = m * self.running_mean + (1 - m) * mean
            self.running_var[...] = m * self.running_var + (1 - m) * var
        else:
            # inference: one fused affine pass
            scale = (self.gamma / np.sqrt(self.running_var + self.eps)).astype(x.dtype)
            shift = (self.beta - self.running_mean * scale).astype(x.dtype)
            y = x * scale.reshape(shape)
            y += shift.reshape(shape)
            return y, None
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mean.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
        y = xhat * self.gamma.reshape(shape) + self.beta.reshape(shape)
        return y, (xhat, inv_std)

    def backward(self, dy, cache):
        xhat, inv_std = cache
        axes = (0, 1, 3, 4)
        shape = (1, 1, -1, 1, 1)
        n = dy.size // dy.shape[2]
        dgamma = (dy * xhat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        dxhat = dy * self.gamma.reshape(shape)
        dx = (inv_std.reshape(shape) / n) * (
            n * dxhat
            - dxhat.sum(axis=axes).reshape(shape)
            - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
        )
        return dx, dgamma, dbeta


@dataclass
class NowcastModel:
    config: NetworkConfig
    cells: list
    norms: list
    head: ConvKernel
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)
    metadata: dict = field(default_factory=dict)
    cache: object = field(default=None, repr=False, compare=False)

    @classmethod
    def initialize(cls, config: NetworkConfig, seed: int = 0, dtype=np.float32,
                   normalization: NormalizationSpec | None = None) -> "NowcastModel":
        rng = np.random.default_rng(seed)
        cells, norms = [], []
        cin = config.input_channels
        for k, ch in enumerate(config.layer_channels):
            cells.append(CellWeights.initialize(config.cell_type, cin, ch, config.kernel, rng, dtype))
            if k < len(config.layer_channels) - 1:
                norms.append(BatchNorm.initialize(ch, dtype, config.bn_eps, config.bn_momentum))
            cin = ch
        head = ConvKernel(glorot_uniform(rng, (1, cin) + config.head_kernel, dtype), np.zeros(1, dtype))
        return cls(config, cells, norms, head, normalization or NormalizationSpec(), {"seed": seed})

    @property
    def dtype(self):
        return self.head.weights.dtype

    def parameters(self) -> dict:
        """Trainable arrays by name, in declaration order (live references)."""
        p = {}
        for k, cell in enumerate(self.cells):
            for name, arr in cell.params().items():
                p[f"layer{k}.{name}"] = arr
            if k < len(self.norms):
                p[f"bn{k}.gamma"] = self.norms[k].gamma
                p[f"bn{k}.beta"] = self.norms[k].beta
        p["head.w"] = self.head.weights
        p["head.b"] = self.head.bias
        return p

    def buffers(self) -> dict:
        b = {}
        for k, bn in enumerate(self.norms):
            b[f"bn{k}.running_mean"] = bn.running_mean
            b[f"bn{k}.running_var"] = bn.running_var
        return b

    def state_dict(self) -> dict:
        return {**self.parameters(), **self.buffers()}

    def load_state(self, state: dict):
        current = self.state_dict()
        for name, arr in current.items():
            if name not in state:
                raise CheckpointError(f"missing parameter {name}")
            if state[name].shape != arr.shape:
                raise CheckpointError(f"parameter {name}: shape {state[name].shape} != {arr.shape}")
            arr[...] = state[name]

    def copy_state(self) -> dict:
        return {k: v.copy() for k, v in self.state_dict().items()}

    def astype(self, dtype) -> "NowcastModel":
        m = copy.deepcopy(self)
        m.cache = None
        m.cells = [c.astype(dtype) for c in m.cells]
        m.norms = [BatchNorm(*(a.astype(dtype) for a in (bn.gamma, bn.beta, bn.running_mean, bn.running_var)),
                             bn.eps, bn.momentum) for bn in m.norms]
        m.head = ConvKernel(m.head.weights.astype(dtype), m.head.bias.astype(dtype))
        return m


# ---------------------------------------------------------------------------
# input assembly


def assemble_input(window, spec: NormalizationSpec = NormalizationSpec(),
                   input_channels: int = FULL_INPUT_CHANNELS, dtype=np.float32) -> np.ndarray:
    """(3, C, rows, cols): normalized DSR in channel 0, then the 36 time
    features of the prediction hour as constant planes when C == 37.

    ``window`` is a :class:`SampleWindow` or three consecutive GridFrames.
    """
    frames = window.inputs if isinstance(window, SampleWindow) else tuple(window)
    if len(frames) != N_STEPS:
        raise ValueError(f"need {N_STEPS} input frames, got {len(frames)}")
    rows, cols = frames[0].shape
    x = np.zeros((N_STEPS, input_channels, rows, cols), dtype=dtype)
    for t, fr in enumerate(frames):
        if fr.shape != (rows, cols):
            raise ValueError("input frames differ in shape")
        x[t, 0] = normalize(fr, spec)
    if input_channels == FULL_INPUT_CHANNELS:
        feats = encode_time_features(frames[-1].timestamp)
        x[:, 1:] = feats.astype(dtype)[None, :, None, None]
    elif input_channels != 1:
        raise ValueError(f"input_channels must be 1 or {FULL_INPUT_CHANNELS}")
    return x


def assemble_targets(window: SampleWindow, horizon: int, spec: NormalizationSpec = NormalizationSpec(),
                     dtype=np.float32):
    """Normalized target sequence (3, 1, rows, cols) and its validity mask."""
    frames = window.target_sequence(horizon)
    y = np.stack([normalize(f, spec) for f in frames])[:, None].astype(dtype)
    mask = np.stack([~np.isnan(f.values) for f in frames])[:, None].astype(dtype)
    return y, mask


# ---------------------------------------------------------------------------
# forward / backward


def _check_finite(arr, where):
    if not np.isfinite(arr).all():
        raise DivergenceError(f"non-finite activation in {where}")


def forward(model: NowcastModel, x: np.ndarray, mode: str = "infer") -> np.ndarray:
    """Run the network on ``x`` of shape (B, 3, C, rows, cols).

    Returns sigmoid outputs (B, 3, 1, rows, cols). In ``"train"`` mode batch
    norm uses batch statistics (updating running ones) and the
    intermediates needed by :func:`backward` are kept on ``model.cache``.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    cfg = model.config
    x = np.asarray(x)
    if x.ndim != 5 or x.shape[1] != N_STEPS or x.shape[2] != cfg.input_channels or x.shape[3:] != cfg.shape:
        raise ValueError(
            f"input shape {x.shape} does not match (B, {N_STEPS}, {cfg.input_channels}, {cfg.rows}, {cfg.cols})"
        )
    train = mode == "train"
    x = x.astype(model.dtype, copy=False)
    B = x.shape[0]
    seq = x
    layer_caches = []
    for k, w in enumerate(model.cells):
        state = CellState.zeros(cfg.cell_type, B, w.hidden_channels, cfg.rows, cfg.cols, model.dtype)
        hs = np.empty((B, N_STEPS, w.hidden_channels, cfg.rows, cfg.cols), dtype=model.dtype)
        steps = []
        for t in range(N_STEPS):
            state, c = cell_forward(seq[:, t], state, w, cfg.activation, keep_cache=train)
            hs[:, t] = state.H
            steps.append(c)
        _check_finite(hs, f"recurrent layer {k}")
        bn_cache = None
        if k < len(model.norms):
            seq, bn_cache = model.norms[k].forward(hs, train)
        else:
            seq = hs
        layer_caches.append((steps, bn_cache))
        del hs
    # head: (B, T, C, H, W) -> (B, C, T, H, W)
    hin = np.ascontiguousarray(seq.transpose(0, 2, 1, 3, 4))
    logits = conv3d_same(hin, model.head)
    out = sigmoid(logits, out=logits).transpose(0, 2, 1, 3, 4)
    _check_finite(out, "output head")
    model.cache = (layer_caches, hin, out) if train else None
    return np.ascontiguousarray(out)


def backward(model: NowcastModel, grad_out: np.ndarray, need_input: bool = False):
    """Gradients of a scalar loss given ``dL/d(output)`` from the last
    train-mode :func:`forward`. Returns ``(param_grads, input_grad)`` with
    ``param_grads`` keyed like :meth:`NowcastModel.parameters`.
    """
    if model.cache is None:
        raise ValueError("no forward cache; call forward(..., mode='train') first")
    layer_caches, hin, out = model.cache
    grads = {}
    g = np.asarray(grad_out, dtype=model.dtype).transpose(0, 2, 1, 3, 4)  # (B,1,T,H,W)
    dlogits = g * (out.transpose(0, 2, 1, 3, 4) * (1 - out.transpose(0, 2, 1, 3, 4)))
    dhin, grads["head.w"], grads["head.b"] = conv3d_same_backward(dlogits, hin, model.head)
    dseq = np.ascontiguousarray(dhin.transpose(0, 2, 1, 3, 4))
    dx = None
    for k in range(len(model.cells) - 1, -1, -1):
        w = model.cells[k]
        steps, bn_cache = layer_caches[k]
        if bn_cache is not None:
            dseq, grads[f"bn{k}.gamma"], grads[f"bn{k}.beta"] = model.norms[k].backward(dseq, bn_cache)
        wants_input = k > 0 or need_input
        din = np.empty(dseq.shape[:2] + (w.input_channels,) + dseq.shape[3:], dtype=dseq.dtype) if wants_input else None
        acc = {name: np.zeros_like(arr) for name, arr in w.params().items()}
        dstate = None
        for t in range(N_STEPS - 1, -1, -1):
            dH = dseq[:, t] if dstate is None else dseq[:, t] + dstate.H
            dC = None if dstate is None else dstate.C
            dxt, dstate, gw = cell_backward(steps[t], w, dH, dC, need_input=wants_input)
            for name in acc:
                acc[name] += gw[name]
            if wants_input:
                din[:, t] = dxt
        for name, val in acc.items():
            grads[f"layer{k}.{name}"] = val
        dseq = din
        if k == 0:
            dx = din
    ordered = {name: grads[name] for name in model.parameters()}
    return ordered, dx


# ---------------------------------------------------------------------------
# prediction


def predict_normalized(model: NowcastModel, x: np.ndarray) -> np.ndarray:
    """Last output frame (the horizon forecast) in [0, 1]: (B, rows, cols)."""
    return forward(model, x, "infer")[:, -1, 0]


def predict_windows(model: NowcastModel, windows, batch_size: int = 8) -> np.ndarray:
    """Horizon forecasts in W/m^2 for each window: (len(windows), rows, cols)."""
    cfg = model.config
    out = np.empty((len(windows),) + cfg.shape, dtype=np.float32)
    for s in range(0, len(windows), batch_size):
        chunk = windows[s:s + batch_size]
        x = np.stack([assemble_input(w, model.normalization, cfg.input_channels, model.dtype) for w in chunk])
        out[s:s + len(chunk)] = denormalize(predict_normalized(model, x), model.normalization)
    return out


def _as_horizon_map(models) -> dict:
    if isinstance(models, dict):
        mapping = dict(models)
    else:
        mapping = {m.config.horizon: m for m in models}
    missing = [h for h in (1, 2, 3) if h not in mapping]
    if missing:
        raise ValueError(f"missing model for horizon {', '.join(map(str, missing))}")
    for h, m in mapping.items():
        if m.config.horizon != h:
            raise ValueError(f"model registered for horizon {h} was trained for {m.config.horizon}")
    shapes = {m.config.shape for m in mapping.values()}
    if len(shapes) != 1:
        raise ValueError(f"horizon models disagree on grid shape: {sorted(shapes)}")
    return mapping


def predict_window(models, window) -> list:
    """Forecast frames for t+1, t+2, t+3 in W/m^2.

    ``models`` is a dict {horizon: model} or an iterable of three models;
    ``window`` a :class:`SampleWindow` or three consecutive GridFrames.
    """
    mapping = _as_horizon_map(models)
    frames = window.inputs if isinstance(window, SampleWindow) else tuple(window)
    last = frames[-1]
    preds = []
    for h in (1, 2, 3):
        m = mapping[h]
        if last.shape != m.config.shape:
            raise ValueError(f"frame shape {last.shape} does not match model grid {m.config.shape}")
        x = assemble_input(frames, m.normalization, m.config.input_channels, m.dtype)[None]
        y = predict_normalized(m, x)[0]
        preds.append(GridFrame(last.timestamp + h * HOUR, denormalize(y, m.normalization), last.extent))
    return preds


# ---------------------------------------------------------------------------
# checkpoint: "NWCM" | u16 version | u32 len | JSON header | u32 n | params | u32 crc32

CHECKPOINT_MAGIC = b"NWCM"
CHECKPOINT_VERSION = 1


def _config_to_json(model: NowcastModel) -> dict:
    return {
        "config": asdict(model.config),
        "normalization": asdict(model.normalization),
        "metadata": model.metadata,
    }


def encode_params(magic: bytes, header: dict, params: dict) -> bytes:
    """Shared container: magic, version, JSON header, named f32 arrays, CRC-32."""
    head = json.dumps(header, sort_keys=True).encode()
    parts = [magic, struct.pack("<HI", CHECKPOINT_VERSION, len(head)), head, struct.pack("<I", len(params))]
    for name, arr in params.items():
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_params(magic: bytes, data: bytes):
    if len(data) < 4 or data[:4] != magic:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {magic!r}")
    if len(data) < 10:
        raise CheckpointError("checksum mismatch: file too short")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch: checkpoint truncated or corrupted")
    off = 10
    header = json.loads(body[off:off + hlen])
    off += hlen
    (n,) = struct.unpack_from("<I", body, off)
    off += 4
    params = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", body, off)
        name = body[off + 2:off + 2 + nl].decode()
        off += 2 + nl
        (ndim,) = struct.unpack_from("<B", body, off)
        shape = struct.unpack_from(f"<{ndim}I", body, off + 1)
        off += 1 + 4 * ndim
        count = int(np.prod(shape))
        params[name] = np.frombuffer(body, "<f4", count, off).reshape(shape).astype(np.float32)
        off += 4 * count
    if off != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return header, params


def _write(blob, sink):
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            fh.write(blob)
    else:
        sink.write(blob)
    return len(blob)


def _read(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    return source.read()


def save_model(model: NowcastModel, sink) -> int:
    """Serialize to a path or binary file object; returns bytes written."""
    return _write(encode_params(CHECKPOINT_MAGIC, _config_to_json(model), model.state_dict()), sink)


def load_model(source, expected_shape: tuple | None = None) -> NowcastModel:
    header, params = decode_params(CHECKPOINT_MAGIC, _read(source))
    cfg = header["config"]
    config = NetworkConfig(**cfg)
    if expected_shape is not None and tuple(expected_shape) != config.shape:
        raise CheckpointError(
            f"checkpoint grid {config.rows}x{config.cols} does not match expected {expected_shape[0]}x{expected_shape[1]}"
        )
    model = NowcastModel.initialize(config, seed=0, normalization=NormalizationSpec(**header["normalization"]))
    model.load_state(params)
    model.metadata = header.get("metadata", {})
    return model
