"""Stacked GRU encoder with an embedding (or classification) head.

Cell equations, per layer and timestep (``*`` is elementwise)::

    z  = sigmoid(x W_z + h U_z + b_z)          update gate
    r  = sigmoid(x W_r + h U_r + b_r)          reset gate
    c  = tanh(x W_c + (r * h) U_c + b_c)       candidate
    h' = z * h + (1 - z) * c

Gate blocks are packed column-wise in ``[z | r | c]`` order.  The top layer's
final hidden state goes through a linear head; in embedding mode the result
is projected onto the unit sphere.
"""

from __future__ import annotations

import io
import logging
import math
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import (ChecksumError, ConfigError, FileFormatError, NumericError, ShapeError,
                     StateError, TruncatedFileError, VersionError)
from .preprocessing import FEATURE_DIM, FeatureStats, FeatureWindow

log = logging.getLogger(__name__)

MODEL_MAGIC = b"MKEY"
MODEL_VERSION = 1
MODES = ("embedding", "classification")

# hyperparameter search space; values outside only produce a warning
SEARCH_SPACE = {
    "gru_layers": (1, 4),
    "gru_layer_size": (100, 500),
    "gru_dropout": (0.0, 0.4),
    "embedding_dim": (32, 320),
}


@dataclass(frozen=True)
class EncoderConfig:
    gru_layers: int = 3
    gru_layer_size: int = 450
    gru_dropout: float = 0.28
    embedding_dim: int = 192
    input_dim: int = FEATURE_DIM
    window_len: int = 500
    mode: str = "embedding"
    num_classes: int = 0

    @property
    def output_dim(self) -> int:
        return self.embedding_dim if self.mode == "embedding" else self.num_classes

    def validate(self) -> "EncoderConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("gru_layers", "gru_layer_size", "input_dim", "window_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.mode == "embedding" and self.embedding_dim < 1:
            raise ConfigError(f"embedding_dim must be >= 1, got {self.embedding_dim}")
        if self.mode == "classification" and self.num_classes < 2:
            raise ConfigError(f"classification needs num_classes >= 2, got {self.num_classes}")
        if not 0.0 <= self.gru_dropout < 1.0:
            raise ConfigError(f"gru_dropout must be in [0, 1), got {self.gru_dropout}")
        for name, (lo, hi) in SEARCH_SPACE.items():
            if name == "embedding_dim" and self.mode != "embedding":
                continue
            value = getattr(self, name)
            if not lo <= value <= hi:
                log.warning("%s=%s is outside the search space [%s, %s]", name, value, lo, hi)
        return self

    def to_dict(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "EncoderConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in d:
                raw = d[f.name]
                kwargs[f.name] = raw if f.type == "str" else (float(raw) if f.type == "float" else int(raw))
        return cls(**kwargs)


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in their declared (serialization) order."""
    h = config.gru_layer_size
    shapes: dict[str, tuple[int, ...]] = {}
    for layer in range(config.gru_layers):
        d_in = config.input_dim if layer == 0 else h
        shapes[f"gru{layer}.W_in"] = (d_in, 3 * h)
        shapes[f"gru{layer}.W_rec"] = (h, 3 * h)
        shapes[f"gru{layer}.bias"] = (3 * h,)
    shapes["head.W"] = (h, config.output_dim)
    shapes["head.bias"] = (config.output_dim,)
    return shapes


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class _LayerCache:
    x: np.ndarray        # (B, T, D) layer input (after dropout)
    h: np.ndarray        # (B, T+1, H) hidden states, h[:, 0] = 0
    z: np.ndarray
    r: np.ndarray
    c: np.ndarray
    mask: np.ndarray | None  # dropout mask applied to x (already scaled)


@dataclass
class ForwardCache:
    x_std: np.ndarray
    layers: list[_LayerCache]
    pre_head: np.ndarray
    raw_out: np.ndarray
    out: np.ndarray


@dataclass(eq=False)
class EncoderModel:
    config: EncoderConfig
    params: dict[str, np.ndarray]
    stats: FeatureStats = field(default_factory=FeatureStats.identity)
    classes: list[str] = field(default_factory=list)
    _cache: ForwardCache | None = field(default=None, repr=False)

    @property
    def dtype(self) -> np.dtype:
        return self.params["head.W"].dtype

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.config, {k: v.copy() for k, v in self.params.items()},
                            self.stats, list(self.classes))

    def astype(self, dtype) -> "EncoderModel":
        return EncoderModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()},
                            self.stats, list(self.classes))

    # -- forward -----------------------------------------------------------

    def standardize(self, x: np.ndarray) -> np.ndarray:
        mean = self.stats.mean.astype(self.dtype)
        std = self.stats.std.astype(self.dtype)
        return (np.asarray(x, dtype=self.dtype) - mean) / std

    def forward(self, x, train_mode: bool = False, rng: np.random.Generator | None = None,
                keep_cache: bool | None = None) -> np.ndarray:
        """Encode a batch of windows.

        ``x`` is a ``(B, T, input_dim)`` array or a list of FeatureWindow.
        Returns ``(B, n)`` unit vectors in embedding mode, logits otherwise.
        The activations needed by :meth:`backward` are kept when
        ``keep_cache`` is set (default: in train mode).
        """
        if isinstance(x, (list, tuple)) and x and isinstance(x[0], FeatureWindow):
            x = np.stack([w.values for w in x])
        x = np.asarray(x)
        cfg = self.config
        if x.ndim != 3 or x.shape[2] != cfg.input_dim:
            raise ShapeError(f"expected (B, T, {cfg.input_dim}) windows, got {x.shape}")
        if keep_cache is None:
            keep_cache = train_mode
        if train_mode and cfg.gru_dropout > 0 and rng is None:
            raise StateError("train-mode forward with dropout needs an rng")
        dt = self.dtype
        seq = self.standardize(x)
        x_std = seq
        batch, steps, _ = seq.shape
        hsize = cfg.gru_layer_size
        caches = []
        for layer in range(cfg.gru_layers):
            mask = None
            if layer > 0 and train_mode and cfg.gru_dropout > 0:
                keep = 1.0 - cfg.gru_dropout
                mask = (rng.random(seq.shape) < keep).astype(dt) / dt.type(keep)
                seq = seq * mask
            W = self.params[f"gru{layer}.W_in"]
            U = self.params[f"gru{layer}.W_rec"]
            b = self.params[f"gru{layer}.bias"]
            xw = seq @ W + b  # (B, T, 3H)
            hs = np.zeros((batch, steps + 1, hsize), dtype=dt)
            if keep_cache:
                zs = np.empty((batch, steps, hsize), dtype=dt)
                rs = np.empty_like(zs)
                cs = np.empty_like(zs)
            U_zr, U_c = U[:, :2 * hsize], U[:, 2 * hsize:]
            h = hs[:, 0]
            for t in range(steps):
                a = xw[:, t]
                zr = _sigmoid(a[:, :2 * hsize] + h @ U_zr)
                z, r = zr[:, :hsize], zr[:, hsize:]
                c = np.tanh(a[:, 2 * hsize:] + (r * h) @ U_c)
                h = z * h + (1.0 - z) * c
                hs[:, t + 1] = h
                if keep_cache:
                    zs[:, t], rs[:, t], cs[:, t] = z, r, c
            if not np.isfinite(h).all():
                raise NumericError(f"non-finite activations in GRU layer {layer}")
            if keep_cache:
                caches.append(_LayerCache(seq, hs, zs, rs, cs, mask))
            seq = hs[:, 1:]
        last = seq[:, -1]
        raw = last @ self.params["head.W"] + self.params["head.bias"]
        if not np.isfinite(raw).all():
            raise NumericError("non-finite activations in head layer")
        out = raw
        if cfg.mode == "embedding":
            norm = np.linalg.norm(raw, axis=1, keepdims=True)
            out = raw / np.maximum(norm, np.finfo(dt).tiny)
        if keep_cache:
            self._cache = ForwardCache(x_std, caches, last, raw, out)
        return out

    # -- backward ----------------------------------------------------------

    def backward(self, grad_out: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Reverse-mode gradients for the last cached forward pass.

        Returns ``(param_grads, input_grad)`` where ``input_grad`` is taken
        with respect to the raw (unstandardized) input windows.
        """
        cache = self._cache
        if cache is None:
            raise StateError("backward called without a cached forward pass")
        cfg = self.config
        dt = self.dtype
        g = np.asarray(grad_out, dtype=dt)
        if g.shape != cache.out.shape:
            raise ShapeError(f"upstream gradient shape {g.shape} != output shape {cache.out.shape}")
        grads: dict[str, np.ndarray] = {}
        if cfg.mode == "embedding":
            norm = np.linalg.norm(cache.raw_out, axis=1, keepdims=True)
            zhat = cache.out
            g = (g - zhat * np.sum(zhat * g, axis=1, keepdims=True)) / norm
        grads["head.W"] = cache.pre_head.T @ g
        grads["head.bias"] = g.sum(axis=0)
        d_last = g @ self.params["head.W"].T

        hsize = cfg.gru_layer_size
        batch, steps, _ = cache.x_std.shape
        d_seq = np.zeros((batch, steps, hsize), dtype=dt)
        d_seq[:, -1] = d_last
        for layer in reversed(range(cfg.gru_layers)):
            lc = cache.layers[layer]
            W = self.params[f"gru{layer}.W_in"]
            U = self.params[f"gru{layer}.W_rec"]
            U_zr, U_c = U[:, :2 * hsize], U[:, 2 * hsize:]
            dA = np.empty((batch, steps, 3 * hsize), dtype=dt)
            dU = np.zeros_like(U)
            carry = np.zeros((batch, hsize), dtype=dt)
            for t in reversed(range(steps)):
                h_prev = lc.h[:, t]
                z, r, c = lc.z[:, t], lc.r[:, t], lc.c[:, t]
                dh = d_seq[:, t] + carry
                dz = dh * (h_prev - c)
                dac = dh * (1.0 - z) * (1.0 - c * c)
                rh = r * h_prev
                dU[:, 2 * hsize:] += rh.T @ dac
                d_rh = dac @ U_c.T
                dar = d_rh * h_prev * r * (1.0 - r)
                daz = dz * z * (1.0 - z)
                da_zr = np.concatenate([daz, dar], axis=1)
                dU[:, :2 * hsize] += h_prev.T @ da_zr
                carry = dh * z + d_rh * r + da_zr @ U_zr.T
                dA[:, t, :2 * hsize] = da_zr
                dA[:, t, 2 * hsize:] = dac
            flat_dA = dA.reshape(-1, 3 * hsize)
            grads[f"gru{layer}.W_in"] = lc.x.reshape(-1, lc.x.shape[2]).T @ flat_dA
            grads[f"gru{layer}.W_rec"] = dU
            grads[f"gru{layer}.bias"] = flat_dA.sum(axis=0)
            d_x = dA @ W.T
            if lc.mask is not None:
                d_x = d_x * lc.mask
            d_seq = d_x
        d_input = d_seq / self.stats.std.astype(dt)
        ordered = {name: grads[name] for name in self.params}
        return ordered, d_input

    # -- batched inference -------------------------------------------------

    def embed(self, windows: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        """Inference over many windows in fixed-size chunks (no cache kept)."""
        windows = np.asarray(windows)
        if len(windows) == 0:
            return np.empty((0, self.config.output_dim), dtype=self.dtype)
        outs = [self.forward(windows[i:i + batch_size], keep_cache=False)
                for i in range(0, len(windows), batch_size)]
        return np.concatenate(outs, axis=0)


def init_encoder(config: EncoderConfig, seed: int, dtype=np.float32,
                 stats: FeatureStats | None = None, classes: list[str] | None = None) -> EncoderModel:
    """Uniform(-1/sqrt(h), 1/sqrt(h)) initialization, deterministic in (config, seed)."""
    config.validate()
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(config.gru_layer_size)
    params = {name: rng.uniform(-bound, bound, size=shape).astype(dtype)
              for name, shape in param_shapes(config).items()}
    return EncoderModel(config, params, stats or FeatureStats.identity(config.input_dim),
                        list(classes or []))


def forward(model: EncoderModel, batch, train_mode: bool = False,
            rng: np.random.Generator | None = None) -> np.ndarray:
    return model.forward(batch, train_mode=train_mode, rng=rng)


def backward(model: EncoderModel, grad_out: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    return model.backward(grad_out)


# ----------------------------------------------------------------------------
# model file: MKEY | u16 version | u32 header len | header | f32 tensors | crc32


def _encode_header(model: EncoderModel) -> bytes:
    items = dict(model.config.to_dict())
    items["stats.mean"] = ",".join(repr(float(v)) for v in model.stats.mean)
    items["stats.std"] = ",".join(repr(float(v)) for v in model.stats.std)
    items["classes"] = ",".join(model.classes)
    return "\n".join(f"{k}={v}" for k, v in items.items()).encode("utf-8")


def model_to_bytes(model: EncoderModel) -> bytes:
    header = _encode_header(model)
    body = io.BytesIO()
    body.write(MODEL_MAGIC)
    body.write(struct.pack("<HI", MODEL_VERSION, len(header)))
    body.write(header)
    for name in param_shapes(model.config):
        body.write(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())
    payload = body.getvalue()
    return payload + struct.pack("<I", zlib.crc32(payload))


def model_from_bytes(data: bytes) -> tuple[EncoderModel, int]:
    """Decode a model; returns the model and the number of bytes consumed."""
    if len(data) < 10:
        raise TruncatedFileError("model file is truncated")
    if data[:4] != MODEL_MAGIC:
        raise FileFormatError("not a model file (bad magic)")
    version, header_len = struct.unpack_from("<HI", data, 4)
    if version > MODEL_VERSION:
        raise VersionError(version, MODEL_VERSION)
    pos = 10
    if len(data) < pos + header_len:
        raise TruncatedFileError("model file is truncated in header")
    text = data[pos:pos + header_len].decode("utf-8")
    pos += header_len
    meta = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
    config = EncoderConfig.from_dict(meta)
    shapes = param_shapes(config)
    nbytes = 4 * sum(int(np.prod(s)) for s in shapes.values())
    end = pos + nbytes
    if len(data) < end + 4:
        raise TruncatedFileError("model file is truncated in parameters")
    (crc,) = struct.unpack_from("<I", data, end)
    if zlib.crc32(data[:end]) != crc:
        raise ChecksumError("model file checksum mismatch")
    params = {}
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count

    def floats(key):
        return np.array([float(v) for v in meta[key].split(",")]) if meta.get(key) else None

    mean, std = floats("stats.mean"), floats("stats.std")
    stats = FeatureStats(mean, std) if mean is not None else FeatureStats.identity(config.input_dim)
    classes = [c for c in meta.get("classes", "").split(",") if c]
    return EncoderModel(config, params, stats, classes), end + 4


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model: EncoderModel, path: str | Path) -> None:
    atomic_write(path, model_to_bytes(model))


def load_model(path: str | Path) -> EncoderModel:
    model, _ = model_from_bytes(Path(path).read_bytes())
    return model


def with_stats(model: EncoderModel, stats: FeatureStats) -> EncoderModel:
    return EncoderModel(model.config, model.params, stats, list(model.classes))


def reconfigure(config: EncoderConfig, **changes) -> EncoderConfig:
    return replace(config, **changes)
