"""Balanced batch sampling, Adam, and the epoch loops for both model kinds.

``fit`` trains an embedding model with a metric loss and selects the epoch
with the best validation sequence accuracy; ``fit_classifier`` trains the
classification baseline on enrollment data with a held-back tail.
"""

from __future__ import annotations

import logging
import struct
import time
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .encoder import (EncoderConfig, EncoderModel, atomic_write, init_encoder, model_from_bytes,
                      model_to_bytes)
from .errors import (ChecksumError, ConfigError, DegenerateDataError, NumericError, ShapeError,
                     TruncatedFileError)
from .losses import LOSS_PARAMS, LossConfig, ProxyBank, compute_loss
from .preprocessing import FeatureSequence, compute_stats, window_array, window_offsets

log = logging.getLogger(__name__)

LEARNING_RATE_RANGE = (1e-6, 0.1)


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    learning_rate: float = 2e-5
    users_per_batch: int = 9
    windows_per_user: int = 4
    epochs_min: int = 100
    patience: int = 20
    max_epochs: int = 1000
    seed: int = 0
    batches_per_epoch: int | None = None
    train_stride: int = 1
    target_fps: float = 15.0
    # validation during training (thinned strides)
    val_use_minutes: float = 5.0
    val_stride: int | None = None  # frames; default one second
    k: int = 50
    # classifier baseline hold-out
    holdout_minutes: float = 5.0
    holdout_fraction: float = 0.2
    train_users: tuple[str, ...] = ()
    val_users: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        lo, hi = LEARNING_RATE_RANGE
        if not lo <= self.learning_rate <= hi:
            raise ConfigError(f"learning_rate={self.learning_rate} outside [{lo}, {hi}]")
        for name in ("users_per_batch", "windows_per_user", "max_epochs", "train_stride", "k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs_min < 1 or self.patience < 0:
            raise ConfigError("epochs_min must be >= 1 and patience >= 0")
        overlap = set(self.train_users) & set(self.val_users)
        if overlap:
            raise ConfigError(f"train_users and val_users overlap: {sorted(overlap)}")

    @property
    def batch_size(self) -> int:
        return self.users_per_batch * self.windows_per_user

    def validation_stride(self) -> int:
        return self.val_stride or max(1, int(round(self.target_fps)))


# ----------------------------------------------------------------------------
# flat key=value config files

_ENCODER_KEYS = {f.name for f in fields(EncoderConfig)}
_TRAIN_SCALARS = {f.name: f.type for f in fields(TrainConfig)
                  if f.name not in ("loss", "encoder", "train_users", "val_users")}
EXTRA_KEYS = ("manifest", "out", "history")


def parse_kv(text: str, source: str = "config") -> dict[str, str]:
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        items[key] = value
    return items


def _convert(key: str, raw: str, kind: str):
    try:
        if "int" in kind and "float" not in kind:
            return None if raw.lower() in ("", "none") else int(raw)
        if "float" in kind:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None


def train_config_from_kv(items: Mapping[str, str]) -> tuple[TrainConfig, dict[str, str]]:
    """Build a TrainConfig; returns it with the unconsumed extra keys (manifest, out...)."""
    kind = items.get("loss", "arcface")
    loss_params, enc, train, extra = {}, {}, {}, {}
    for key, raw in items.items():
        if key == "loss":
            continue
        if key.startswith("loss."):
            name = key[5:]
            if name not in LOSS_PARAMS.get(kind, {}):
                raise ConfigError(f"unknown key {key!r} for loss {kind!r}")
            loss_params[name] = _convert(key, raw, "float")
        elif key in _ENCODER_KEYS:
            enc[key] = raw
        elif key in ("train_users", "val_users"):
            train[key] = tuple(u.strip() for u in raw.split(",") if u.strip())
        elif key in _TRAIN_SCALARS:
            train[key] = _convert(key, raw, str(_TRAIN_SCALARS[key]))
        elif key in EXTRA_KEYS:
            extra[key] = raw
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        encoder = EncoderConfig.from_dict(enc)
    except ValueError as exc:
        raise ConfigError(f"invalid encoder setting: {exc}") from None
    config = TrainConfig(loss=LossConfig(kind, loss_params), encoder=encoder.validate(), **train)
    return config, extra


def load_train_config(path: str | Path) -> tuple[TrainConfig, dict[str, str]]:
    return train_config_from_kv(parse_kv(Path(path).read_text(encoding="utf-8"), str(path)))


# ----------------------------------------------------------------------------
# batches and optimizer


def sample_batch(windows_by_user: Mapping[str, Sequence], users_per_batch: int,
                 windows_per_user: int, rng: np.random.Generator) -> list[tuple[str, object]]:
    """Pick distinct users uniformly, then windows per user (with replacement when short)."""
    users = sorted(u for u, w in windows_by_user.items() if len(w) > 0)
    if len(users) < 2:
        raise DegenerateDataError(f"need at least 2 users with windows, got {len(users)}")
    if users_per_batch > len(users):
        raise ConfigError(f"users_per_batch={users_per_batch} exceeds the {len(users)} available users")
    chosen = rng.choice(len(users), size=users_per_batch, replace=False)
    batch = []
    for ui in chosen:
        user = users[int(ui)]
        pool = windows_by_user[user]
        picks = rng.choice(len(pool), size=windows_per_user, replace=len(pool) < windows_per_user)
        batch.extend((user, pool[int(i)]) for i in picks)
    return batch


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              learning_rate: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam update applied in place."""
    for name, g in grads.items():
        if name not in params or params[name].shape != np.shape(g):
            raise ShapeError(f"gradient {name!r} does not match its parameter")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name!r}; step aborted")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=p.dtype)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


# ----------------------------------------------------------------------------
# training loops


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_window_accuracy: float
    seconds: float


@dataclass
class FitResult:
    model: EncoderModel
    history: list[EpochRecord]
    best_epoch: int
    proxies: ProxyBank | None = None

    @property
    def best_val_accuracy(self) -> float:
        return self.history[self.best_epoch - 1].val_accuracy if self.history else float("nan")

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,val_accuracy,val_window_accuracy,seconds"]
        lines += [f"{r.epoch},{r.train_loss!r},{r.val_accuracy!r},{r.val_window_accuracy!r},{r.seconds:.3f}"
                  for r in self.history]
        return "\n".join(lines) + "\n"


class _WindowPool:
    """Window start positions per user over a list of feature sequences."""

    def __init__(self, seqs_by_user: Mapping[str, Sequence[FeatureSequence]], window_len: int,
                 stride: int):
        self.window_len = window_len
        self.rows: list[np.ndarray] = []
        self.by_user: dict[str, list[tuple[int, int]]] = {}
        for user in sorted(seqs_by_user):
            items = []
            for seq in seqs_by_user[user]:
                idx = len(self.rows)
                self.rows.append(seq.rows)
                items.extend((idx, int(o)) for o in window_offsets(len(seq), window_len, stride))
            self.by_user[user] = items

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.by_user.values())

    def gather(self, items: Sequence[tuple[int, int]]) -> np.ndarray:
        return np.stack([self.rows[s][o:o + self.window_len] for s, o in items])


def _train_epoch(model: EncoderModel, pool: _WindowPool, config: TrainConfig, classes: list[str],
                 proxies: ProxyBank | None, adam: AdamState, rng: np.random.Generator,
                 n_batches: int, users_per_batch: int) -> float:
    class_index = {u: i for i, u in enumerate(classes)}
    losses = []
    for _ in range(n_batches):
        batch = sample_batch(pool.by_user, users_per_batch, config.windows_per_user, rng)
        x = pool.gather([item for _, item in batch])
        labels = np.array([class_index[u] for u, _ in batch])
        out = model.forward(x, train_mode=True, rng=rng)
        res = compute_loss(config.loss, out, labels, None if proxies is None else proxies.proxies)
        grads, _ = model.backward(res.grad)
        params = model.params
        if proxies is not None:
            grads = dict(grads, proxies=res.proxy_grad)
            params = dict(params, proxies=proxies.proxies)
        adam_step(params, grads, adam, config.learning_rate)
        losses.append(res.value)
    return float(np.mean(losses)) if losses else float("nan")


def _select_loop(run_epoch, validate, config: TrainConfig, snapshot) -> tuple[list[EpochRecord], int, object]:
    history: list[EpochRecord] = []
    best_key, best_epoch, best_state = None, 0, None
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        loss = run_epoch()
        acc, win_acc = validate()
        history.append(EpochRecord(epoch, loss, acc, win_acc, time.perf_counter() - t0))
        key = (acc, win_acc)
        if best_key is None or key > best_key:
            best_key, best_epoch, best_state = key, epoch, snapshot()
        log.info("epoch %d loss=%.5f val_acc=%.4f val_win_acc=%.4f", epoch, loss, acc, win_acc)
        if epoch >= config.epochs_min and epoch - best_epoch >= config.patience:
            break
    return history, best_epoch, best_state


def fit(train_data: Mapping[str, Sequence[FeatureSequence]],
        val_data: Mapping[str, tuple[FeatureSequence, FeatureSequence]] | None,
        config: TrainConfig, checkpoint: str | Path | None = None) -> FitResult:
    """Train an embedding model.

    ``train_data`` maps user -> feature sequences (any number of sessions);
    ``val_data`` maps user -> (enrollment session, use-time session).
    """
    from .evaluation import validation_accuracy  # deferred: evaluation imports this module

    val_data = dict(val_data or {})
    overlap = set(train_data) & set(val_data)
    if overlap:
        raise ConfigError(f"validation users overlap training users: {sorted(overlap)}")
    if len(train_data) < 2:
        raise DegenerateDataError("need at least 2 training users")
    enc = config.encoder
    if enc.mode != "embedding":
        enc = replace(enc, mode="embedding", num_classes=0)
    classes = sorted(train_data)
    users_per_batch = config.users_per_batch
    if users_per_batch > len(classes):
        raise ConfigError(f"users_per_batch={users_per_batch} exceeds {len(classes)} training users")
    stats = compute_stats([s for seqs in train_data.values() for s in seqs])
    model = init_encoder(enc, config.seed, stats=stats)
    proxies = ProxyBank.init(classes, enc.embedding_dim, config.seed + 1) if config.loss.uses_proxies else None
    pool = _WindowPool(train_data, enc.window_len, config.train_stride)
    if pool.total == 0:
        raise DegenerateDataError(f"no training windows of length {enc.window_len}")
    n_batches = config.batches_per_epoch or max(1, pool.total // config.batch_size)
    tensors = dict(model.params)
    if proxies is not None:
        tensors["proxies"] = proxies.proxies
    adam = AdamState.zeros_like(tensors)
    rng = np.random.default_rng(config.seed)

    last_loss = float("nan")

    def run_epoch():
        nonlocal last_loss
        last_loss = _train_epoch(model, pool, config, classes, proxies, adam, rng, n_batches, users_per_batch)
        return last_loss

    def validate():
        if not val_data:
            # without validation users, fall back to the lowest training loss
            return -last_loss, -last_loss
        return validation_accuracy(model, val_data, config.val_use_minutes,
                                   config.validation_stride(), config.k)

    def snapshot():
        best = model.copy()
        if checkpoint is not None:
            save_checkpoint(best, checkpoint, {"seed": str(config.seed), "adam_step": str(adam.step)})
        return best, None if proxies is None else proxies.proxies.copy()

    history, best_epoch, (best_model, best_proxies) = _select_loop(run_epoch, validate, config, snapshot)
    bank = None if proxies is None else ProxyBank(classes, best_proxies)
    return FitResult(best_model, history, best_epoch, bank)


def holdout_frames(length: int, fps: float, config: TrainConfig) -> int:
    """Tail length held back for validation: the last N minutes or the fraction, whichever is shorter."""
    return int(min(round(config.holdout_minutes * 60 * fps), round(config.holdout_fraction * length)))


def fit_classifier(enrollment: Mapping[str, FeatureSequence], config: TrainConfig) -> FitResult:
    """Train the classification baseline on each user's enrollment sequence."""
    if len(enrollment) < 2:
        raise ConfigError("classification needs at least 2 users")
    classes = sorted(enrollment)
    enc = replace(config.encoder, mode="classification", num_classes=len(classes))
    train_parts, val_parts = {}, {}
    for user in classes:
        seq = enrollment[user]
        cut = len(seq) - holdout_frames(len(seq), seq.fps, config)
        train_parts[user] = [seq.slice(0, cut)]
        val_parts[user] = seq.slice(cut, len(seq))
    stats = compute_stats([s for seqs in train_parts.values() for s in seqs])
    model = init_encoder(enc, config.seed, stats=stats, classes=classes)
    pool = _WindowPool(train_parts, enc.window_len, config.train_stride)
    if pool.total == 0:
        raise DegenerateDataError(f"no training windows of length {enc.window_len}")
    n_batches = config.batches_per_epoch or max(1, pool.total // config.batch_size)
    users_per_batch = min(config.users_per_batch, len(classes))
    adam = AdamState.zeros_like(model.params)
    rng = np.random.default_rng(config.seed)
    val_stride = config.validation_stride()
    val_x, val_y = [], []
    for i, user in enumerate(classes):
        part = val_parts[user]
        offs = window_offsets(len(part), enc.window_len, val_stride)
        if len(offs):
            val_x.append(window_array(part.rows, offs, enc.window_len))
            val_y.append(np.full(len(offs), i))

    def run_epoch():
        return _train_epoch(model, pool, config, classes, None, adam, rng, n_batches, users_per_batch)

    def validate():
        if not val_x:
            return float("nan"), float("nan")
        correct = sum(int(np.sum(np.argmax(model.embed(x), axis=1) == y)) for x, y in zip(val_x, val_y))
        acc = correct / sum(len(y) for y in val_y)
        return acc, acc

    history, best_epoch, best_model = _select_loop(run_epoch, validate, config, model.copy)
    return FitResult(best_model, history, best_epoch)


# ----------------------------------------------------------------------------
# checkpoints: model file followed by a training-state section

STATE_MAGIC = b"MKTS"


def save_checkpoint(model: EncoderModel, path: str | Path, state: Mapping[str, str]) -> None:
    text = "\n".join(f"{k}={v}" for k, v in state.items()).encode("utf-8")
    section = STATE_MAGIC + struct.pack("<I", len(text)) + text
    atomic_write(path, model_to_bytes(model) + section + struct.pack("<I", zlib.crc32(section)))


def load_checkpoint(path: str | Path) -> tuple[EncoderModel, dict[str, str]]:
    data = Path(path).read_bytes()
    model, used = model_from_bytes(data)
    rest = data[used:]
    if not rest:
        return model, {}
    if rest[:4] != STATE_MAGIC or len(rest) < 8:
        raise TruncatedFileError("checkpoint training-state section is malformed")
    (n,) = struct.unpack_from("<I", rest, 4)
    section = rest[:8 + n]
    if len(rest) < 8 + n + 4:
        raise TruncatedFileError("checkpoint training-state section is truncated")
    (crc,) = struct.unpack_from("<I", rest, 8 + n)
    if zlib.crc32(section) != crc:
        raise ChecksumError("checkpoint training-state checksum mismatch")
    return model, parse_kv(section[8:].decode("utf-8"))
