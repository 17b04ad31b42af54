"""acc(t_enr | t_use) grids with repeated enrollment sampling.

For every user, ``t_enr`` minutes of session 1 become reference data (or
classifier training data for the baseline) and every ``t_use``-minute stretch
of session 2, taken in one-second steps, is a trial.  A trial is identified by
majority vote over its sliding windows.

Window votes are computed once per session and aggregated per trial with
prefix sums, which gives the same tallies as re-embedding each trial.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .encoder import EncoderConfig, EncoderModel
from .errors import ConfigError, DataError, ShapeError
from .identify import (_name_ranks, classifier_window_votes, pick_winner, vote_neighbors,
                       window_votes)
from .index import ReferenceIndex
from .preprocessing import FeatureSequence, window_array, window_offsets
from .training import fit_classifier

log = logging.getLogger(__name__)

ENROLLMENT_MINUTES = (1, 5, 10, 15, 20, 25, 30, 35, "all")
USE_MINUTES = (1, 5, 10, 15, 20, 25, 30)

Sessions = Mapping[str, tuple[FeatureSequence, FeatureSequence]]


def _minutes(value) -> float | str:
    if isinstance(value, str):
        if value.strip().lower() == "all":
            return "all"
        value = float(value)
    if not value > 0:
        raise ConfigError(f"lengths must be positive minutes, got {value}")
    return int(value) if float(value).is_integer() else float(value)


@dataclass(frozen=True)
class EvalProtocol:
    enrollment_minutes: tuple = ENROLLMENT_MINUTES
    use_minutes: tuple = USE_MINUTES
    repetitions: int = 5
    step_seconds: float = 1.0
    k: int = 50
    window_len: int | None = None  # None: the model's window length
    stride: int = 1
    seed: int = 0
    permute_labels: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "enrollment_minutes", tuple(_minutes(v) for v in self.enrollment_minutes))
        object.__setattr__(self, "use_minutes", tuple(_minutes(v) for v in self.use_minutes))
        if "all" in self.use_minutes:
            raise ConfigError("use-time lengths must be numeric")
        if self.repetitions < 1 or self.k < 1 or self.stride < 1 or not self.step_seconds > 0:
            raise ConfigError("repetitions, k, stride must be >= 1 and step_seconds > 0")

    @classmethod
    def cross_dataset(cls, **changes) -> "EvalProtocol":
        """Short-sequence preset: 3 s windows and 10 neighbors."""
        base = dict(window_len=45, k=10, enrollment_minutes=("all",), use_minutes=(0.05,), repetitions=1)
        base.update(changes)
        return cls(**base)

    @classmethod
    def from_kv(cls, items: Mapping[str, str]) -> "EvalProtocol":
        kwargs: dict = {}
        for key, raw in items.items():
            if key in ("enrollment_minutes", "use_minutes"):
                kwargs[key] = tuple(v.strip() for v in raw.split(",") if v.strip())
            elif key in ("repetitions", "k", "stride", "seed"):
                kwargs[key] = int(raw)
            elif key == "window_len":
                kwargs[key] = None if raw.lower() in ("", "none") else int(raw)
            elif key == "step_seconds":
                kwargs[key] = float(raw)
            elif key == "permute_labels":
                kwargs[key] = raw.strip().lower() in ("1", "true", "yes")
            else:
                raise ConfigError(f"unknown protocol key {key!r}")
        return cls(**kwargs)


# ----------------------------------------------------------------------------
# per-window predictions


class EmbeddingCache:
    """Embeddings of every window (at ``stride``) of each session, computed once."""

    def __init__(self, model: EncoderModel, window_len: int, stride: int = 1):
        self.model = model
        self.window_len = window_len
        self.stride = stride
        self._store: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] = {}

    def get(self, seq: FeatureSequence) -> tuple[np.ndarray, np.ndarray]:
        key = (seq.user_id, seq.session_id)
        if key not in self._store:
            offs = window_offsets(len(seq), self.window_len, self.stride)
            emb = self.model.embed(window_array(seq.rows, offs, self.window_len)) if len(offs) else \
                np.empty((0, self.model.config.output_dim), dtype=np.float32)
            self._store[key] = (offs, emb)
        return self._store[key]


@dataclass
class WindowVotes:
    """Per-window predictions for one use-time session."""

    offsets: np.ndarray
    labels: np.ndarray   # index into ``names``
    scores: np.ndarray   # winner's summed neighbor distance (0 for classifiers)


@dataclass
class TrialRecord:
    user: str
    start: int
    predicted: str
    correct: bool


@dataclass
class TrialLog:
    trials: list[TrialRecord] = field(default_factory=list)
    excluded: list[tuple[str, str]] = field(default_factory=list)  # (user, reason)
    enrollment_starts: dict[str, int] = field(default_factory=dict)

    @property
    def indicators(self) -> np.ndarray:
        return np.array([t.correct for t in self.trials], dtype=np.float64)


def _frames(minutes: float, fps: float) -> int:
    return int(round(minutes * 60 * fps))


def _check_sessions(data: Sessions) -> None:
    for user, (enr, use) in data.items():
        if enr.session_id == use.session_id:
            raise DataError(f"user {user}: enrollment and use-time data come from the same session")


def _enrollment_slices(data: Sessions, t_enr, window_len: int, rng: np.random.Generator,
                       log_: TrialLog) -> dict[str, tuple[int, int]]:
    slices = {}
    for user in sorted(data):
        seq = data[user][0]
        if t_enr == "all":
            start, length = 0, len(seq)
        else:
            length = _frames(t_enr, seq.fps)
            if length > len(seq):
                log_.excluded.append((user, f"session 1 has {len(seq)} frames < {length} for t_enr={t_enr}"))
                continue
            start = int(rng.integers(0, len(seq) - length + 1))
        if length < window_len:
            log_.excluded.append((user, f"enrollment slice of {length} frames < window {window_len}"))
            continue
        slices[user] = (start, length)
        log_.enrollment_starts[user] = start
    return slices


def _embedding_votes(cache: EmbeddingCache, data: Sessions, slices: Mapping[str, tuple[int, int]],
                     k: int) -> tuple[list[str], dict[str, WindowVotes]]:
    index = ReferenceIndex(cache.model.config.output_dim)
    w = cache.window_len
    for user in sorted(slices):
        start, length = slices[user]
        offs, emb = cache.get(data[user][0])
        sel = (offs >= start) & (offs <= start + length - w)
        index.enroll(user, emb[sel], offs[sel])
    names = index.names
    votes = {}
    for user in sorted(slices):
        offs, emb = cache.get(data[user][1])
        if len(offs):
            labels, scores = window_votes(index, emb, k)
        else:
            labels, scores = np.empty(0, np.int64), np.empty(0)
        votes[user] = WindowVotes(offs, labels, scores)
    return names, votes


def _classifier_votes(model: EncoderModel, data: Sessions, users: Sequence[str], window_len: int,
                      stride: int) -> tuple[list[str], dict[str, WindowVotes]]:
    votes = {}
    for user in users:
        seq = data[user][1]
        offs = window_offsets(len(seq), window_len, stride)
        labels = classifier_window_votes(model, window_array(seq.rows, offs, window_len)) if len(offs) \
            else np.empty(0, np.int64)
        votes[user] = WindowVotes(offs, labels, np.zeros(len(labels)))
    return list(model.classes), votes


def _score_trials(names: list[str], votes: Mapping[str, WindowVotes], data: Sessions, t_use: float,
                  window_len: int, step_seconds: float, rng: np.random.Generator | None,
                  log_: TrialLog) -> TrialLog:
    """Vote every use-time trial; ``rng`` (if given) relabels votes per trial at random."""
    n = len(names)
    ranks = _name_ranks(names)
    name_index = {u: i for i, u in enumerate(names)}
    for user in sorted(votes):
        seq = data[user][1]
        span = _frames(t_use, seq.fps)
        step = max(1, int(round(step_seconds * seq.fps)))
        if span > len(seq) or span < window_len:
            log_.excluded.append((user, f"session 2 has {len(seq)} frames; t_use={t_use} needs {span} "
                                        f"(and at least the {window_len}-frame window)"))
            continue
        v = votes[user]
        starts = np.arange(0, len(seq) - span + 1, step)
        onehot = np.zeros((len(v.labels) + 1, n))
        onehot[np.arange(1, len(v.labels) + 1), v.labels] = 1.0
        counts_cum = np.cumsum(onehot, axis=0)
        dist = np.zeros((len(v.labels) + 1, n))
        dist[np.arange(1, len(v.labels) + 1), v.labels] = v.scores
        dist_cum = np.cumsum(dist, axis=0)
        lo = np.searchsorted(v.offsets, starts, side="left")
        hi = np.searchsorted(v.offsets, starts + span - window_len, side="right")
        counts = counts_cum[hi] - counts_cum[lo]
        sums = dist_cum[hi] - dist_cum[lo]
        if rng is not None:
            perm = rng.permuted(np.tile(np.arange(n), (len(starts), 1)), axis=1)
            rows = np.arange(len(starts))[:, None]
            relabeled_counts = np.empty_like(counts)
            relabeled_sums = np.empty_like(sums)
            relabeled_counts[rows, perm] = counts
            relabeled_sums[rows, perm] = sums
            counts, sums = relabeled_counts, relabeled_sums
        winners = pick_winner(counts, sums, ranks)
        truth = name_index.get(user, -1)
        for s, win in zip(starts, winners):
            log_.trials.append(TrialRecord(user, int(s), names[int(win)], bool(win == truth)))
    return log_


def _accuracy(log_: TrialLog) -> float:
    return float(np.mean(log_.indicators)) if log_.trials else float("nan")


def _round_votes(model: EncoderModel, data: Sessions, t_enr, protocol: EvalProtocol,
                 rng: np.random.Generator, cache: EmbeddingCache | None,
                 classifier_config=None) -> tuple[list[str], dict[str, WindowVotes], TrialLog]:
    window_len = protocol.window_len or model.config.window_len
    log_ = TrialLog()
    slices = _enrollment_slices(data, t_enr, window_len, rng, log_)
    if len(slices) < 1:
        return [], {}, log_
    if classifier_config is None:
        if cache is None:
            cache = EmbeddingCache(model, window_len, protocol.stride)
        names, votes = _embedding_votes(cache, data, slices, protocol.k)
    else:
        enrollment = {u: data[u][0].slice(s, s + n) for u, (s, n) in slices.items()}
        config = replace(classifier_config, encoder=replace(classifier_config.encoder, window_len=window_len))
        clf = fit_classifier(enrollment, config).model
        names, votes = _classifier_votes(clf, data, sorted(slices), window_len, protocol.stride)
    for user, reason in log_.excluded:
        log.warning("excluding user %s: %s", user, reason)
    return names, votes, log_


def sequence_accuracy(model: EncoderModel | None, enrollment: Mapping[str, FeatureSequence],
                      use: Mapping[str, FeatureSequence], t_enr, t_use: float,
                      protocol: EvalProtocol, rng: np.random.Generator,
                      classifier_config=None, cache: EmbeddingCache | None = None
                      ) -> tuple[float, TrialLog]:
    """Accuracy of identifying every ``t_use``-minute use-time window.

    With ``classifier_config`` the baseline is trained on the same
    enrollment slices instead of enrolling embeddings (``model`` may then be
    None, only the window length is taken from the protocol or config).
    """
    data = {u: (enrollment[u], use[u]) for u in enrollment if u in use}
    _check_sessions(data)
    if model is None:
        if classifier_config is None:
            raise ConfigError("need a model or a classifier config")
        model = _WindowOnly(protocol.window_len or classifier_config.encoder.window_len)
    names, votes, log_ = _round_votes(model, data, _minutes(t_enr), protocol, rng, cache, classifier_config)
    window_len = protocol.window_len or model.config.window_len
    perm_rng = rng if protocol.permute_labels else None
    _score_trials(names, votes, data, float(t_use), window_len, protocol.step_seconds, perm_rng, log_)
    return _accuracy(log_), log_


class _WindowOnly:
    """Stand-in carrying just a window length for classifier-only evaluation."""

    def __init__(self, window_len: int):
        self.config = EncoderConfig(window_len=window_len)


# ----------------------------------------------------------------------------
# grids


@dataclass
class CellResult:
    accuracies: list[float] = field(default_factory=list)
    trials: list[int] = field(default_factory=list)
    indicators: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def mean(self) -> float:
        vals = [a for a in self.accuracies if not math.isnan(a)]
        return float(sum(vals) / len(vals)) if vals else float("nan")


@dataclass
class AccuracyGrid:
    enrollment_axis: tuple
    use_axis: tuple
    cells: dict[tuple, CellResult]
    metadata: dict[str, str] = field(default_factory=dict)

    def mean(self, t_enr, t_use) -> float:
        return self.cells[(_minutes(t_enr), _minutes(t_use))].mean

    def to_csv(self) -> str:
        lines = ["t_enr,t_use,rep,accuracy,trials"]
        for (e, u), cell in self.cells.items():
            for rep, (acc, n) in enumerate(zip(cell.accuracies, cell.trials)):
                lines.append(f"{e},{u},{rep},{acc!r},{n}")
        return "\n".join(lines) + "\n"

    def summary_csv(self, confidence: float = 0.95, resamples: int = 1000, seed: int = 0) -> str:
        lines = ["t_enr,t_use,mean,ci_low,ci_high,trials"]
        for i, ((e, u), cell) in enumerate(self.cells.items()):
            ind = np.concatenate(cell.indicators) if cell.indicators else np.empty(0)
            if len(ind):
                low, high = bootstrap_ci(ind, confidence, resamples, np.random.default_rng([seed, i]))
            else:
                low = high = float("nan")
            lines.append(f"{e},{u},{cell.mean!r},{low!r},{high!r},{sum(cell.trials)}")
        return "\n".join(lines) + "\n"


def _enr_key(t_enr) -> int:
    return 0 if t_enr == "all" else int(round(float(t_enr) * 1000)) + 1


def accuracy_grid(model: EncoderModel | None, data: Sessions, protocol: EvalProtocol,
                  classifier_config=None) -> AccuracyGrid:
    """All (t_enr, t_use) cells with ``protocol.repetitions`` enrollment draws each.

    Random streams are keyed by (seed, repetition, t_enr), so the embedding
    model and the classifier baseline see identical enrollment slices.
    """
    _check_sessions(data)
    if model is None:
        model = _WindowOnly(protocol.window_len or classifier_config.encoder.window_len)
    window_len = protocol.window_len or model.config.window_len
    cache = None if classifier_config is not None else EmbeddingCache(model, window_len, protocol.stride)
    cells = {(e, u): CellResult() for e in protocol.enrollment_minutes for u in protocol.use_minutes}
    for t_enr in protocol.enrollment_minutes:
        for rep in range(protocol.repetitions):
            rng = np.random.default_rng([protocol.seed, rep, _enr_key(t_enr)])
            names, votes, base_log = _round_votes(model, data, t_enr, protocol, rng, cache, classifier_config)
            for t_use in protocol.use_minutes:
                log_ = TrialLog(excluded=list(base_log.excluded),
                                enrollment_starts=dict(base_log.enrollment_starts))
                perm_rng = None
                if protocol.permute_labels:
                    perm_rng = np.random.default_rng([protocol.seed, rep, _enr_key(t_enr), _enr_key(t_use)])
                _score_trials(names, votes, data, float(t_use), window_len, protocol.step_seconds,
                              perm_rng, log_)
                cell = cells[(t_enr, t_use)]
                cell.accuracies.append(_accuracy(log_))
                cell.trials.append(len(log_.trials))
                cell.indicators.append(log_.indicators)
    meta = {"mode": "classifier" if classifier_config is not None else "embedding",
            "seed": str(protocol.seed), "k": str(protocol.k), "window_len": str(window_len)}
    return AccuracyGrid(protocol.enrollment_minutes, protocol.use_minutes, cells, meta)


def bootstrap_ci(indicators, confidence: float = 0.95, resamples: int = 1000,
                 rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean of per-trial indicators."""
    x = np.asarray(indicators, dtype=np.float64).ravel()
    if len(x) == 0:
        raise DataError("bootstrap needs at least one trial")
    rng = rng or np.random.default_rng()
    means = np.empty(resamples)
    chunk = max(1, 5_000_000 // len(x))
    for s in range(0, resamples, chunk):
        n = min(chunk, resamples - s)
        means[s:s + n] = x[rng.integers(0, len(x), size=(n, len(x)))].mean(axis=1)
    alpha = (1.0 - confidence) / 2.0
    low, high = np.quantile(means, [alpha, 1.0 - alpha])
    return float(low), float(high)


@dataclass
class DeltaGrid:
    enrollment_axis: tuple
    use_axis: tuple
    deltas: dict[tuple, float]

    def to_csv(self) -> str:
        lines = ["t_enr,t_use,delta"]
        lines += [f"{e},{u},{d!r}" for (e, u), d in self.deltas.items()]
        return "\n".join(lines) + "\n"


def grid_delta(a: AccuracyGrid, b: AccuracyGrid) -> DeltaGrid:
    if tuple(a.enrollment_axis) != tuple(b.enrollment_axis) or tuple(a.use_axis) != tuple(b.use_axis):
        raise ShapeError("grids have different (t_enr, t_use) axes")
    return DeltaGrid(a.enrollment_axis, a.use_axis,
                     {key: a.cells[key].mean - b.cells[key].mean for key in a.cells})


def read_grid_csv(path: str | Path) -> AccuracyGrid:
    """Re-read a grid CSV written by :meth:`AccuracyGrid.to_csv`."""
    cells: dict[tuple, CellResult] = {}
    enr_axis: list = []
    use_axis: list = []
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0].strip() != "t_enr,t_use,rep,accuracy,trials":
        raise DataError(f"{path}: not a grid CSV")
    for line in text[1:]:
        if not line.strip():
            continue
        e, u, _, acc, n = line.split(",")
        e, u = _minutes(e), _minutes(u)
        if e not in enr_axis:
            enr_axis.append(e)
        if u not in use_axis:
            use_axis.append(u)
        cell = cells.setdefault((e, u), CellResult())
        cell.accuracies.append(float(acc))
        cell.trials.append(int(n))
    return AccuracyGrid(tuple(enr_axis), tuple(use_axis), cells)


# ----------------------------------------------------------------------------
# validation metric used during training and the repetition-level mode


def validation_accuracy(model: EncoderModel, val_data: Sessions, use_minutes: float, stride: int,
                        k: int) -> tuple[float, float]:
    """acc(all | use_minutes) with thinned window strides, plus per-window accuracy."""
    protocol = EvalProtocol(enrollment_minutes=("all",), use_minutes=(use_minutes,), repetitions=1,
                            k=k, stride=stride)
    cache = EmbeddingCache(model, model.config.window_len, stride)
    names, votes, log_ = _round_votes(model, val_data, "all", protocol, np.random.default_rng(0), cache)
    if not votes:
        return float("nan"), float("nan")
    _score_trials(names, votes, val_data, use_minutes, model.config.window_len, 1.0, None, log_)
    hits = total = 0
    for user, v in votes.items():
        truth = names.index(user)
        hits += int(np.sum(v.labels == truth))
        total += len(v.labels)
    return _accuracy(log_), (hits / total if total else float("nan"))


def evaluate_repetitions(model: EncoderModel, enrollment: Mapping[str, Sequence[FeatureSequence]],
                         use: Mapping[str, Sequence[FeatureSequence]], k: int = 10,
                         window_len: int | None = None) -> tuple[float, np.ndarray]:
    """One embedding per short repetition; each use-time repetition is a trial."""
    window_len = window_len or model.config.window_len
    index = ReferenceIndex(model.config.output_dim)
    for user in sorted(enrollment):
        reps = [s.rows[:window_len] for s in enrollment[user] if len(s) >= window_len]
        if reps:
            index.enroll(user, model.embed(np.stack(reps)))
    names = index.names
    ranks = _name_ranks(names)
    indicators = []
    for user in sorted(use):
        reps = [s.rows[:window_len] for s in use[user] if len(s) >= window_len]
        if not reps:
            continue
        pos, dist = index.search(model.embed(np.stack(reps)), k)
        winners, _ = vote_neighbors(index.labels_of(pos), dist, len(names), ranks)
        indicators.extend(names[int(w)] == user for w in winners)
    ind = np.array(indicators, dtype=np.float64)
    return (float(ind.mean()) if len(ind) else float("nan")), ind
