"""Two-level majority voting: k-NN vote per window, then a vote over windows.

Ties are broken by the smaller summed neighbor distance, then by the
lexicographically smaller user id.  At the sequence level the distance used
for tie-breaks is the sum, over the windows voting for a user, of that
window's winning summed distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderModel
from .errors import ConfigError, InsufficientLengthError
from .index import Neighbor, ReferenceIndex
from .preprocessing import FeatureSequence, window_array, window_offsets

DEFAULT_K = 50
CROSS_DATASET_K = 10


@dataclass
class IdentificationResult:
    predicted: str
    window_predictions: list[str]
    tally: dict[str, int]
    window_count: int
    window_offsets: list[int] = field(default_factory=list)

    def summary_line(self) -> str:
        tally = ",".join(f"{u}:{c}" for u, c in sorted(self.tally.items()))
        return f"predicted={self.predicted} windows={self.window_count} tally={tally}"

    def window_csv(self) -> str:
        lines = ["window,offset,predicted"]
        offsets = self.window_offsets or list(range(self.window_count))
        lines += [f"{i},{o},{p}" for i, (o, p) in enumerate(zip(offsets, self.window_predictions))]
        return "\n".join(lines) + "\n"


def _name_ranks(names: list[str]) -> np.ndarray:
    order = sorted(range(len(names)), key=lambda i: names[i])
    ranks = np.empty(len(names), dtype=np.int64)
    ranks[order] = np.arange(len(names))
    return ranks


def pick_winner(counts: np.ndarray, dist_sums: np.ndarray, ranks: np.ndarray) -> np.ndarray:
    """Row-wise argmax of counts; ties -> smaller distance sum -> smaller rank."""
    counts = np.atleast_2d(counts)
    dist_sums = np.atleast_2d(dist_sums)
    top = counts == counts.max(axis=1, keepdims=True)
    masked = np.where(top, dist_sums, np.inf)
    best = top & (masked == masked.min(axis=1, keepdims=True))
    return np.argmin(np.where(best, ranks[None, :], np.iinfo(np.int64).max), axis=1)


def vote_neighbors(labels: np.ndarray, dists: np.ndarray, num_users: int,
                   ranks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row neighbor vote.

    ``labels``/``dists`` are ``(Q, k)``.  Returns the winning label per row
    and the winner's summed neighbor distance.
    """
    q = len(labels)
    flat = (np.arange(q)[:, None] * num_users + labels).ravel()
    counts = np.bincount(flat, minlength=q * num_users).reshape(q, num_users)
    sums = np.bincount(flat, weights=dists.ravel(), minlength=q * num_users).reshape(q, num_users)
    winner = pick_winner(counts, sums, ranks)
    return winner, sums[np.arange(q), winner]


def window_votes(index: ReferenceIndex, embeddings: np.ndarray, k: int = DEFAULT_K
                 ) -> tuple[np.ndarray, np.ndarray]:
    """k-NN vote for each embedding; labels index into ``index.names``."""
    pos, dist = index.search(embeddings, k)
    labels = index.labels_of(pos)
    names = index.names
    return vote_neighbors(labels, dist, len(names), _name_ranks(names))


def sequence_vote(labels: np.ndarray, scores: np.ndarray, names: list[str]) -> int:
    n = len(names)
    counts = np.bincount(labels, minlength=n)
    sums = np.bincount(labels, weights=scores, minlength=n)
    return int(pick_winner(counts[None, :], sums[None, :], _name_ranks(names))[0])


def identify_neighbors(neighbors: list[Neighbor]) -> str:
    """Majority user among an already retrieved neighbor list."""
    names = sorted({n.user_id for n in neighbors})
    ids = {u: i for i, u in enumerate(names)}
    labels = np.array([[ids[n.user_id] for n in neighbors]])
    dists = np.array([[n.distance for n in neighbors]])
    winner, _ = vote_neighbors(labels, dists, len(names), np.arange(len(names)))
    return names[int(winner[0])]


def identify_window(index: ReferenceIndex, embedding, k: int = DEFAULT_K) -> str:
    return identify_neighbors(index.knn(embedding, k))


def _windows(seq: FeatureSequence, window_len: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    offsets = window_offsets(len(seq), window_len, stride)
    if not len(offsets):
        raise InsufficientLengthError(
            f"sequence has {len(seq)} frames; at least {window_len} are required",
            required=window_len, available=len(seq))
    return offsets, window_array(seq.rows, offsets, window_len)


def _result(names: list[str], labels: np.ndarray, scores: np.ndarray, offsets) -> IdentificationResult:
    winner = sequence_vote(labels, scores, names)
    per_window = [names[i] for i in labels]
    tally: dict[str, int] = {}
    for u in per_window:
        tally[u] = tally.get(u, 0) + 1
    return IdentificationResult(names[winner], per_window, tally, len(per_window),
                                [int(o) for o in offsets])


def identify_sequence(model: EncoderModel, index: ReferenceIndex, seq: FeatureSequence,
                      window_len: int | None = None, stride: int = 1,
                      k: int = DEFAULT_K) -> IdentificationResult:
    if model.config.mode != "embedding":
        raise ConfigError("identify_sequence needs an embedding-mode model")
    window_len = window_len or model.config.window_len
    offsets, windows = _windows(seq, window_len, stride)
    labels, scores = window_votes(index, model.embed(windows), k)
    return _result(index.names, labels, scores, offsets)


def classifier_window_votes(model: EncoderModel, windows: np.ndarray) -> np.ndarray:
    """Per-window argmax class; equal logits resolve to the smaller class id."""
    logits = model.embed(windows)
    ranks = _name_ranks(model.classes)
    return pick_winner(logits, np.zeros_like(logits), ranks)


def identify_sequence_classifier(model: EncoderModel, seq: FeatureSequence,
                                 window_len: int | None = None,
                                 stride: int = 1) -> IdentificationResult:
    if model.config.mode != "classification":
        raise ConfigError("identify_sequence_classifier needs a classification-mode model")
    window_len = window_len or model.config.window_len
    offsets, windows = _windows(seq, window_len, stride)
    labels = classifier_window_votes(model, windows)
    return _result(model.classes, labels, np.zeros(len(labels)), offsets)
