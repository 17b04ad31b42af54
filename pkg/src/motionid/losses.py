"""Metric-learning losses with analytic gradients.

All losses take a ``(B, n)`` batch of embeddings and integer labels and
return a :class:`LossResult` carrying the scalar value, the gradient with
respect to the embeddings and, for proxy losses, the gradient with respect to
the raw (unnormalized) proxies.  Arithmetic is done in float64.

Tuple losses (contrastive, triplet margin) average over the pairs/triplets
that actually violate their margin.  Angular losses normalize embeddings and
proxies internally, which is a no-op for encoder outputs that are already on
the unit sphere.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)

LOSS_KINDS = ("contrastive", "triplet_margin", "multi_similarity", "arcface",
              "normalized_softmax", "cross_entropy")
PROXY_LOSSES = ("arcface", "normalized_softmax")

# parameter name -> (default, search-space low, high)
LOSS_PARAMS: dict[str, dict[str, tuple[float, float, float]]] = {
    "contrastive": {"pos_margin": (0.0, 0.0, 0.3), "neg_margin": (1.0, 0.3, 1.0)},
    "triplet_margin": {"margin": (0.05, 0.01, 0.5)},
    "multi_similarity": {"alpha": (2.0, 0.01, 20.0), "beta": (50.0, 20.0, 80.0), "base": (0.5, 0.0, 3.0)},
    "arcface": {"regularizer_weight": (9e-5, 1e-6, 0.1), "margin_degrees": (3.5, 1.0, 20.0),
                "scale": (211.0, 1.0, 500.0)},
    "normalized_softmax": {"temperature": (0.01, 1e-5, 0.01)},
    "cross_entropy": {},
}

ACOS_CLAMP = 1e-7


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    proxy_grad: np.ndarray | None = None
    degenerate: bool = False


@dataclass(frozen=True)
class LossConfig:
    kind: str = "arcface"
    params: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        spec = LOSS_PARAMS[self.kind]
        unknown = set(self.params) - set(spec)
        if unknown:
            raise ConfigError(f"unknown parameter(s) for {self.kind}: {sorted(unknown)}")
        merged = {k: float(self.params.get(k, d)) for k, (d, _, _) in spec.items()}
        for k, v in merged.items():
            _, lo, hi = spec[k]
            if not lo <= v <= hi:
                log.warning("loss parameter %s=%g is outside the search space [%g, %g]", k, v, lo, hi)
        if self.kind == "normalized_softmax" and merged["temperature"] <= 0:
            raise ConfigError("temperature must be positive")
        object.__setattr__(self, "params", merged)

    @property
    def uses_proxies(self) -> bool:
        return self.kind in PROXY_LOSSES


@dataclass
class ProxyBank:
    class_ids: list[str]
    proxies: np.ndarray

    @classmethod
    def init(cls, class_ids: list[str], dim: int, seed: int, dtype=np.float32) -> "ProxyBank":
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(dim)
        return cls(list(class_ids), rng.uniform(-bound, bound, size=(len(class_ids), dim)).astype(dtype))

    def row(self, class_id: str) -> int:
        return self.class_ids.index(class_id)


# ----------------------------------------------------------------------------
# helpers


def _pairwise_distances(emb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    diff = emb[:, None, :] - emb[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1)), diff


def _distance_grad(coef: np.ndarray, dist: np.ndarray, diff: np.ndarray) -> np.ndarray:
    """Gradient of sum_ij coef_ij * d_ij wrt embeddings (coef need not be symmetric)."""
    sym = coef + coef.T
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(dist > 0, sym / dist, 0.0)
    return np.einsum("ij,ijk->ik", w, diff)


def _normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / norm, norm


def _normalize_backward(g: np.ndarray, unit: np.ndarray, norm: np.ndarray) -> np.ndarray:
    return (g - unit * np.sum(unit * g, axis=1, keepdims=True)) / norm


def _softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient wrt logits (log-sum-exp stabilized)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    value = float(np.mean(lse - shifted[rows, labels]))
    probs = np.exp(shifted - lse[:, None])
    probs[rows, labels] -= 1.0
    return value, probs / len(labels)


def _check_labels(labels, width: int | None = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if width is not None and len(labels) and (labels.min() < 0 or labels.max() >= width):
        raise IndexError(f"label out of range for {width} classes")
    return labels


# ----------------------------------------------------------------------------
# tuple losses


def contrastive_loss(emb, labels, pos_margin: float = 0.0, neg_margin: float = 1.0) -> LossResult:
    emb = np.asarray(emb, dtype=np.float64)
    labels = _check_labels(labels)
    dist, diff = _pairwise_distances(emb)
    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones_like(same), k=1)
    pos = same & upper
    neg = ~same & upper
    pos_l = np.where(pos, np.maximum(0.0, dist - pos_margin), 0.0)
    neg_l = np.where(neg, np.maximum(0.0, neg_margin - dist), 0.0)
    active = (pos_l > 0) | (neg_l > 0)
    count = int(active.sum())
    degenerate = not (pos.any() and neg.any())
    if count == 0:
        return LossResult(0.0, np.zeros_like(emb), degenerate=degenerate)
    value = float((pos_l.sum() + neg_l.sum()) / count)
    coef = (np.where(pos_l > 0, 1.0, 0.0) - np.where(neg_l > 0, 1.0, 0.0)) / count
    return LossResult(value, _distance_grad(coef, dist, diff), degenerate=degenerate)


def triplet_margin_loss(emb, labels, margin: float = 0.05) -> LossResult:
    emb = np.asarray(emb, dtype=np.float64)
    labels = _check_labels(labels)
    dist, diff = _pairwise_distances(emb)
    same = labels[:, None] == labels[None, :]
    positive = same & ~np.eye(len(labels), dtype=bool)
    valid = positive[:, :, None] & ~same[:, None, :]  # [anchor, positive, negative]
    if not valid.any():
        return LossResult(0.0, np.zeros_like(emb), degenerate=True)
    t = dist[:, :, None] - dist[:, None, :] + margin
    active = valid & (t > 0)
    count = int(active.sum())
    if count == 0:
        return LossResult(0.0, np.zeros_like(emb))
    value = float(t[active].sum() / count)
    act = active.astype(np.float64) / count
    coef = act.sum(axis=2) - act.sum(axis=1)  # d/d dist[a,p] and -d/d dist[a,n]
    return LossResult(value, _distance_grad(coef, dist, diff))


def _log1p_sum_exp(a: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise log(1 + sum_{mask} exp(a)) and d/da, shifted for stability."""
    a = np.where(mask, a, -np.inf)
    top = np.maximum(a.max(axis=1, keepdims=True), 0.0)
    ex = np.where(mask, np.exp(a - top), 0.0)
    denom = np.exp(-top) + ex.sum(axis=1, keepdims=True)
    return (top + np.log(denom))[:, 0], ex / denom


def multi_similarity_loss(emb, labels, alpha: float = 2.0, beta: float = 50.0,
                          base: float = 0.5) -> LossResult:
    emb = np.asarray(emb, dtype=np.float64)
    labels = _check_labels(labels)
    unit, norm = _normalize(emb)
    sim = unit @ unit.T
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    neg = ~same
    anchors = pos.any(axis=1) & neg.any(axis=1)
    n_anchor = int(anchors.sum())
    if n_anchor == 0:
        return LossResult(0.0, np.zeros_like(emb), degenerate=True)
    pos_term, pos_w = _log1p_sum_exp(-alpha * (sim - base), pos)
    neg_term, neg_w = _log1p_sum_exp(beta * (sim - base), neg)
    per_anchor = pos_term / alpha + neg_term / beta
    value = float(per_anchor[anchors].sum() / n_anchor)
    d_sim = (neg_w - pos_w) * anchors[:, None] / n_anchor
    d_unit = (d_sim + d_sim.T) @ unit
    return LossResult(value, _normalize_backward(d_unit, unit, norm))


# ----------------------------------------------------------------------------
# proxy losses


def arcface_loss(emb, labels, proxies, margin_degrees: float = 3.5, scale: float = 211.0,
                 regularizer_weight: float = 9e-5) -> LossResult:
    """Additive angular margin on the true-class angle; margin given in degrees."""
    emb = np.asarray(emb, dtype=np.float64)
    proxies = np.asarray(proxies, dtype=np.float64)
    labels = _check_labels(labels, len(proxies))
    unit, norm = _normalize(emb)
    p_unit, p_norm = _normalize(proxies)
    cos = unit @ p_unit.T
    rows = np.arange(len(labels))
    m = math.radians(margin_degrees)
    c_true = cos[rows, labels]
    lo, hi = -1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP
    c_clamped = np.clip(c_true, lo, hi)
    sin_true = np.sqrt(1.0 - c_clamped * c_clamped)
    target = c_clamped * math.cos(m) - sin_true * math.sin(m)  # cos(theta + m)
    d_target = np.where((c_true > lo) & (c_true < hi),
                        math.cos(m) + c_clamped * math.sin(m) / sin_true, 0.0)
    logits = cos.copy()
    logits[rows, labels] = target
    value, d_logits = _softmax_xent(scale * logits, labels)
    d_cos = scale * d_logits
    d_cos[rows, labels] *= d_target
    dev = p_norm[:, 0] - 1.0
    value += regularizer_weight * float(np.mean(dev * dev))
    grad = _normalize_backward(d_cos @ p_unit, unit, norm)
    p_grad = _normalize_backward(d_cos.T @ unit, p_unit, p_norm)
    p_grad += (regularizer_weight * 2.0 / len(proxies)) * dev[:, None] * p_unit
    return LossResult(value, grad, p_grad)


def normalized_softmax_loss(emb, labels, proxies, temperature: float = 0.01) -> LossResult:
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    emb = np.asarray(emb, dtype=np.float64)
    proxies = np.asarray(proxies, dtype=np.float64)
    labels = _check_labels(labels, len(proxies))
    unit, norm = _normalize(emb)
    p_unit, p_norm = _normalize(proxies)
    value, d_logits = _softmax_xent(unit @ p_unit.T / temperature, labels)
    d_cos = d_logits / temperature
    grad = _normalize_backward(d_cos @ p_unit, unit, norm)
    p_grad = _normalize_backward(d_cos.T @ unit, p_unit, p_norm)
    return LossResult(value, grad, p_grad)


def cross_entropy_loss(logits, labels) -> LossResult:
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[1])
    value, grad = _softmax_xent(logits, labels)
    return LossResult(value, grad)


def compute_loss(config: LossConfig, emb, labels, proxies=None) -> LossResult:
    p = config.params
    if config.kind == "contrastive":
        return contrastive_loss(emb, labels, p["pos_margin"], p["neg_margin"])
    if config.kind == "triplet_margin":
        return triplet_margin_loss(emb, labels, p["margin"])
    if config.kind == "multi_similarity":
        return multi_similarity_loss(emb, labels, p["alpha"], p["beta"], p["base"])
    if config.kind == "arcface":
        return arcface_loss(emb, labels, proxies, p["margin_degrees"], p["scale"], p["regularizer_weight"])
    if config.kind == "normalized_softmax":
        return normalized_softmax_loss(emb, labels, proxies, p["temperature"])
    return cross_entropy_loss(emb, labels)
