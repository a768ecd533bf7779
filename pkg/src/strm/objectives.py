"""Training objective: cross-entropy terms plus video- and part-level triplets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module, uniform_dense, zeros
from .tensor import BatchNormState, ShapeError, Tensor

DEFAULT_MARGIN = 0.4


class ClassifierBlock(Module):
    """FC-512, BN, ReLU, dropout, FC to identity logits."""

    def __init__(self, in_dim: int, num_identities: int, rng: np.random.Generator | None = None,
                 hidden: int = 512, dropout: float = 0.5):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dropout = dropout
        self.fc1_w = uniform_dense(rng, hidden, in_dim, "fc1_w")
        self.fc1_b = zeros(hidden, "fc1_b")
        self.bn = BatchNormState.create(hidden)
        self.fc2_w = uniform_dense(rng, num_identities, hidden, "fc2_w")
        self.fc2_b = zeros(num_identities, "fc2_b")

    def __call__(self, f: Tensor, training: bool = False, rng=None) -> Tensor:
        h = T.dense(f, self.fc1_w, self.fc1_b)
        h = T.relu(T.batchnorm(h, self.bn, training, axis=-1))
        h = T.dropout(h, self.dropout, rng, training)
        return T.dense(h, self.fc2_w, self.fc2_b)


@dataclass
class TripletConfig:
    margin: float = DEFAULT_MARGIN
    n_ids: int = 10
    k_seqs: int = 2

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.n_ids < 2 or self.k_seqs < 2:
            raise ValueError("batch-hard mining needs N >= 2 and K >= 2")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{n} logit rows but {labels.shape} labels")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"label out of range for {k} classes: {labels}")
    logp = T.log_softmax(logits, axis=-1)
    picked = T.take(logp, np.arange(n) * k + labels)
    return -T.mean(picked)


def cross_entropy_losses(f_logits: Tensor, frame_aux_logits: Tensor, labels: np.ndarray) -> Tensor:
    """Identity-classifier CE plus auxiliary CE on time-averaged frame logits.

    ``f_logits`` is [B, n] from the classifier block, ``frame_aux_logits``
    is [B, T, n].
    """
    aux = T.mean(frame_aux_logits, axis=1)
    return cross_entropy(f_logits, labels) + cross_entropy(aux, labels)


def hard_indices(dist: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor hardest positive (anchor included) and hardest negative column.

    Ties go to the lowest index.
    """
    same = labels[:, None] == labels[None, :]
    pos = np.argmax(np.where(same, dist, -np.inf), axis=1)
    neg = np.argmin(np.where(same, np.inf, dist), axis=1)
    return pos, neg


def _as_rows(features: Tensor) -> tuple[Tensor, np.ndarray]:
    if features.ndim == 3:
        n, k, d = features.shape
        return T.reshape(features, (n * k, d)), np.repeat(np.arange(n), k)
    raise ShapeError(f"expected [N, K, d] features, got {features.shape}")


def batch_hard_triplet(features: Tensor, margin: float = DEFAULT_MARGIN) -> Tensor:
    """Batch-hard triplet loss over an [N, K, d] PK batch with Euclidean distance.

    Per-anchor hinges are averaged with a shifted mean, so a batch of
    identical features scores exactly ``margin``.
    """
    if features.ndim != 3:
        raise ShapeError(f"expected [N, K, d] features, got {features.shape}")
    n, k, _ = features.shape
    if n < 2 or k < 1:
        raise ValueError(f"batch-hard triplet needs N >= 2 and K >= 1, got N={n}, K={k}")
    rows, labels = _as_rows(features)
    m = n * k
    dist = T.pairwise_distance(rows)
    pos, neg = hard_indices(dist.data, labels)
    anchors = np.arange(m) * m
    dp = T.take(dist, anchors + pos)
    dn = T.take(dist, anchors + neg)
    return T.shifted_mean(T.relu(T.sub(dp, dn) + margin))


def part_features(s: Tensor) -> Tensor:
    """Strip features: mean over time and width of each row.

    [C, T, H, W] -> [H, C]; batched [B, C, T, H, W] -> [B, H, C].
    """
    if s.ndim not in (4, 5):
        raise ShapeError(f"part_features expects [C,T,H,W] or [B,C,T,H,W], got {s.shape}")
    p = T.mean(s, axis=(-3, -1))  # [..., C, H]
    axes = (1, 0) if s.ndim == 4 else (0, 2, 1)
    return T.transpose(p, axes)


def part_level_loss(parts: Tensor, margin: float = DEFAULT_MARGIN) -> Tensor:
    """Batch-hard triplet per strip on [N, K, H, C] parts, averaged over strips."""
    if parts.ndim != 4:
        raise ShapeError(f"expected [N, K, H, C] parts, got {parts.shape}")
    per_strip = [batch_hard_triplet(parts[:, :, r, :], margin) for r in range(parts.shape[2])]
    return T.shifted_mean(T.stack(per_strip))


def total_loss(l_c: Tensor | None = None, l_v: Tensor | None = None, l_p: Tensor | None = None,
               use_lc: bool = True, use_lv: bool = True, use_lp: bool = True) -> Tensor:
    """Unweighted sum of the enabled terms."""
    total = Tensor(0.0)
    for term, on in ((l_c, use_lc), (l_v, use_lv), (l_p, use_lp)):
        if on and term is not None:
            total = total + term
    return total
