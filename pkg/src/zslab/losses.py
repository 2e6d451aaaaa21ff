"""Training objectives.

Category-level and hard triplet hinges over cosine distance, the
classification loss against class text embeddings, the cross-category
relative-distance KL regularizer, the patch-shuffle triplet hinge, and the
two combined objectives (category-level and fine-grained).
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from .encoder import read_blob_file
from .errors import ConfigError
from .tensor import Tensor, cosine_distance, softmax, stack


@dataclass
class LossWeights:
    mu: float = 0.3
    mu_ps: float = 0.3
    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda3: float = 0.1
    lambda4: float = 1.0
    temperature: float = 0.07

    def validate(self) -> "LossWeights":
        if self.mu < 0 or self.mu_ps < 0:
            raise ConfigError("margins must be nonnegative")
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda4) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        return self


class ClassEmbeddingTable:
    """Unit-norm anchor vector per seen class, plus a softmax temperature.

    The default provider derives a deterministic pseudo-embedding from each
    class name: hash the name to seed a generator, draw a normal vector,
    normalize. A blob file of externally computed text embeddings can be
    loaded instead.
    """

    def __init__(self, vectors: dict[int, np.ndarray], temperature: float = 0.07):
        if temperature <= 0:
            raise ConfigError("temperature must be positive")
        self.temperature = temperature
        self.vectors = {}
        for cid, v in vectors.items():
            v = np.asarray(v, dtype=np.float64)
            norm = np.linalg.norm(v)
            if norm == 0.0:
                raise ConfigError(f"class {cid} embedding has zero norm")
            self.vectors[int(cid)] = v / norm

    @property
    def dim(self) -> int:
        return next(iter(self.vectors.values())).shape[0]

    @classmethod
    def from_class_names(cls, names_by_id: dict[int, str], dim: int,
                         temperature: float = 0.07) -> "ClassEmbeddingTable":
        vecs = {}
        for cid, name in names_by_id.items():
            seed = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
            vecs[cid] = np.random.default_rng(seed).standard_normal(dim)
        return cls(vecs, temperature)

    @classmethod
    def from_blob_file(cls, path: str, names_by_id: dict[int, str],
                       temperature: float = 0.07) -> "ClassEmbeddingTable":
        _, blobs = read_blob_file(path)
        missing = [n for n in names_by_id.values() if n not in blobs]
        if missing:
            raise ConfigError(f"embedding file lacks classes: {missing}")
        return cls({cid: blobs[name] for cid, name in names_by_id.items()}, temperature)

    def matrix(self, class_ids: list[int]) -> np.ndarray:
        return np.stack([self.vectors[c] for c in class_ids], axis=1)  # [d, n_classes]


def relative_distance(f_s: Tensor, f_p: Tensor, f_n: Tensor) -> Tensor:
    """d(s, p) - d(s, n); negative when the positive sits closer. Rowwise for [N, d]."""
    return cosine_distance(f_s, f_p) - cosine_distance(f_s, f_n)


def triplet_hinge(d_pos, d_neg, margin: float) -> Tensor:
    """max(0, margin + (d_pos - d_neg)) on precomputed distances."""
    delta = d_pos - d_neg
    if not isinstance(delta, Tensor):
        delta = Tensor(delta)
    return (delta + margin).relu()


def triplet_loss(f_s: Tensor, f_p: Tensor, f_n: Tensor, margin: float) -> Tensor:
    """Triplet hinge over cosine distances; mean over rows for [N, d] inputs."""
    loss = (relative_distance(f_s, f_p, f_n) + margin).relu()
    return loss if loss.data.ndim == 0 else loss.mean()


def prediction_probability(features: Tensor, table: ClassEmbeddingTable,
                           class_ids: list[int]) -> Tensor:
    """Softmax over cosine similarities to each class embedding, at temperature tau."""
    logits = features @ Tensor(table.matrix(class_ids))
    return softmax(logits, temperature=table.temperature, axis=-1)


def classification_loss(features: Tensor, labels: list[int], table: ClassEmbeddingTable) -> Tensor:
    """Mean cross-entropy of unit-norm features against the class table.

    Computed as logsumexp(z) - z_true with z = sim / tau, so extreme
    temperatures stay finite.
    """
    if features.data.ndim == 1:
        features = features.reshape(1, -1)
    n = features.shape[0]
    if len(labels) != n:
        raise ConfigError(f"{n} features but {len(labels)} labels")
    class_ids = sorted(table.vectors)
    unknown = set(labels) - set(class_ids)
    if unknown:
        raise ConfigError(f"labels not in class table: {sorted(unknown)}")
    logits = (features @ Tensor(table.matrix(class_ids))) * (1.0 / table.temperature)
    onehot = np.zeros((n, len(class_ids)))
    col = {c: j for j, c in enumerate(class_ids)}
    for i, lab in enumerate(labels):
        onehot[i, col[lab]] = 1.0
    z_true = (logits * Tensor(onehot)).sum(axis=-1)
    zmax = logits.data.max(axis=-1)  # detached; shifts cancel in the gradient
    lse = ((logits - Tensor(zmax[:, None])).exp().sum(axis=-1)).log() + Tensor(zmax)
    return (lse - z_true).mean()


@dataclass
class RelativeDistanceGroup:
    """One category's relative distances for its T in-batch hard triplets."""

    category_id: int
    deltas: Tensor  # shape [T]


def fdiv_loss(groups: list[RelativeDistanceGroup]) -> Tensor:
    """Average pairwise KL between per-category softmax distributions of deltas.

    D_c = softmax(deltas_c); returns sum_{i != j} KL(D_i || D_j) / (C(C-1)).
    With fewer than two groups the regularizer is zero (degenerate batch).
    """
    c = len(groups)
    if c < 2:
        warnings.warn("fdiv_loss needs >= 2 category groups; contributing 0", stacklevel=2)
        return Tensor(0.0)
    t = groups[0].deltas.size
    for g in groups:
        if g.deltas.size != t:
            raise ConfigError("all relative-distance groups must share the same triplet count")
    d = softmax(stack([g.deltas for g in groups], axis=0), axis=-1)  # [C, T]
    logd = d.log()
    # KL(D_i || D_j) = sum_t D_i (log D_i - log D_j); diagonal terms vanish
    self_ent = (d * logd).sum(axis=-1, keepdims=True)  # [C, 1] of sum D_i log D_i
    cross = d @ logd.swap_last()  # [C, C] of sum_t D_i[t] log D_j[t]
    kl_sum = (self_ent.broadcast_to((c, c)) - cross).sum()
    return kl_sum * (1.0 / (c * (c - 1)))


def patch_shuffle_loss(f_s_g1: Tensor, f_p_g1: Tensor, f_p_g2: Tensor, mu_ps: float) -> Tensor:
    """Hinge pulling a shuffled sketch toward the same-permutation photo.

    Anchor and positive share permutation gamma1; the negative is the same
    photo under a different gamma2 (distinctness enforced by the augmenter).
    """
    return triplet_loss(f_s_g1, f_p_g1, f_p_g2, mu_ps)


@dataclass
class LossTerms:
    """Per-term bookkeeping; total always equals the weighted sum of parts."""

    total: Tensor
    l_tri: float = 0.0
    l_cls_s: float = 0.0
    l_cls_p: float = 0.0
    l_delta: float = 0.0
    l_ps: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)

    def logged(self) -> dict[str, float]:
        return {
            "l_tri": self.l_tri,
            "l_cls_s": self.l_cls_s,
            "l_cls_p": self.l_cls_p,
            "l_delta": self.l_delta,
            "l_ps": self.l_ps,
            "total": self.total.item(),
        }

    def weighted_parts_sum(self) -> float:
        w = self.weights
        return (self.l_tri + w.lambda_cls * (self.l_cls_s + self.l_cls_p)
                + w.lambda3 * self.l_delta + w.lambda4 * self.l_ps)


def objective_zs(f_s: Tensor, f_p: Tensor, f_n: Tensor, labels: list[int],
                 table: ClassEmbeddingTable, weights: LossWeights) -> LossTerms:
    """Category-level objective: mean triplet + lambda1 (sketch + photo classification)."""
    tri = triplet_loss(f_s, f_p, f_n, weights.mu)
    total = tri
    terms = LossTerms(total=tri, l_tri=tri.item(), weights=weights)
    if weights.lambda1 > 0.0:
        cls_s = classification_loss(f_s, labels, table)
        cls_p = classification_loss(f_p, labels, table)
        total = tri + weights.lambda1 * (cls_s + cls_p)
        terms.l_cls_s, terms.l_cls_p = cls_s.item(), cls_p.item()
        terms.total = total
    return terms


def objective_fg(f_s: Tensor, f_p: Tensor, f_n: Tensor, labels: list[int],
                 group_index: dict[int, list[int]], shuffled: tuple[Tensor, Tensor, Tensor] | None,
                 table: ClassEmbeddingTable, weights: LossWeights) -> LossTerms:
    """Fine-grained objective: hard triplet + lambda2 cls + lambda3 fdiv + lambda4 patch-shuffle.

    group_index maps category id -> row indices of its triplets, equal-sized
    across categories; `shuffled` carries the (s_g1, p_g1, p_g2) feature rows.
    """
    tri = triplet_loss(f_s, f_p, f_n, weights.mu)
    total = tri
    terms = LossTerms(total=tri, l_tri=tri.item(), weights=weights)

    if weights.lambda2 > 0.0:
        cls_s = classification_loss(f_s, labels, table)
        cls_p = classification_loss(f_p, labels, table)
        total = total + weights.lambda2 * (cls_s + cls_p)
        terms.l_cls_s, terms.l_cls_p = cls_s.item(), cls_p.item()

    if weights.lambda3 > 0.0:
        deltas = relative_distance(f_s, f_p, f_n)  # [N]
        groups = [RelativeDistanceGroup(cid, deltas[np.asarray(idx)])
                  for cid, idx in sorted(group_index.items())]
        ldelta = fdiv_loss(groups)
        total = total + weights.lambda3 * ldelta
        terms.l_delta = ldelta.item()

    if weights.lambda4 > 0.0 and shuffled is not None:
        lps = patch_shuffle_loss(*shuffled, weights.mu_ps)
        total = total + weights.lambda4 * lps
        terms.l_ps = lps.item()

    terms.total = total
    return terms
