"""Prototypical contrastive learning: random-mask augmentation, the momentum
key encoder, InfoNCE over in-batch negatives, k-means prototypes with
concentration temperatures, and the prototype loss."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .errors import ContractError, ParameterError
from .model import ModelParams, tower_mlp

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Random-mask augmentation
# ---------------------------------------------------------------------------

def draw_feature_mask(shape, keep_ratio: float, rng: np.random.Generator,
                      dtype=np.float32) -> np.ndarray:
    """0/1 mask with exactly round(keep_ratio * D) ones per row, positions
    drawn fresh for every row."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ParameterError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    width = shape[-1]
    keep = int(round(keep_ratio * width))
    rows = int(np.prod(shape[:-1], dtype=np.int64)) if len(shape) > 1 else 1
    order = np.argsort(rng.random((rows, width)), axis=1)
    mask = np.zeros((rows, width), dtype=dtype)
    np.put_along_axis(mask, order[:, :keep], 1.0, axis=1)
    return mask.reshape(shape)


def augment(e_x, keep_ratio: float, rng: np.random.Generator):
    """Elementwise product with a fresh feature mask; keep_ratio=1 is the
    identity. Accepts a Tensor (stays on the tape) or a raw array."""
    if isinstance(e_x, Tensor):
        mask = draw_feature_mask(e_x.shape, keep_ratio, rng,
                                 dtype=e_x.values.dtype)
        return ad.mul(e_x, mask)
    e_x = np.asarray(e_x)
    return e_x * draw_feature_mask(e_x.shape, keep_ratio, rng, dtype=e_x.dtype)


# ---------------------------------------------------------------------------
# Momentum key encoder
# ---------------------------------------------------------------------------

@dataclass
class KeyEncoderState:
    """Shadow copy of the query-encoder weights; updated only by momentum
    blending, never by gradients."""

    weights: dict[str, Tensor]
    alpha_m: float


def init_key_encoder(params: ModelParams, alpha_m: float) -> KeyEncoderState:
    shadow = {name: Tensor(np.array(t.values, copy=True), dtype=t.values.dtype)
              for name, t in params.tower_weights().items()}
    return KeyEncoderState(weights=shadow, alpha_m=alpha_m)


def key_encoder_forward(state: KeyEncoderState, e_x_aug: Tensor) -> Tensor:
    """Same architecture as the item tower under the shadow weights; the
    output is gradient-stopped."""
    return ad.stop_gradient(tower_mlp(state.weights, e_x_aug))


def momentum_update(g: dict[str, Tensor], g_prime: dict[str, Tensor],
                    alpha_m: float) -> None:
    """g_prime <- alpha_m * g_prime + (1 - alpha_m) * g, in place."""
    if set(g) != set(g_prime):
        raise ContractError(f"momentum_update: parameter names differ: "
                            f"{sorted(g)} vs {sorted(g_prime)}")
    for name, src in g.items():
        dst = g_prime[name]
        if dst.values.shape != src.values.shape:
            raise ContractError(
                f"momentum_update: shape mismatch for {name!r}: "
                f"{dst.values.shape} vs {src.values.shape}")
        kernels.momentum_blend(dst.values, src.values, alpha_m)


# ---------------------------------------------------------------------------
# InfoNCE
# ---------------------------------------------------------------------------

def _logsumexp_rows(logits: Tensor) -> Tensor:
    """log-sum-exp along axis 1 with a gradient-stopped max shift."""
    m = ad.stop_gradient(ad.tmax(logits, axis=1, keepdims=True))
    lse = ad.log(ad.tsum(ad.exp(ad.sub(logits, m)), axis=1))
    return ad.add(lse, ad.reshape(m, (logits.shape[0],)))


def info_nce_loss(queries: Tensor, keys, t_ssl: float,
                  extra_keys=None) -> Tensor:
    """Contrastive loss over row-aligned (query, key) positives.

    Negatives are the other B-1 in-batch keys; ``extra_keys`` appends J
    sampled keys to the denominator for the J-negatives variant.
    """
    if t_ssl <= 0:
        raise ParameterError(f"t_ssl must be positive, got {t_ssl}")
    kv = keys.values if isinstance(keys, Tensor) else np.asarray(keys)
    bsz = queries.shape[0]
    if kv.shape != tuple(queries.shape):
        raise ContractError(f"info_nce_loss: queries {tuple(queries.shape)} vs "
                            f"keys {kv.shape}")
    if bsz < 2 and extra_keys is None:
        raise ParameterError("info_nce_loss needs a batch of >= 2 (no negatives)")
    if extra_keys is not None:
        ev = extra_keys.values if isinstance(extra_keys, Tensor) else np.asarray(extra_keys)
        kv = np.concatenate([kv, ev], axis=0)

    kn = kv / np.maximum(np.sqrt((kv * kv).sum(axis=1, keepdims=True)),
                         ad.NORM_EPS)
    qn = ad.l2_normalize(queries, axis=-1)
    keys_t = Tensor(np.ascontiguousarray(kn.T), dtype=kn.dtype)
    logits = ad.mul(ad.matmul(qn, keys_t), 1.0 / t_ssl)
    pos_hot = np.zeros((bsz, kv.shape[0]), dtype=kn.dtype)
    pos_hot[np.arange(bsz), np.arange(bsz)] = 1.0
    positives = ad.tsum(ad.mul(logits, pos_hot), axis=1)
    return ad.tmean(ad.sub(_logsumexp_rows(logits), positives))


# ---------------------------------------------------------------------------
# k-means prototypes
# ---------------------------------------------------------------------------

@dataclass
class PrototypeSet:
    centroids: np.ndarray        # (|C|, d) float32
    assignments: np.ndarray      # (n_items,) int64, -1 where unclustered
    sizes: np.ndarray            # (|C|,) member counts
    taus: np.ndarray             # (|C|,) concentration temperatures, float32
    stamp: int = -1              # epoch of the refresh that built this set
    objective_trace: list = field(default_factory=list)

    @property
    def n_clusters(self):
        return self.centroids.shape[0]


def _kmeans_pp_init(points: np.ndarray, n_clusters: int,
                    rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((n_clusters, points.shape[1]), dtype=np.float64)
    centroids[0] = points[int(rng.integers(0, n))]
    best = ((points - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, n_clusters):
        total = best.sum()
        if total <= 0.0:
            centroids[c] = points[int(rng.integers(0, n))]
            continue
        pick = int(rng.choice(n, p=best / total))
        centroids[c] = points[pick]
        best = np.minimum(best, ((points - centroids[c]) ** 2).sum(axis=1))
    return centroids


def kmeans_cluster(points, n_clusters: int, max_iters: int,
                   rng: np.random.Generator) -> PrototypeSet:
    """k-means++ seeded Lloyd iterations until the assignment fixpoint or
    ``max_iters``; empty clusters are re-seeded with the point farthest from
    its current centroid. The squared-distance objective after every
    assignment step lands in ``objective_trace``.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < n_clusters:
        raise ParameterError(f"kmeans needs >= {n_clusters} points, got {n}")
    centroids = _kmeans_pp_init(points, n_clusters, rng)
    labels, dists = kernels.kmeans_assign(points, centroids)
    trace = [float(dists.sum())]

    for _ in range(max_iters):
        sums, counts = kernels.kmeans_accumulate(points, labels, n_clusters)
        nonzero = counts > 0
        centroids[nonzero] = sums[nonzero] / counts[nonzero, None]
        empty = np.flatnonzero(~nonzero)
        if empty.size:
            order = np.argsort(-dists, kind="stable")
            taken = 0
            for c in empty:
                centroids[c] = points[order[taken]]
                taken += 1
        new_labels, dists = kernels.kmeans_assign(points, centroids)
        trace.append(float(dists.sum()))
        converged = bool(np.array_equal(new_labels, labels)) and not empty.size
        labels = new_labels
        if converged:
            break

    sizes = np.bincount(labels, minlength=n_clusters).astype(np.int64)
    return PrototypeSet(centroids=centroids.astype(np.float32),
                        assignments=labels, sizes=sizes,
                        taus=np.zeros(n_clusters, dtype=np.float32),
                        objective_trace=trace)


def concentration_tau(members: np.ndarray, centroid: np.ndarray,
                      tau_min: float) -> float:
    """Mean spread temperature: sum of member-to-centroid distances over
    N*ln(N+1), clamped below at tau_min."""
    members = np.asarray(members, dtype=np.float64)
    centroid = np.asarray(centroid, dtype=np.float64)
    n = members.shape[0]
    if n < 1:
        raise ContractError("concentration_tau: empty cluster")
    dist_sum = float(np.sqrt(((members - centroid) ** 2).sum(axis=1)).sum())
    return max(dist_sum / (n * np.log(n + 1.0)), tau_min)


def build_prototypes(key_outputs: np.ndarray, n_items: int, n_clusters: int,
                     tau_min: float, rng: np.random.Generator,
                     max_iters: int = 100, stamp: int = -1,
                     item_ids=None, subsample_cap: int | None = None
                     ) -> PrototypeSet:
    """Cluster key-encoder outputs and attach temperatures. ``item_ids`` maps
    clustered rows to vocab indices (identity by default); a subsample cap
    bounds the clustered corpus for larger vocabularies."""
    key_outputs = np.asarray(key_outputs)
    ids = (np.arange(key_outputs.shape[0], dtype=np.int64) if item_ids is None
           else np.asarray(item_ids, dtype=np.int64))
    if subsample_cap is not None and key_outputs.shape[0] > subsample_cap:
        picks = rng.choice(key_outputs.shape[0], size=subsample_cap,
                           replace=False)
        picks.sort()
        key_outputs, ids = key_outputs[picks], ids[picks]

    protos = kmeans_cluster(key_outputs, n_clusters, max_iters, rng)
    assignments = np.full(n_items, -1, dtype=np.int64)
    assignments[ids] = protos.assignments
    taus = np.empty(n_clusters, dtype=np.float32)
    for c in range(n_clusters):
        member_rows = key_outputs[protos.assignments == c]
        taus[c] = concentration_tau(member_rows, protos.centroids[c], tau_min)
    protos.assignments = assignments
    protos.taus = taus
    protos.stamp = stamp
    return protos


def prototype_loss(queries: Tensor, item_idx, protos: PrototypeSet, r: int,
                   rng: np.random.Generator, neg_clusters=None) -> Tensor:
    """Softmax contrast of each item against its own prototype versus ``r``
    prototypes drawn (without replacement) from other clusters, each scored
    at its own concentration temperature."""
    if r < 1:
        raise ParameterError("prototype_loss needs r >= 1 negative prototypes")
    if r > protos.n_clusters - 1:
        raise ParameterError(f"r={r} exceeds available negative clusters "
                             f"({protos.n_clusters - 1})")
    item_idx = np.asarray(item_idx, dtype=np.int64)
    bsz = item_idx.shape[0]
    own = protos.assignments[item_idx].copy()
    fresh = own < 0
    if fresh.any():
        lbl, _ = kernels.kmeans_assign(
            queries.values[fresh].astype(np.float64),
            protos.centroids.astype(np.float64))
        own[fresh] = lbl

    if neg_clusters is None:
        neg_clusters = np.empty((bsz, r), dtype=np.int64)
        for b in range(bsz):
            draws = rng.choice(protos.n_clusters - 1, size=r, replace=False)
            neg_clusters[b] = draws + (draws >= own[b])
    else:
        neg_clusters = np.asarray(neg_clusters, dtype=np.int64)

    picked = np.concatenate([own[:, None], neg_clusters], axis=1)  # (B, r+1)
    cents = protos.centroids.astype(queries.values.dtype)
    cn = cents / np.maximum(
        np.sqrt((cents * cents).sum(axis=1, keepdims=True)), ad.NORM_EPS)
    cmat = cn[picked]                                              # (B, r+1, d)
    inv_tau = (1.0 / protos.taus[picked]).astype(queries.values.dtype)

    qn = ad.l2_normalize(queries, axis=-1)
    sims = ad.tsum(ad.mul(ad.reshape(qn, (bsz, 1, qn.shape[-1])), cmat), axis=2)
    logits = ad.mul(sims, inv_tau)
    pos_hot = np.zeros((bsz, r + 1), dtype=queries.values.dtype)
    pos_hot[:, 0] = 1.0
    positives = ad.tsum(ad.mul(logits, pos_hot), axis=1)
    return ad.tmean(ad.sub(_logsumexp_rows(logits), positives))


def export_prototypes(protos: PrototypeSet, path) -> None:
    """Snapshot CSV: cluster_id, n_c, tau_c, c_1..c_d."""
    d = protos.centroids.shape[1]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cluster_id", "n_c", "tau_c"] +
                        [f"c_{j + 1}" for j in range(d)])
        for c in range(protos.n_clusters):
            writer.writerow([c, int(protos.sizes[c]), f"{protos.taus[c]:.9g}"]
                            + [f"{v:.9g}" for v in protos.centroids[c]])
