"""Hot numeric kernels with numba-jitted and pure-numpy implementations.

The active backend is chosen once at import time from the environment
variable ``PROTOCG_BACKEND``:

    auto   use numba when importable (default)
    numba  require numba, fail loudly if missing
    numpy  force the pure-numpy fallbacks

Gradient-bearing math lives in :mod:`protocg.autodiff` and is always
numpy (BLAS-bound); these kernels cover the loop-heavy work outside the
tape: optimizer updates, momentum blending, k-means inner loops, and
candidate scoring during evaluation. ``benchmarks/bench_kernels.py``
times the two backends against each other.
"""

import os

import numpy as np

from .errors import ParameterError


def _resolve_backend() -> str:
    requested = os.environ.get("PROTOCG_BACKEND", "auto").strip().lower()
    if requested not in ("auto", "numba", "numpy"):
        raise ParameterError(
            f"PROTOCG_BACKEND must be auto|numba|numpy, got {requested!r}"
        )
    if requested == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if requested == "numba":
            raise ParameterError("PROTOCG_BACKEND=numba but numba is not importable")
        return "numpy"
    return "numba"


BACKEND = _resolve_backend()

if BACKEND == "numba":
    from numba import njit
else:  # decorator that leaves the python function untouched
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


# ---------------------------------------------------------------------------
# Adam update: fused elementwise recurrence, in place.
# Scalar coefficients arrive pre-cast to the array dtype so the numpy and
# numba paths round identically.
# ---------------------------------------------------------------------------

def _adam_np(p, g, m, v, lr, b1, ob1, b2, ob2, c1, c2, eps):
    m[...] = b1 * m + ob1 * g
    v[...] = b2 * v + ob2 * (g * g)
    p[...] = p - (lr * (m / c1)) / (np.sqrt(v / c2) + eps)


@njit(cache=True)
def _adam_nb(p, g, m, v, lr, b1, ob1, b2, ob2, c1, c2, eps):
    for i in range(p.shape[0]):
        m[i] = b1 * m[i] + ob1 * g[i]
        v[i] = b2 * v[i] + ob2 * (g[i] * g[i])
        p[i] = p[i] - (lr * (m[i] / c1)) / (np.sqrt(v[i] / c2) + eps)


def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    """One bias-corrected Adam step on flat float32 views, in place."""
    f = p.dtype.type
    args = (
        f(lr), f(beta1), f(1.0 - beta1), f(beta2), f(1.0 - beta2),
        f(1.0 - beta1 ** t), f(1.0 - beta2 ** t), f(eps),
    )
    if BACKEND == "numba":
        _adam_nb(p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1), *args)
    else:
        _adam_np(p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1), *args)


# ---------------------------------------------------------------------------
# Momentum blend: dst <- alpha*dst + (1-alpha)*src, in place.
# ---------------------------------------------------------------------------

def _momentum_np(dst, src, alpha, one_minus):
    dst[...] = alpha * dst + one_minus * src


@njit(cache=True)
def _momentum_nb(dst, src, alpha, one_minus):
    for i in range(dst.shape[0]):
        dst[i] = alpha * dst[i] + one_minus * src[i]


def momentum_blend(dst, src, alpha):
    f = dst.dtype.type
    if BACKEND == "numba":
        _momentum_nb(dst.reshape(-1), src.reshape(-1), f(alpha), f(1.0 - alpha))
    else:
        _momentum_np(dst.reshape(-1), src.reshape(-1), f(alpha), f(1.0 - alpha))


# ---------------------------------------------------------------------------
# k-means inner loops (float64 throughout: Lloyd monotonicity checks need
# the headroom). Assignment ties break toward the lower cluster index.
# ---------------------------------------------------------------------------

def _kmeans_assign_np(points, centroids):
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return labels.astype(np.int64), d2[np.arange(points.shape[0]), labels]


@njit(cache=True)
def _kmeans_assign_nb(points, centroids):
    n, d = points.shape
    c = centroids.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    for i in range(n):
        best = np.inf
        arg = 0
        for j in range(c):
            acc = 0.0
            for k in range(d):
                diff = points[i, k] - centroids[j, k]
                acc += diff * diff
            if acc < best:
                best = acc
                arg = j
        labels[i] = arg
        dists[i] = best
    return labels, dists


def kmeans_assign(points, centroids):
    """Nearest-centroid labels and squared distances (both float64)."""
    if BACKEND == "numba":
        return _kmeans_assign_nb(points, centroids)
    return _kmeans_assign_np(points, centroids)


def _kmeans_accumulate_np(points, labels, n_clusters):
    d = points.shape[1]
    sums = np.zeros((n_clusters, d), dtype=np.float64)
    np.add.at(sums, labels, points)
    counts = np.bincount(labels, minlength=n_clusters).astype(np.int64)
    return sums, counts


@njit(cache=True)
def _kmeans_accumulate_nb(points, labels, n_clusters):
    n, d = points.shape
    sums = np.zeros((n_clusters, d), dtype=np.float64)
    counts = np.zeros(n_clusters, dtype=np.int64)
    for i in range(n):
        j = labels[i]
        counts[j] += 1
        for k in range(d):
            sums[j, k] += points[i, k]
    return sums, counts


def kmeans_accumulate(points, labels, n_clusters):
    """Per-cluster coordinate sums and member counts."""
    if BACKEND == "numba":
        return _kmeans_accumulate_nb(points, labels, n_clusters)
    return _kmeans_accumulate_np(points, labels, n_clusters)


# ---------------------------------------------------------------------------
# Evaluation scoring: masked max of inner products between one user's
# interest vectors and a candidate matrix. Rows are pre-normalized, so the
# inner product is the cosine.
# ---------------------------------------------------------------------------

def _masked_max_np(cands, interests, active):
    sims = cands @ interests.T
    sims[:, ~active] = -np.inf
    return sims.max(axis=1).astype(np.float32)


@njit(cache=True)
def _masked_max_nb(cands, interests, active):
    n = cands.shape[0]
    kk, d = interests.shape
    out = np.empty(n, dtype=np.float32)
    for i in range(n):
        best = -np.inf
        for k in range(kk):
            if active[k]:
                acc = np.float32(0.0)
                for j in range(d):
                    acc += cands[i, j] * interests[k, j]
                if acc > best:
                    best = acc
        out[i] = best
    return out


def masked_max_scores(cands, interests, active):
    """Per-candidate max cosine over the active interest rows."""
    if BACKEND == "numba":
        return _masked_max_nb(cands, interests, active)
    return _masked_max_np(cands, interests, active)


def warmup():
    """Trigger JIT compilation of every kernel (no-op on the numpy backend)."""
    p = np.zeros(4, dtype=np.float32)
    g = np.ones(4, dtype=np.float32)
    adam_update(p, g, np.zeros(4, np.float32), np.zeros(4, np.float32),
                0.001, 0.9, 0.999, 1e-8, 1)
    momentum_blend(p, g, 0.999)
    pts = np.arange(8, dtype=np.float64).reshape(4, 2)
    labels, _ = kmeans_assign(pts, pts[:2])
    kmeans_accumulate(pts, labels, 2)
    masked_max_scores(np.ones((3, 2), np.float32), np.ones((2, 2), np.float32),
                      np.array([True, False]))
