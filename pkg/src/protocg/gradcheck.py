"""Finite-difference verification of every differentiable primitive plus the
full composite training loss, and exact contract checks for the two
gradient-shaping primitives (stop_gradient, straight_through) whose whole
point is to differ from forward sensitivity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .contrastive import draw_feature_mask, info_nce_loss, prototype_loss, \
    PrototypeSet
from .errors import ContractError
from .model import (aisl_forward, embed_item_features, init_model_params,
                    interests_batched, item_tower_forward, main_loss,
                    score_batched, tower_mlp)

PRIMITIVE_TOL = 1e-3
COMPOSITE_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_err < self.tol


def finite_difference_gradcheck(f, x: Tensor, step: float = 1e-3) -> float:
    """Max over coordinates of |analytic - central| / (|central| + 1e-8).

    ``f`` maps the tensor to a scalar; the tensor is perturbed in place, so
    ``f`` may close over it instead of using the argument.
    """
    x.grad = None
    tape = Tape()
    with tape:
        out = f(x)
    if out.values.size != 1:
        raise ContractError("gradcheck target must be scalar")
    backward(tape, out)
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.values))
    analytic = analytic.reshape(-1).astype(np.float64)

    flat = x.values.reshape(-1)
    numeric = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(f(x).values)
        flat[i] = orig - step
        down = float(f(x).values)
        flat[i] = orig
        numeric[i] = (up - down) / (2.0 * step)
    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    return float(rel.max()) if rel.size else 0.0


# ---------------------------------------------------------------------------
# Per-primitive random instances
# ---------------------------------------------------------------------------

def _spread(rng, shape, axis=-1, lo=-2.0, hi=2.0):
    """Random values with guaranteed gaps along ``axis`` so max/argmax stay
    put under finite-difference perturbation."""
    n = shape[axis]
    base = np.linspace(lo, hi, n)
    out = np.empty(shape)
    flat = out.reshape(-1, n) if axis in (-1, len(shape) - 1) else None
    assert flat is not None, "spread supports the last axis only"
    for row in flat:
        row[:] = rng.permutation(base) + rng.uniform(-0.02, 0.02, size=n)
    return out


def _primitive_cases(rng):
    """(name, build) pairs; build returns (f, x) with x requiring grad."""
    f64 = np.float64

    def t(values, grad=False):
        return Tensor(values, requires_grad=grad, dtype=f64)

    def reduce_scalar(y, w):
        return ad.tsum(ad.mul(y, w))

    def case_add():
        x = t(rng.normal(size=(3, 4)), grad=True)
        other = t(rng.normal(size=(4,)))
        w = rng.normal(size=(3, 4))
        return (lambda _: reduce_scalar(ad.add(x, other), w)), x

    def case_sub():
        x = t(rng.normal(size=(2, 5)), grad=True)
        other = t(rng.normal(size=(2, 5)))
        w = rng.normal(size=(2, 5))
        return (lambda _: reduce_scalar(ad.sub(other, x), w)), x

    def case_mul():
        x = t(rng.normal(size=(3, 1, 4)), grad=True)
        other = t(rng.normal(size=(2, 4)))
        w = rng.normal(size=(3, 2, 4))
        return (lambda _: reduce_scalar(ad.mul(x, other), w)), x

    def case_matmul_lhs():
        x = t(rng.normal(size=(3, 4)), grad=True)
        other = t(rng.normal(size=(4, 2)))
        w = rng.normal(size=(3, 2))
        return (lambda _: reduce_scalar(ad.matmul(x, other), w)), x

    def case_matmul_rhs():
        other = t(rng.normal(size=(2, 3, 4)))
        x = t(rng.normal(size=(4, 2)), grad=True)
        w = rng.normal(size=(2, 3, 2))
        return (lambda _: reduce_scalar(ad.matmul(other, x), w)), x

    def case_exp():
        x = t(rng.normal(size=(6,)), grad=True)
        w = rng.normal(size=(6,))
        return (lambda _: reduce_scalar(ad.exp(x), w)), x

    def case_log():
        x = t(np.abs(rng.normal(size=(6,))) + 0.5, grad=True)
        w = rng.normal(size=(6,))
        return (lambda _: reduce_scalar(ad.log(x), w)), x

    def case_relu():
        raw = rng.normal(size=(8,))
        x = t(raw + np.sign(raw) * 0.2, grad=True)   # stay off the kink
        w = rng.normal(size=(8,))
        return (lambda _: reduce_scalar(ad.relu(x), w)), x

    def case_sigmoid():
        x = t(rng.normal(size=(7,)) * 2, grad=True)
        w = rng.normal(size=(7,))
        return (lambda _: reduce_scalar(ad.sigmoid(x), w)), x

    def case_clamp():
        x = t(rng.uniform(-3, 3, size=(9,)), grad=True)
        w = rng.normal(size=(9,))
        # bounds far from every sample point relative to the fd step
        return (lambda _: reduce_scalar(ad.clamp(x, -3.5, 3.5), w)), x

    def case_reshape():
        x = t(rng.normal(size=(2, 6)), grad=True)
        w = rng.normal(size=(3, 4))
        return (lambda _: reduce_scalar(ad.reshape(x, (3, 4)), w)), x

    def case_transpose():
        x = t(rng.normal(size=(2, 3, 4)), grad=True)
        w = rng.normal(size=(4, 2, 3))
        return (lambda _: reduce_scalar(ad.transpose(x, (2, 0, 1)), w)), x

    def case_concat():
        x = t(rng.normal(size=(3, 2)), grad=True)
        other = t(rng.normal(size=(3, 3)))
        w = rng.normal(size=(3, 5))
        return (lambda _: reduce_scalar(ad.concat([x, other], axis=1), w)), x

    def case_gather():
        x = t(rng.normal(size=(5, 3)), grad=True)
        idx = rng.integers(0, 5, size=7)   # repeats exercise accumulation
        w = rng.normal(size=(7, 3))
        return (lambda _: reduce_scalar(ad.gather(x, idx), w)), x

    def case_sum():
        x = t(rng.normal(size=(3, 4)), grad=True)
        w = rng.normal(size=(3,))
        return (lambda _: reduce_scalar(ad.tsum(x, axis=1), w)), x

    def case_mean():
        x = t(rng.normal(size=(4, 3)), grad=True)
        w = rng.normal(size=(3,))
        return (lambda _: reduce_scalar(ad.tmean(x, axis=0), w)), x

    def case_max():
        x = t(_spread(rng, (3, 6)), grad=True)
        w = rng.normal(size=(3,))
        return (lambda _: reduce_scalar(ad.tmax(x, axis=1), w)), x

    def case_softmax():
        temp = float(rng.uniform(0.3, 3.0))
        x = t(rng.normal(size=(3, 5)), grad=True)
        w = rng.normal(size=(3, 5))
        return (lambda _: reduce_scalar(
            ad.softmax_with_temperature(x, temp, axis=1), w)), x

    def case_l2_normalize():
        x = t(rng.normal(size=(3, 4)) + np.sign(rng.normal(size=(3, 4))),
              grad=True)
        w = rng.normal(size=(3, 4))
        return (lambda _: reduce_scalar(ad.l2_normalize(x, axis=1), w)), x

    def case_cosine():
        x = t(rng.normal(size=(5,)) + 1.0, grad=True)
        other = t(rng.normal(size=(5,)) - 1.0)
        return (lambda _: ad.cosine_similarity(x, other)), x

    return [(fn.__name__.removeprefix("case_"), fn) for fn in (
        case_add, case_sub, case_mul, case_matmul_lhs, case_matmul_rhs,
        case_exp, case_log, case_relu, case_sigmoid, case_clamp,
        case_reshape, case_transpose, case_concat, case_gather,
        case_sum, case_mean, case_max, case_softmax,
        case_l2_normalize, case_cosine)]


def run_primitive_checks(seed: int, instances: int = 100,
                         step: float = 1e-3) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 7])
    results = []
    for name, build in _primitive_cases(rng):
        worst = 0.0
        for _ in range(instances):
            f, x = build()
            worst = max(worst, finite_difference_gradcheck(f, x, step=step))
        results.append(CheckResult(name, worst, PRIMITIVE_TOL))
    return results


def run_contract_checks(seed: int) -> list[CheckResult]:
    """Exact gradient contracts for the primitives that intentionally break
    the forward/backward correspondence."""
    rng = np.random.default_rng([seed, 11])
    results = []

    x = Tensor(rng.normal(size=(6,)), requires_grad=True, dtype=np.float64)
    tape = Tape()
    with tape:
        y = ad.tsum(ad.add(x, ad.stop_gradient(ad.sub(ad.mul(x, x), x))))
    backward(tape, y)
    err = float(np.abs(x.grad - 1.0).max())  # d/dx [x + sg(x^2 - x)] == 1
    results.append(CheckResult("stop_gradient", err, 1e-12))

    soft_in = Tensor(rng.normal(size=(4,)), requires_grad=True,
                     dtype=np.float64)
    hard = (rng.random(4) < 0.5).astype(np.float64)
    w = rng.normal(size=(4,))
    tape = Tape()
    with tape:
        soft = ad.sigmoid(soft_in)
        out = ad.tsum(ad.mul(ad.straight_through(hard, soft), w))
    backward(tape, out)
    ste_grad = soft_in.grad.copy()
    soft_in.grad = None
    tape = Tape()
    with tape:
        ref = ad.tsum(ad.mul(ad.sigmoid(soft_in), w))
    backward(tape, ref)
    err = float(np.abs(ste_grad - soft_in.grad).max())
    results.append(CheckResult("straight_through", err, 1e-15))
    return results


# ---------------------------------------------------------------------------
# Full composite loss
# ---------------------------------------------------------------------------

def _kink_margin(params, seq_idx, lengths, f_a, cand, uniq) -> float:
    """Smallest distance of any piecewise-linear breakpoint (ReLU preacts,
    argmax runner-up gaps) from its switching point; finite differences are
    only trustworthy when this dwarfs the step size."""
    v = lambda t: t.values
    margins = []
    items = np.unique(np.concatenate([cand.reshape(-1), uniq,
                                      seq_idx.reshape(-1)]))
    e_x = np.concatenate([v(params.item_emb)[items],
                          v(params.cat_emb)[params.item_category[items]]],
                         axis=1)
    margins.append(np.abs(e_x @ v(params.tower_w1)
                          + v(params.tower_b1)).min())
    h = v(params.act_emb)[f_a]
    for w, b in zip(params.aisl_w, params.aisl_b):
        pre = h @ v(w) + v(b)
        margins.append(np.abs(pre).min())
        h = np.maximum(pre, 0)
    top2 = np.sort(h, axis=1)
    margins.append((top2[:, -1] - top2[:, -2]).min())  # hard-mask stability

    ue = interests_batched(params, seq_idx, lengths).values
    sel = aisl_forward(params, f_a, t_aisl=1.0, mode="tail-cumsum")
    e_cand = embed_item_features(params, cand.reshape(-1))
    ie = item_tower_forward(params, e_cand).values.reshape(cand.shape + (-1,))
    sims = np.einsum("bkd,bcd->bkc", ue, ie)
    masked = sel.soft.values[:, :, None] * sims \
        - 1.0e4 * (1.0 - sel.hard)[:, :, None]
    ranked = np.sort(masked, axis=1)
    margins.append((ranked[:, -1] - ranked[:, -2]).min())  # score argmax
    return float(min(margins))


def build_composite_case(seed: int, dtype=np.float64, batch: int = 4,
                         n_clusters: int = 4, r: int = 2):
    """A tiny end-to-end loss closure over frozen randomness.

    Everything stochastic (batch, feature masks, negative prototypes) and
    everything gradient-stopped in training (momentum keys, prototypes) is
    drawn once and held constant, so the loss is a deterministic function
    of the parameters. Scoring uses the soft selection mask: that is the
    exact path the straight-through estimator differentiates, making the
    whole loss finite-difference checkable. Draws that leave a ReLU kink or
    an argmax tie within finite-difference reach are redrawn.
    """
    n_items, n_cats, d, d_e, k, n_max = 12, 4, 4, 4, 3, 6
    for attempt in range(64):
        rng = np.random.default_rng([seed, 13, attempt])
        params = init_model_params(
            n_items=n_items, n_categories=n_cats,
            item_category=rng.integers(0, n_cats, size=n_items),
            d=d, d_e=d_e, k_interests=k, aisl_layers=2, n_max=n_max,
            gamma_init=2.0, rng=rng, dtype=dtype)

        lengths = rng.integers(1, n_max, size=batch)
        seq_idx = np.zeros((batch, int(lengths.max())), dtype=np.int64)
        for b in range(batch):
            seq_idx[b, :lengths[b]] = rng.integers(0, n_items,
                                                   size=lengths[b])
        f_a = rng.integers(0, 4, size=batch)
        cand = rng.integers(0, n_items, size=(batch, 2))
        labels = np.zeros((batch, 2), dtype=np.float64)
        labels[:, 0] = 1.0
        uniq = np.unique(cand[:, 0])
        if len(uniq) < 2:
            cand[0, 0] = (cand[1, 0] + 1) % n_items
            uniq = np.unique(cand[:, 0])
        if _kink_margin(params, seq_idx, lengths, f_a, cand, uniq) > 2e-3:
            break

    feat_mask = draw_feature_mask((len(uniq), d_e + params.cat_emb.shape[1]),
                                  0.8, rng, dtype=dtype)
    key_weights = {name: Tensor(np.array(t.values, copy=True), dtype=dtype)
                   for name, t in params.tower_weights().items()}
    e_init = embed_item_features(params, uniq)
    keys_const = tower_mlp(key_weights, Tensor(e_init.values * feat_mask,
                                               dtype=dtype)).values.copy()

    cents = rng.normal(size=(n_clusters, d))
    protos = PrototypeSet(
        centroids=cents.astype(np.float32),
        assignments=rng.integers(0, n_clusters, size=n_items),
        sizes=np.full(n_clusters, n_items // n_clusters, dtype=np.int64),
        taus=rng.uniform(0.5, 1.5, size=n_clusters).astype(np.float32),
        stamp=0)
    neg_clusters = np.empty((len(uniq), r), dtype=np.int64)
    for i, item in enumerate(uniq):
        own = protos.assignments[item]
        draws = rng.choice(n_clusters - 1, size=r, replace=False)
        neg_clusters[i] = draws + (draws >= own)

    def loss_fn(_=None):
        ue = interests_batched(params, seq_idx, lengths)
        sel = aisl_forward(params, f_a, t_aisl=1.0, mode="tail-cumsum")
        e_cand = embed_item_features(params, cand.reshape(-1))
        ie = ad.reshape(item_tower_forward(params, e_cand), (batch, 2, d))
        _, yhat = score_batched(ue, sel.soft, sel.hard, ie, params.gamma)
        l_main = main_loss(yhat, labels)
        e_q = embed_item_features(params, uniq)
        queries = item_tower_forward(params, e_q)
        l_self = info_nce_loss(queries, keys_const, 0.4)
        l_p = prototype_loss(queries, uniq, protos, r, rng=None,
                             neg_clusters=neg_clusters)
        return ad.add(l_main, ad.add(ad.mul(l_self, 0.1), ad.mul(l_p, 0.1)))

    return params, loss_fn


def run_composite_check(seed: int, step: float = 1e-4) -> list[CheckResult]:
    params, loss_fn = build_composite_case(seed)
    results = []
    for name, tensor in params.named().items():
        err = finite_difference_gradcheck(loss_fn, tensor, step=step)
        results.append(CheckResult(f"composite/{name}", err, COMPOSITE_TOL))
    return results


def run_all(seed: int, instances: int = 100) -> list[CheckResult]:
    return (run_primitive_checks(seed, instances=instances)
            + run_contract_checks(seed)
            + run_composite_check(seed))
