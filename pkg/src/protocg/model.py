"""Two-tower model: embeddings, multi-interest attention extractor, the
adaptive interest selection layer (straight-through mask over a prefix of
interest slots), the item tower, masked-max scoring, and the main loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import N_ACTIVITY_BUCKETS
from .errors import ContractError, ParameterError

CAT_EMB_DIM = 8
ACT_EMB_DIM = 16
AISL_HIDDEN = 32
TOWER_HIDDEN = 64
MASK_PENALTY = 1.0e4   # keeps inactive interests out of the max (cosine >= -1)
PAD_SCORE = -1.0e9     # additive attention mask for padded positions


@dataclass
class ModelParams:
    """All learnable tables and weights, plus the static item->category map."""

    item_emb: Tensor          # (n_items, d_e)
    cat_emb: Tensor           # (n_categories, CAT_EMB_DIM)
    pos_emb: Tensor           # (n_max, d_e)
    interest_queries: Tensor  # (K, d_e)
    interest_proj: Tensor     # (d_e, d)
    act_emb: Tensor           # (N_ACTIVITY_BUCKETS, ACT_EMB_DIM)
    aisl_w: list
    aisl_b: list
    tower_w1: Tensor          # (D, TOWER_HIDDEN)
    tower_b1: Tensor
    tower_w2: Tensor          # (TOWER_HIDDEN, d)
    tower_b2: Tensor
    gamma: Tensor             # scalar logit scale
    item_category: np.ndarray
    demo_emb: Tensor | None = None

    @property
    def n_items(self):
        return self.item_emb.shape[0]

    @property
    def d_e(self):
        return self.item_emb.shape[1]

    @property
    def d(self):
        return self.interest_proj.shape[1]

    @property
    def k_interests(self):
        return self.interest_queries.shape[0]

    @property
    def n_max(self):
        return self.pos_emb.shape[0]

    def named(self) -> dict[str, Tensor]:
        out = {
            "item_emb": self.item_emb,
            "cat_emb": self.cat_emb,
            "pos_emb": self.pos_emb,
            "interest_queries": self.interest_queries,
            "interest_proj": self.interest_proj,
            "act_emb": self.act_emb,
        }
        for i, (w, b) in enumerate(zip(self.aisl_w, self.aisl_b), start=1):
            out[f"aisl_w{i}"] = w
            out[f"aisl_b{i}"] = b
        out.update(tower_w1=self.tower_w1, tower_b1=self.tower_b1,
                   tower_w2=self.tower_w2, tower_b2=self.tower_b2,
                   gamma=self.gamma)
        if self.demo_emb is not None:
            out["demo_emb"] = self.demo_emb
        return out

    def tower_weights(self) -> dict[str, Tensor]:
        """The query-encoder parameter group mirrored by the key encoder."""
        return {"tower_w1": self.tower_w1, "tower_b1": self.tower_b1,
                "tower_w2": self.tower_w2, "tower_b2": self.tower_b2}


def init_model_params(n_items: int, n_categories: int, item_category,
                      d: int, d_e: int, k_interests: int, aisl_layers: int,
                      n_max: int, gamma_init: float,
                      rng: np.random.Generator, dtype=np.float32,
                      n_demo: int = 0) -> ModelParams:
    if aisl_layers < 1:
        raise ParameterError(f"AISL needs at least 1 layer, got {aisl_layers}")

    def table(rows, cols, scale=0.1):
        return Tensor(rng.normal(0.0, scale, size=(rows, cols)),
                      requires_grad=True, dtype=dtype)

    def linear(fan_in, fan_out):
        std = np.sqrt(2.0 / (fan_in + fan_out))
        w = Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)),
                   requires_grad=True, dtype=dtype)
        b = Tensor(np.zeros(fan_out), requires_grad=True, dtype=dtype)
        return w, b

    feat_dim = d_e + CAT_EMB_DIM
    aisl_in = ACT_EMB_DIM + (ACT_EMB_DIM if n_demo else 0)
    aisl_w, aisl_b = [], []
    for layer in range(aisl_layers):
        fan_in = aisl_in if layer == 0 else AISL_HIDDEN
        fan_out = k_interests if layer == aisl_layers - 1 else AISL_HIDDEN
        w, b = linear(fan_in, fan_out)
        aisl_w.append(w)
        aisl_b.append(b)
    # keep the final ReLU units alive at init so the selector can learn
    aisl_b[-1].values[:] = np.asarray(0.1, dtype=dtype)

    tower_w1, tower_b1 = linear(feat_dim, TOWER_HIDDEN)
    tower_w2, tower_b2 = linear(TOWER_HIDDEN, d)

    return ModelParams(
        item_emb=table(n_items, d_e),
        cat_emb=table(n_categories, CAT_EMB_DIM),
        pos_emb=table(n_max, d_e),
        interest_queries=Tensor(rng.normal(0.0, 1.0, size=(k_interests, d_e)),
                                requires_grad=True, dtype=dtype),
        interest_proj=linear(d_e, d)[0],
        act_emb=table(N_ACTIVITY_BUCKETS, ACT_EMB_DIM),
        aisl_w=aisl_w, aisl_b=aisl_b,
        tower_w1=tower_w1, tower_b1=tower_b1,
        tower_w2=tower_w2, tower_b2=tower_b2,
        gamma=Tensor(np.asarray(gamma_init), requires_grad=True, dtype=dtype),
        item_category=np.asarray(item_category, dtype=np.int64),
        demo_emb=table(n_demo, ACT_EMB_DIM) if n_demo else None,
    )


# ---------------------------------------------------------------------------
# Item features and towers
# ---------------------------------------------------------------------------

def embed_item_features(params: ModelParams, item_idx) -> Tensor:
    """Concatenated id + category embedding rows, shape (n, D)."""
    idx = np.atleast_1d(np.asarray(item_idx, dtype=np.int64))
    if idx.size and idx.max() >= params.n_items:
        raise ContractError(
            f"item index {int(idx.max())} out of vocab (n_items={params.n_items})")
    id_part = ad.gather(params.item_emb, idx)
    cat_part = ad.gather(params.cat_emb, params.item_category[idx])
    return ad.concat([id_part, cat_part], axis=-1)


def tower_mlp(weights: dict[str, Tensor], x: Tensor) -> Tensor:
    """Two-layer ReLU MLP to d, L2-normalized. Shared by the query encoder
    and the momentum key encoder (same arithmetic path, different weights)."""
    h = ad.relu(ad.add(ad.matmul(x, weights["tower_w1"]), weights["tower_b1"]))
    out = ad.add(ad.matmul(h, weights["tower_w2"]), weights["tower_b2"])
    return ad.l2_normalize(out, axis=-1)


def item_tower_forward(params: ModelParams, e_x: Tensor) -> Tensor:
    return tower_mlp(params.tower_weights(), e_x)


# ---------------------------------------------------------------------------
# Multi-interest extraction
# ---------------------------------------------------------------------------

def interests_batched(params: ModelParams, seq_idx: np.ndarray,
                      lengths: np.ndarray) -> Tensor:
    """K attention heads over right-padded behavior sequences.

    seq_idx: (B, n) item indices, junk beyond each row's length.
    Returns unit-norm interest embeddings of shape (B, K, d).
    """
    bsz, n = seq_idx.shape
    if n == 0 or np.any(lengths < 1):
        raise ContractError("multi-interest extraction requires non-empty sequences")
    if n > params.n_max:
        raise ContractError(f"sequence window {n} exceeds n_max={params.n_max}")
    behav = ad.gather(params.item_emb, seq_idx)                    # (B, n, d_e)
    behav = ad.add(behav, ad.gather(params.pos_emb, np.arange(n)))
    scores = ad.matmul(behav, ad.transpose(params.interest_queries))
    scores = ad.mul(scores, 1.0 / np.sqrt(params.d_e))             # (B, n, K)
    pad = (np.arange(n)[None, :] >= lengths[:, None])
    scores = ad.add(scores, (pad[:, :, None] * PAD_SCORE).astype(
        params.item_emb.values.dtype))
    attn = ad.softmax_with_temperature(scores, 1.0, axis=1)
    attended = ad.matmul(ad.swap_last(attn), behav)                # (B, K, d_e)
    return ad.l2_normalize(ad.matmul(attended, params.interest_proj), axis=-1)


def multi_interest_extract(params: ModelParams, seq_items) -> Tensor:
    """Single-user view: (n,) item indices -> (K, d) interest embeddings."""
    items = np.asarray(seq_items, dtype=np.int64).reshape(1, -1)
    ue = interests_batched(params, items, np.asarray([items.shape[1]]))
    return ad.reshape(ue, (params.k_interests, params.d))


# ---------------------------------------------------------------------------
# Adaptive interest selection
# ---------------------------------------------------------------------------

@dataclass
class AislOut:
    mask: Tensor        # (B, K) straight-through: hard forward, soft backward
    soft: Tensor        # (B, K) relaxation
    hard: np.ndarray    # (B, K) prefix multi-hot
    k_u: np.ndarray     # (B,) selected interest counts, 1-based
    p_u: np.ndarray     # (B, K) selection probabilities softmax(h_L)
    h_l: Tensor         # (B, K) final MLP activations


def _softmax_values(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def aisl_head(h_l: Tensor, t_aisl: float, mode: str = "tail-cumsum") -> AislOut:
    """Selection head on final activations: argmax count, prefix hard mask,
    soft relaxation, and the straight-through combination of the two.

    ``tail-cumsum`` relaxes slot k to P(K_u >= k); ``softmax`` keeps the
    literal temperature-softmax relaxation.
    """
    if t_aisl <= 0:
        raise ParameterError(f"t_aisl must be positive, got {t_aisl}")
    if mode not in ("tail-cumsum", "softmax"):
        raise ParameterError(f"unknown relaxation mode {mode!r}")
    k = h_l.shape[-1]
    p_u = _softmax_values(h_l.values)
    k_u = h_l.values.argmax(axis=-1) + 1                 # ties -> smallest index
    hard = (np.arange(k)[None, :] < k_u[:, None]).astype(h_l.values.dtype)

    soft = ad.softmax_with_temperature(h_l, t_aisl, axis=-1)
    if mode == "tail-cumsum":
        tail = np.tril(np.ones((k, k), dtype=h_l.values.dtype))
        soft = ad.matmul(soft, Tensor(tail, dtype=h_l.values.dtype))
    mask = ad.straight_through(hard, soft)
    return AislOut(mask=mask, soft=soft, hard=hard, k_u=k_u, p_u=p_u, h_l=h_l)


def aisl_forward(params: ModelParams, f_a, f_b=None, t_aisl: float = 1.0,
                 mode: str = "tail-cumsum") -> AislOut:
    """Activity (and optional demographic) features -> selection mask."""
    f_a = np.atleast_1d(np.asarray(f_a, dtype=np.int64))
    h = ad.gather(params.act_emb, f_a)
    if f_b is not None:
        if params.demo_emb is None:
            raise ContractError("demographic features given but no demo table")
        h = ad.concat([ad.gather(params.demo_emb,
                                 np.atleast_1d(np.asarray(f_b, np.int64))), h],
                      axis=-1)
    for w, b in zip(params.aisl_w, params.aisl_b):
        h = ad.relu(ad.add(ad.matmul(h, w), b))
    return aisl_head(h, t_aisl, mode)


# ---------------------------------------------------------------------------
# Scoring and main loss
# ---------------------------------------------------------------------------

@dataclass
class UserEmbeddings:
    ue: Tensor          # (K, d) unit-norm interest rows
    mask: Tensor        # (K,) straight-through mask
    hard: np.ndarray    # (K,)
    soft: Tensor
    k_u: int


@dataclass
class ItemEmbedding:
    vec: Tensor         # (d,) unit-norm
    item: int = -1


def score_batched(ue: Tensor, mask: Tensor, hard: np.ndarray, ie: Tensor,
                  gamma: Tensor) -> tuple[Tensor, Tensor]:
    """Masked-max cosine scoring.

    ue: (B, K, d); mask/hard: (B, K); ie: (B, C, d) candidate embeddings.
    Inactive slots carry a constant -MASK_PENALTY so they can never win the
    max; gradient reaches the soft mask only through the mask*cosine product.
    Returns (logits, sigmoid(logits)), both (B, C).
    """
    sims = ad.matmul(ad.l2_normalize(ue, axis=-1),
                     ad.swap_last(ad.l2_normalize(ie, axis=-1)))  # (B, K, C)
    bsz, k = hard.shape
    masked = ad.mul(ad.reshape(mask, (bsz, k, 1)), sims)
    penalty = (-MASK_PENALTY * (1.0 - hard))[:, :, None].astype(sims.values.dtype)
    logits = ad.mul(ad.tmax(ad.add(masked, penalty), axis=1), gamma)
    return logits, ad.sigmoid(logits)


def score(ue_masked: UserEmbeddings, ie: ItemEmbedding,
          gamma: Tensor) -> tuple[Tensor, Tensor]:
    """Single user/item view of :func:`score_batched`."""
    k, d = ue_masked.ue.shape
    logits, yhat = score_batched(
        ad.reshape(ue_masked.ue, (1, k, d)),
        ad.reshape(ue_masked.mask, (1, k)),
        ue_masked.hard.reshape(1, k),
        ad.reshape(ie.vec, (1, 1, d)),
        gamma)
    return ad.reshape(logits, ()), ad.reshape(yhat, ())


def main_loss(yhat: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross entropy with predictions clamped to
    [1e-7, 1 - 1e-7]."""
    y = np.asarray(labels, dtype=yhat.values.dtype)
    p = ad.clamp(yhat, 1e-7, 1.0 - 1e-7)
    ll = ad.add(ad.mul(ad.log(p), y), ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - y))
    return ad.mul(ad.tmean(ll), -1.0)
