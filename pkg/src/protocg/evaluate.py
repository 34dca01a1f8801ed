"""Exact top-N retrieval with multi-interest fan-out, the metric suite
(HR@N, NDCG@N, AINPU), a MostPopular sanity baseline, and embedding export."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import DatasetSplit, Vocab, sample_eval_candidates
from .errors import ContractError
from .model import ModelParams, aisl_forward, embed_item_features, \
    interests_batched, item_tower_forward
from .training import STREAMS, TrainConfig, config_hash

log = logging.getLogger(__name__)

_EVAL_CHUNK = 1024


@dataclass
class RetrievalIndex:
    """Row i holds the unit-norm item-tower embedding of vocab item i."""

    matrix: np.ndarray  # (n_items, d) float32


@dataclass
class MetricsReport:
    hr: dict
    ndcg: dict
    ainpu: float
    n_test_users: int
    flagged_users: int
    config_hash: str
    seed: int

    def to_dict(self) -> dict:
        out = {f"hr@{n}": self.hr[n] for n in sorted(self.hr)}
        out.update({f"ndcg@{n}": self.ndcg[n] for n in sorted(self.ndcg)})
        out.update(ainpu=self.ainpu, n_test_users=self.n_test_users,
                   flagged_users=self.flagged_users,
                   config_hash=self.config_hash, seed=self.seed)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def build_index(params: ModelParams) -> RetrievalIndex:
    e_x = embed_item_features(params, np.arange(params.n_items))
    return RetrievalIndex(matrix=item_tower_forward(params, e_x).values.copy())


def rank_candidates(interests: np.ndarray, active: np.ndarray,
                    cand_idx: np.ndarray, index: RetrievalIndex) -> np.ndarray:
    """Candidates sorted by masked-max cosine, score ties broken by
    ascending item index."""
    if len(cand_idx) == 0:
        raise ContractError("rank_candidates: empty candidate list")
    rows = index.matrix[cand_idx]
    norms = np.maximum(np.sqrt((rows * rows).sum(axis=1, keepdims=True)), 1e-12)
    scores = kernels.masked_max_scores(
        np.ascontiguousarray(rows / norms), interests, active)
    return cand_idx[np.lexsort((cand_idx, -scores))]


def _rank_of_positive(scores: np.ndarray, cand_idx: np.ndarray,
                      target: int, target_score: float) -> int:
    better = int((scores > target_score).sum())
    tied_before = int(((scores == target_score) & (cand_idx < target)).sum())
    return 1 + better + tied_before


def hit_rate_at_n(ranks, n: int) -> float:
    ranks = np.asarray(ranks)
    return float((ranks <= n).mean()) if ranks.size else 0.0


def ndcg_at_n(ranks, n: int) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    if not ranks.size:
        return 0.0
    gains = np.where(ranks <= n, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(gains.mean())


def ainpu(k_u_values) -> float:
    k_u_values = np.asarray(k_u_values, dtype=np.float64)
    return float(k_u_values.mean()) if k_u_values.size else 0.0


def _user_states(params: ModelParams, cfg: TrainConfig, sequences):
    """Interest matrices, active masks, and K_u for a list of sequences,
    computed off-tape in length-padded chunks."""
    all_ue = np.empty((len(sequences), cfg.K, cfg.d), dtype=np.float32)
    all_ku = np.empty(len(sequences), dtype=np.int64)
    for lo in range(0, len(sequences), _EVAL_CHUNK):
        chunk = sequences[lo:lo + _EVAL_CHUNK]
        lengths = np.asarray([len(s.items) for s in chunk], dtype=np.int64)
        window = int(lengths.max())
        seq_idx = np.zeros((len(chunk), window), dtype=np.int64)
        for i, s in enumerate(chunk):
            seq_idx[i, :len(s.items)] = s.items
        f_a = np.asarray([s.f_a for s in chunk], dtype=np.int64)
        all_ue[lo:lo + len(chunk)] = interests_batched(
            params, seq_idx, lengths).values
        all_ku[lo:lo + len(chunk)] = aisl_forward(
            params, f_a, t_aisl=cfg.T_aisl, mode=cfg.relaxation_mode).k_u
    return all_ue, all_ku


def evaluate_model(params: ModelParams, cfg: TrainConfig, split: DatasetSplit,
                   seed: int, ns=(10, 20),
                   ainpu_all_users: bool = False) -> MetricsReport:
    """Leave-last-out protocol: each test user's held-out item is ranked
    against 100 sampled unseen negatives by masked-max cosine."""
    if not split.test:
        raise ContractError("evaluate_model: split has no test users")
    index = build_index(params)
    test_seqs = [split.sequences[pos] for pos, _ in split.test]
    ue, k_u = _user_states(params, cfg, test_seqs)
    active = np.arange(cfg.K)[None, :] < k_u[:, None]

    ranks = np.empty(len(split.test), dtype=np.int64)
    flagged = 0
    for i, (pos, target) in enumerate(split.test):
        seq = split.sequences[pos]
        rng = np.random.default_rng([seed, STREAMS["eval"], seq.user])
        negs, flag = sample_eval_candidates(seq, target, split.n_items, rng)
        flagged += int(flag)
        cand_idx = np.concatenate([[target], negs])
        scores = kernels.masked_max_scores(
            np.ascontiguousarray(index.matrix[cand_idx]), ue[i], active[i])
        ranks[i] = _rank_of_positive(scores, cand_idx, target, scores[0])

    if ainpu_all_users:
        _, k_u = _user_states(params, cfg, split.sequences)
    return MetricsReport(
        hr={n: hit_rate_at_n(ranks, n) for n in ns},
        ndcg={n: ndcg_at_n(ranks, n) for n in ns},
        ainpu=ainpu(k_u),
        n_test_users=len(split.test),
        flagged_users=flagged,
        config_hash=config_hash(cfg).hex(),
        seed=seed)


# ---------------------------------------------------------------------------
# MostPopular baseline
# ---------------------------------------------------------------------------

def most_popular_baseline(split: DatasetSplit, n: int | None = None):
    """Items ordered by training interaction count (ties by ascending
    index); optionally truncated to the top n."""
    counts = np.zeros(split.n_items, dtype=np.int64)
    for seq in split.sequences:
        np.add.at(counts, seq.items, 1)
    order = np.lexsort((np.arange(split.n_items), -counts))
    return (order[:n] if n is not None else order), counts


def evaluate_popularity(split: DatasetSplit, seed: int, ns=(10, 20)) -> dict:
    """The model evaluation protocol with popularity counts as scores."""
    _, counts = most_popular_baseline(split)
    ranks = np.empty(len(split.test), dtype=np.int64)
    for i, (pos, target) in enumerate(split.test):
        seq = split.sequences[pos]
        rng = np.random.default_rng([seed, STREAMS["eval"], seq.user])
        negs, _ = sample_eval_candidates(seq, target, split.n_items, rng)
        cand_idx = np.concatenate([[target], negs])
        scores = counts[cand_idx].astype(np.float32)
        ranks[i] = _rank_of_positive(scores, cand_idx, target, scores[0])
    out = {f"hr@{n}": hit_rate_at_n(ranks, n) for n in ns}
    out.update({f"ndcg@{n}": ndcg_at_n(ranks, n) for n in ns})
    out["n_test_users"] = len(split.test)
    return out


# ---------------------------------------------------------------------------
# Embedding export and structure probes
# ---------------------------------------------------------------------------

def export_embeddings(index: RetrievalIndex, vocab: Vocab, path) -> None:
    """CSV ``item_id,category,e_1..e_d`` at float32 round-trip precision."""
    d = index.matrix.shape[1]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("item_id,category," +
                 ",".join(f"e_{j + 1}" for j in range(d)) + "\n")
        for i in range(vocab.n_items):
            cat = vocab.categories[vocab.item_category[i]]
            row = ",".join(f"{v:.9g}" for v in index.matrix[i])
            fh.write(f"{vocab.items[i]},{cat},{row}\n")


def category_cosine_gap(matrix: np.ndarray, item_category: np.ndarray) -> float:
    """Mean intra-category cosine minus mean inter-category cosine over all
    item pairs; positive values mean categories are geometrically separated."""
    m = np.asarray(matrix, dtype=np.float64)
    m = m / np.maximum(np.sqrt((m * m).sum(axis=1, keepdims=True)), 1e-12)
    sims = m @ m.T
    cats = np.asarray(item_category)
    same = cats[:, None] == cats[None, :]
    np.fill_diagonal(same, False)
    off_diag = ~np.eye(len(cats), dtype=bool)
    intra = sims[same].mean() if same.any() else 0.0
    inter_mask = off_diag & ~same
    inter = sims[inter_mask].mean() if inter_mask.any() else 0.0
    return float(intra - inter)
