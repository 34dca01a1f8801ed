"""Interaction ingestion, vocabularies, behavior sequences, splits, sampling,
and structured synthetic data generation."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, DataFormatError, ParameterError

log = logging.getLogger(__name__)

N_ACTIVITY_BUCKETS = 8  # log2-spaced; covers 1 to >128 interactions
EVAL_NEGATIVES = 100


@dataclass
class InteractionRecord:
    user_id: str
    item_id: str
    timestamp: int
    category: str = ""  # empty string means uncategorized


@dataclass
class InteractionLog:
    records: list[InteractionRecord]
    malformed: int = 0
    duplicates: int = 0

    def __len__(self):
        return len(self.records)


@dataclass
class Vocab:
    """Dense bidirectional id maps. Category index 0 is reserved for
    uncategorized items."""

    users: list[str]
    items: list[str]
    categories: list[str]
    user_index: dict[str, int]
    item_index: dict[str, int]
    category_index: dict[str, int]
    item_category: np.ndarray
    user_counts: np.ndarray
    item_counts: np.ndarray

    @property
    def n_users(self):
        return len(self.users)

    @property
    def n_items(self):
        return len(self.items)

    @property
    def n_categories(self):
        return len(self.categories)


@dataclass
class UserSequence:
    user: int
    items: np.ndarray        # time-ascending item indices, most recent n_max
    n_interactions: int      # full count before truncation
    f_a: int                 # activity bucket of n_interactions
    seen: np.ndarray         # every distinct item the user ever touched
    f_b: tuple = ()          # demographic feature indices; absent by default


@dataclass
class DatasetSplit:
    sequences: list[UserSequence]      # training view (held-out item removed)
    test: list[tuple[int, int]]        # (sequence position, held-out item)
    trainable: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    n_items: int = 0


@dataclass
class BatchSample:
    user: int       # index into split.sequences
    position: int   # target position in the training sequence (input is the prefix)
    item: int
    label: int


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

_FIELDS = ("user_id", "item_id", "timestamp", "category")


def _parse_row(row: dict, lineno: int):
    user = (row.get("user_id") or "").strip()
    item = (row.get("item_id") or "").strip()
    if not user or not item:
        return None, f"line {lineno}: missing user_id or item_id"
    raw_ts = row.get("timestamp")
    try:
        ts = int(raw_ts)
    except (TypeError, ValueError):
        return None, f"line {lineno}: timestamp {raw_ts!r} is not an integer"
    if ts < 0:
        return None, f"line {lineno}: negative timestamp {ts}"
    category = (row.get("category") or "").strip()
    return InteractionRecord(user, item, ts, category), None


def ingest_interactions(path, fmt: str | None = None) -> InteractionLog:
    """Load an interactions file (CSV or JSONL with the same field names).

    Malformed rows are counted and skipped; more than 10% malformed is a
    hard failure naming the first offenders. Duplicate
    (user, item, timestamp) triples collapse to the first occurrence.
    """
    if fmt is None:
        fmt = "jsonl" if str(path).endswith((".jsonl", ".json")) else "csv"
    if fmt not in ("csv", "jsonl"):
        raise ParameterError(f"unknown interactions format {fmt!r}")

    records, offenders = [], []
    malformed = total = 0
    with open(path, "r", encoding="utf-8", newline="") as fh:
        if fmt == "csv":
            reader = csv.DictReader(fh)
            missing = [c for c in ("user_id", "item_id", "timestamp")
                       if reader.fieldnames is None or c not in reader.fieldnames]
            if missing:
                raise DataFormatError(f"{path}: header lacks columns {missing}")
            for lineno, row in enumerate(reader, start=2):
                total += 1
                rec, err = _parse_row(row, lineno)
                if err:
                    malformed += 1
                    if len(offenders) < 5:
                        offenders.append(err)
                else:
                    records.append(rec)
        else:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                total += 1
                try:
                    row = json.loads(line)
                except json.JSONDecodeError:
                    malformed += 1
                    if len(offenders) < 5:
                        offenders.append(f"line {lineno}: invalid JSON")
                    continue
                rec, err = _parse_row(row, lineno)
                if err:
                    malformed += 1
                    if len(offenders) < 5:
                        offenders.append(err)
                else:
                    records.append(rec)

    if total and malformed > 0.1 * total:
        raise DataFormatError(
            f"{path}: {malformed}/{total} malformed rows; first offenders: "
            + "; ".join(offenders))

    seen_triples = set()
    deduped = []
    for rec in records:
        key = (rec.user_id, rec.item_id, rec.timestamp)
        if key in seen_triples:
            continue
        seen_triples.add(key)
        deduped.append(rec)
    duplicates = len(records) - len(deduped)
    if duplicates:
        log.warning("%s: dropped %d duplicate (user,item,timestamp) rows",
                    path, duplicates)
    if malformed:
        log.warning("%s: skipped %d malformed rows", path, malformed)
    return InteractionLog(deduped, malformed=malformed, duplicates=duplicates)


def write_interactions(interactions: InteractionLog, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_FIELDS)
        for rec in interactions.records:
            writer.writerow([rec.user_id, rec.item_id, rec.timestamp, rec.category])


# ---------------------------------------------------------------------------
# Vocabulary and sequences
# ---------------------------------------------------------------------------

def build_vocab(interactions: InteractionLog) -> Vocab:
    """Dense indices in first-appearance order; category 0 is uncategorized."""
    users, items, categories = [], [], [""]
    user_index, item_index = {}, {}
    category_index = {"": 0}
    item_cat, user_counts, item_counts = [], [], []

    for rec in interactions.records:
        u = user_index.get(rec.user_id)
        if u is None:
            u = user_index[rec.user_id] = len(users)
            users.append(rec.user_id)
            user_counts.append(0)
        user_counts[u] += 1

        i = item_index.get(rec.item_id)
        if i is None:
            i = item_index[rec.item_id] = len(items)
            items.append(rec.item_id)
            item_counts.append(0)
            item_cat.append(0)
        item_counts[i] += 1

        if rec.category:
            c = category_index.get(rec.category)
            if c is None:
                c = category_index[rec.category] = len(categories)
                categories.append(rec.category)
            if item_cat[i] == 0:
                item_cat[i] = c

    return Vocab(users=users, items=items, categories=categories,
                 user_index=user_index, item_index=item_index,
                 category_index=category_index,
                 item_category=np.asarray(item_cat, dtype=np.int64),
                 user_counts=np.asarray(user_counts, dtype=np.int64),
                 item_counts=np.asarray(item_counts, dtype=np.int64))


def activity_bucket(count: int, n_buckets: int = N_ACTIVITY_BUCKETS) -> int:
    """Log2 bucket of an interaction count, clamped to the last bucket."""
    return min(int(math.floor(math.log2(1 + count))), n_buckets - 1)


def build_sequences(interactions: InteractionLog, vocab: Vocab,
                    n_max: int) -> list[UserSequence]:
    """Per-user ascending-time sequences keeping the most recent ``n_max``
    items; timestamp ties keep input order."""
    if not interactions.records:
        raise ContractError("build_sequences: empty interaction log")
    per_user: dict[int, list[tuple[int, int, int]]] = {}
    for order, rec in enumerate(interactions.records):
        u = vocab.user_index[rec.user_id]
        i = vocab.item_index[rec.item_id]
        per_user.setdefault(u, []).append((rec.timestamp, order, i))

    out = []
    for u in sorted(per_user):
        rows = sorted(per_user[u])
        items = np.asarray([i for _, _, i in rows], dtype=np.int64)
        count = len(items)
        out.append(UserSequence(
            user=u,
            items=items[-n_max:],
            n_interactions=count,
            f_a=activity_bucket(count),
            seen=np.unique(items),
        ))
    return out


def split_leave_last_out(sequences: list[UserSequence]) -> DatasetSplit:
    """Hold out each eligible user's chronologically last item as the test
    target. Users with fewer than 3 interactions stay train-only."""
    if not sequences:
        log.warning("split_leave_last_out: empty corpus")
        return DatasetSplit(sequences=[], test=[])
    train, test = [], []
    for pos, seq in enumerate(sequences):
        if seq.n_interactions >= 3 and len(seq.items) >= 2:
            train.append(replace(seq, items=seq.items[:-1]))
            test.append((pos, int(seq.items[-1])))
        else:
            train.append(seq)
    trainable = np.asarray([i for i, s in enumerate(train) if len(s.items) >= 2],
                           dtype=np.int64)
    n_items = 1 + max(int(s.seen.max()) for s in sequences)
    return DatasetSplit(sequences=train, test=test, trainable=trainable,
                        n_items=n_items)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_training_batch(split: DatasetSplit, batch_size: int, j_neg: int,
                          rng: np.random.Generator,
                          item_weights: np.ndarray | None = None
                          ) -> list[BatchSample]:
    """``batch_size`` positives, each followed by ``j_neg`` negatives that
    never equal their positive. Negatives are uniform unless popularity
    weights are given."""
    if len(split.trainable) == 0:
        raise ContractError("sample_training_batch: no trainable sequences")
    samples = []
    users = split.trainable[rng.integers(0, len(split.trainable), size=batch_size)]
    for u in users:
        seq = split.sequences[int(u)]
        position = int(rng.integers(1, len(seq.items)))
        positive = int(seq.items[position])
        samples.append(BatchSample(int(u), position, positive, 1))
        for _ in range(j_neg):
            while True:
                if item_weights is None:
                    neg = int(rng.integers(0, split.n_items))
                else:
                    neg = int(rng.choice(split.n_items, p=item_weights))
                if neg != positive:
                    break
            samples.append(BatchSample(int(u), position, neg, 0))
    return samples


def sample_eval_candidates(seq: UserSequence, target: int, n_items: int,
                           rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """100 distinct negatives outside the user's interaction set. When fewer
    exist, all eligible items are returned and the user is flagged."""
    blocked = np.union1d(seq.seen, [target])
    eligible = np.setdiff1d(np.arange(n_items, dtype=np.int64), blocked,
                            assume_unique=True)
    if len(eligible) >= EVAL_NEGATIVES:
        picks = rng.choice(len(eligible), size=EVAL_NEGATIVES, replace=False)
        return eligible[picks], False
    log.debug("user %d has only %d eligible eval negatives", seq.user,
              len(eligible))
    return eligible, True


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def _tier_list(tiers) -> list[tuple[str, int]]:
    pairs = list(tiers.items()) if isinstance(tiers, dict) else list(tiers)
    if not pairs:
        raise ParameterError("at least one activeness tier is required")
    for name, count in pairs:
        if count < 1:
            raise ParameterError(f"tier {name!r} must have >= 1 interactions")
    return pairs


def generate_synthetic(n_users: int, n_items: int, n_categories: int,
                       activeness_tiers, rng: np.random.Generator):
    """Planted-structure interaction log.

    Items are block-partitioned into categories. Each user gets an
    activeness tier (uniform) and a number of preferred categories that
    grows with the tier's count rank (1 up to 3); interactions are drawn
    90% from preferred categories and 10% uniformly.

    Returns ``(log, item_categories, user_truth)`` where the ground-truth
    maps are ``item_id -> category`` and ``user_id -> (tier, preferred)``.
    """
    if n_categories > n_items:
        raise ParameterError(
            f"n_categories ({n_categories}) cannot exceed n_items ({n_items})")
    if n_users < 1 or n_items < 1 or n_categories < 1:
        raise ParameterError("n_users, n_items, n_categories must be positive")
    tiers = _tier_list(activeness_tiers)
    rank = {name: r for r, (name, _) in
            enumerate(sorted(tiers, key=lambda p: p[1]))}

    base, extra = divmod(n_items, n_categories)
    bounds = np.zeros(n_categories + 1, dtype=np.int64)
    for c in range(n_categories):
        bounds[c + 1] = bounds[c] + base + (1 if c < extra else 0)

    item_ids = [f"i{i:05d}" for i in range(n_items)]
    cat_names = [f"c{c:02d}" for c in range(n_categories)]
    item_cat_idx = np.searchsorted(bounds, np.arange(n_items), side="right") - 1
    item_categories = {item_ids[i]: cat_names[item_cat_idx[i]]
                       for i in range(n_items)}

    records, user_truth = [], {}
    for u in range(n_users):
        uid = f"u{u:05d}"
        tier_name, count = tiers[int(rng.integers(0, len(tiers)))]
        breadth = min(rank[tier_name] + 1, 3, n_categories)
        prefs = rng.choice(n_categories, size=breadth, replace=False)
        user_truth[uid] = (tier_name,
                           tuple(sorted(cat_names[c] for c in prefs)))
        for t in range(count):
            if rng.random() < 0.9:
                c = int(prefs[rng.integers(0, breadth)])
                item = int(rng.integers(bounds[c], bounds[c + 1]))
            else:
                item = int(rng.integers(0, n_items))
            records.append(InteractionRecord(
                uid, item_ids[item], t, item_categories[item_ids[item]]))
    return InteractionLog(records), item_categories, user_truth


def write_synthetic(out_dir, interactions: InteractionLog, item_categories,
                    user_truth, overwrite: bool = False) -> dict:
    """Write interactions + ground truth CSVs; refuses to clobber unless asked."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "interactions": os.path.join(out_dir, "interactions.csv"),
        "item_categories": os.path.join(out_dir, "item_categories.csv"),
        "user_tiers": os.path.join(out_dir, "user_tiers.csv"),
    }
    if not overwrite:
        for p in paths.values():
            if os.path.exists(p):
                raise FileExistsError(f"{p} exists; pass overwrite to replace")
    write_interactions(interactions, paths["interactions"])
    with open(paths["item_categories"], "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item_id", "category"])
        for item_id in sorted(item_categories):
            writer.writerow([item_id, item_categories[item_id]])
    with open(paths["user_tiers"], "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "tier", "preferred_categories"])
        for user_id in sorted(user_truth):
            tier, prefs = user_truth[user_id]
            writer.writerow([user_id, tier, ";".join(prefs)])
    return paths


def load_dataset(path, n_max: int, fmt: str | None = None):
    """ingest -> vocab -> sequences -> leave-last-out split."""
    interactions = ingest_interactions(path, fmt=fmt)
    vocab = build_vocab(interactions)
    sequences = build_sequences(interactions, vocab, n_max)
    split = split_leave_last_out(sequences)
    split.n_items = vocab.n_items
    return interactions, vocab, split
