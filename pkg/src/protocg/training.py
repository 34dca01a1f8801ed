"""Training: the flat key-value config, the total objective, the seeded
training loop with momentum updates and prototype refreshes, and binary
checkpoints with CRC integrity."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import time
import zlib
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward, zero_grads
from .contrastive import (KeyEncoderState, PrototypeSet, augment,
                          build_prototypes, info_nce_loss, init_key_encoder,
                          key_encoder_forward, momentum_update, prototype_loss)
from .data import DatasetSplit, Vocab, sample_training_batch
from .errors import CheckpointError, ConfigError, ContractError, TrainingDiverged
from .model import (ModelParams, aisl_forward, embed_item_features,
                    init_model_params, interests_batched, item_tower_forward,
                    main_loss, score_batched, tower_mlp)
from .optim import AdamState, adam_step, init_adam

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PCLDCG1"
CHECKPOINT_VERSION = 1

STREAMS = {"data": 0, "init": 1, "augment": 2, "kmeans": 3, "eval": 4}


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """One independently seeded generator per named randomness stream."""
    return np.random.default_rng([seed, STREAMS[name]])


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    d: int = 32
    d_e: int = 32
    K: int = 5
    L: int = 2
    n_max: int = 20
    B: int = 256
    epochs: int = 30
    lr: float = 0.001
    T_aisl: float = 1.0
    T_ssl: float = 0.1
    alpha_m: float = 0.999
    alpha_self: float = 0.1
    beta_p: float = 0.1
    n_clusters: int = 50
    r: int = 10
    keep_ratio: float = 0.8
    J_neg: int = 4
    relaxation_mode: str = "tail-cumsum"
    gamma_init: float = 5.0
    tau_min: float = 0.05
    refresh_every: int = 1
    seed: int = 0


_CONFIG_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


def validate_config(cfg: TrainConfig) -> TrainConfig:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    for key in ("d", "d_e", "K", "L", "n_max", "B", "n_clusters", "r",
                "J_neg", "refresh_every"):
        need(getattr(cfg, key) >= 1, f"config key {key} must be >= 1")
    need(cfg.epochs >= 0, "config key epochs must be >= 0")
    need(cfg.seed >= 0, "config key seed must be >= 0")
    for key in ("lr", "T_aisl", "T_ssl", "gamma_init", "tau_min"):
        need(getattr(cfg, key) > 0, f"config key {key} must be positive")
    need(cfg.alpha_self >= 0 and cfg.beta_p >= 0,
         "loss weights alpha_self and beta_p must be non-negative")
    need(0.0 < cfg.alpha_m < 1.0,
         f"alpha_m must lie strictly inside (0, 1), got {cfg.alpha_m}")
    need(0.0 < cfg.keep_ratio <= 1.0,
         f"keep_ratio must lie in (0, 1], got {cfg.keep_ratio}")
    need(cfg.relaxation_mode in ("tail-cumsum", "softmax"),
         f"relaxation_mode must be tail-cumsum or softmax, "
         f"got {cfg.relaxation_mode!r}")
    need(cfg.B >= 2 or cfg.alpha_self == 0,
         "B must be >= 2 when alpha_self > 0 (in-batch negatives)")
    need(cfg.r <= cfg.n_clusters - 1 or cfg.beta_p == 0,
         f"r ({cfg.r}) must be <= n_clusters - 1 ({cfg.n_clusters - 1})")
    need(cfg.n_max >= 2, "n_max must be >= 2")
    return cfg


def parse_config(text: str) -> TrainConfig:
    """Flat ``key = value`` document; every key required, unknown keys fatal."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value, "
                              f"got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        kind = _CONFIG_FIELDS[key]
        try:
            if kind in (int, "int"):
                values[key] = int(val)
            elif kind in (float, "float"):
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError:
            raise ConfigError(f"config line {lineno}: cannot parse "
                              f"{val!r} for key {key}") from None
    missing = sorted(set(_CONFIG_FIELDS) - set(values))
    if missing:
        raise ConfigError(f"missing config key(s): {', '.join(missing)}")
    return validate_config(TrainConfig(**values))


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {v!r}" if isinstance(v, str)
                     else f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: TrainConfig) -> bytes:
    return hashlib.sha256(config_to_text(cfg).encode("utf-8")).digest()


# ---------------------------------------------------------------------------
# Total objective
# ---------------------------------------------------------------------------

def total_loss(l_main: Tensor, l_self, l_p, alpha_self: float,
               beta_p: float) -> Tensor:
    """l_main + alpha_self * l_self + beta_p * l_p. Absent components count
    as zero; a non-finite component aborts, naming itself."""
    for name, t in (("l_main", l_main), ("l_self", l_self), ("l_p", l_p)):
        if t is not None and not math.isfinite(t.item()):
            raise TrainingDiverged(f"loss component {name} is non-finite "
                                   f"({t.item()})")
    total = l_main
    if l_self is not None and alpha_self != 0.0:
        total = ad.add(total, ad.mul(l_self, alpha_self))
    if l_p is not None and beta_p != 0.0:
        total = ad.add(total, ad.mul(l_p, beta_p))
    return total


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

@dataclass
class CheckpointState:
    params: ModelParams
    key_state: KeyEncoderState
    adam: AdamState
    protos: PrototypeSet | None
    epoch: int               # completed epochs
    config: TrainConfig
    rng: dict[str, np.random.Generator]


def _ints_to_f32(arr) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(arr).reshape(-1), dtype="<i8")
    return a.view("<f4").reshape(-1, 2)


def _f32_to_ints(arr) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype="<f4").reshape(-1).view("<i8")


def _encode_rng(gen: np.random.Generator) -> np.ndarray:
    st = gen.bit_generator.state
    mask = (1 << 64) - 1
    s, inc = st["state"]["state"], st["state"]["inc"]
    words = np.array([s & mask, (s >> 64) & mask, inc & mask,
                      (inc >> 64) & mask, st["has_uint32"], st["uinteger"]],
                     dtype="<u8")
    return words.view("<f4").reshape(-1, 2)


def _decode_rng(arr) -> np.random.Generator:
    words = np.ascontiguousarray(arr, dtype="<f4").reshape(-1).view("<u8")
    gen = np.random.default_rng(0)
    gen.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(words[0]) | (int(words[1]) << 64),
                  "inc": int(words[2]) | (int(words[3]) << 64)},
        "has_uint32": int(words[4]),
        "uinteger": int(words[5]),
    }
    return gen


def _checkpoint_tensors(state: CheckpointState) -> dict[str, np.ndarray]:
    cfg_bytes = config_to_text(state.config).encode("utf-8")
    padded = cfg_bytes + b"\x00" * (-len(cfg_bytes) % 4)
    out = {"meta/config": np.frombuffer(padded, dtype="<f4").copy(),
           "meta/ints": _ints_to_f32([state.epoch, state.adam.t,
                                      int(state.protos is not None),
                                      len(cfg_bytes)])}
    for name, t in state.params.named().items():
        out[f"param/{name}"] = t.values
    out["meta/item_category"] = _ints_to_f32(state.params.item_category)
    for name, t in state.key_state.weights.items():
        out[f"key/{name}"] = t.values
    for name in state.params.named():
        out[f"adam/m/{name}"] = state.adam.m[name]
        out[f"adam/v/{name}"] = state.adam.v[name]
    if state.protos is not None:
        out["proto/centroids"] = state.protos.centroids
        out["proto/assignments"] = _ints_to_f32(state.protos.assignments)
        out["proto/sizes"] = _ints_to_f32(state.protos.sizes)
        out["proto/taus"] = state.protos.taus
        out["proto/stamp"] = _ints_to_f32([state.protos.stamp])
    for name in ("data", "augment", "kmeans"):
        out[f"rng/{name}"] = _encode_rng(state.rng[name])
    return out


def save_checkpoint(state: CheckpointState, path) -> None:
    """Binary container: magic, version u16, config sha256, named float32
    tensors, trailing CRC32. Writes atomically."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<H", CHECKPOINT_VERSION)
    blob += config_hash(state.config)
    for name, arr in _checkpoint_tensors(state).items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += arr.tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def _read_tensors(blob: bytes) -> dict[str, np.ndarray]:
    head = len(CHECKPOINT_MAGIC) + 2 + 32
    if len(blob) < head + 4:
        raise CheckpointError("checkpoint truncated before header completes")
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(
            f"bad magic: expected {CHECKPOINT_MAGIC!r}, "
            f"found {bytes(blob[:len(CHECKPOINT_MAGIC)])!r}")
    (version,) = struct.unpack_from("<H", blob, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"version mismatch: file has {version}, "
                              f"this build reads {CHECKPOINT_VERSION}")
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc_stored:
        raise CheckpointError("checkpoint integrity failure: CRC32 mismatch")
    tensors = {}
    off, end = head, len(blob) - 4
    while off < end:
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        tensors[name] = np.frombuffer(
            blob, dtype="<f4", count=count, offset=off).reshape(dims).copy()
        off += 4 * count
    if off != end:
        raise CheckpointError("checkpoint payload length inconsistent")
    return tensors


def load_checkpoint(path) -> CheckpointState:
    with open(path, "rb") as fh:
        blob = fh.read()
    tensors = _read_tensors(blob)
    meta = _f32_to_ints(tensors["meta/ints"])
    epoch, adam_t, has_protos, cfg_len = (int(x) for x in meta[:4])
    cfg_text = tensors["meta/config"].tobytes()[:cfg_len].decode("utf-8")
    cfg = parse_config(cfg_text)
    stored_hash = blob[len(CHECKPOINT_MAGIC) + 2:len(CHECKPOINT_MAGIC) + 34]
    if stored_hash != config_hash(cfg):
        raise CheckpointError("embedded config does not match header hash")

    def tensor(name, grad=True):
        return Tensor(tensors[name], requires_grad=grad, dtype=np.float32)

    aisl_w = [tensor(f"param/aisl_w{i + 1}") for i in range(cfg.L)]
    aisl_b = [tensor(f"param/aisl_b{i + 1}") for i in range(cfg.L)]
    params = ModelParams(
        item_emb=tensor("param/item_emb"),
        cat_emb=tensor("param/cat_emb"),
        pos_emb=tensor("param/pos_emb"),
        interest_queries=tensor("param/interest_queries"),
        interest_proj=tensor("param/interest_proj"),
        act_emb=tensor("param/act_emb"),
        aisl_w=aisl_w, aisl_b=aisl_b,
        tower_w1=tensor("param/tower_w1"), tower_b1=tensor("param/tower_b1"),
        tower_w2=tensor("param/tower_w2"), tower_b2=tensor("param/tower_b2"),
        gamma=tensor("param/gamma"),
        item_category=_f32_to_ints(tensors["meta/item_category"]),
        demo_emb=tensor("param/demo_emb") if "param/demo_emb" in tensors else None,
    )
    key_state = KeyEncoderState(
        weights={n: tensor(f"key/{n}", grad=False)
                 for n in params.tower_weights()},
        alpha_m=cfg.alpha_m)
    adam = AdamState(lr=cfg.lr, t=adam_t,
                     m={n: tensors[f"adam/m/{n}"] for n in params.named()},
                     v={n: tensors[f"adam/v/{n}"] for n in params.named()})
    protos = None
    if has_protos:
        protos = PrototypeSet(
            centroids=tensors["proto/centroids"],
            assignments=_f32_to_ints(tensors["proto/assignments"]),
            sizes=_f32_to_ints(tensors["proto/sizes"]),
            taus=tensors["proto/taus"],
            stamp=int(_f32_to_ints(tensors["proto/stamp"])[0]))
    rng = {name: _decode_rng(tensors[f"rng/{name}"])
           for name in ("data", "augment", "kmeans")}
    return CheckpointState(params=params, key_state=key_state, adam=adam,
                           protos=protos, epoch=epoch, config=cfg, rng=rng)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _batch_arrays(split: DatasetSplit, samples, n_candidates: int):
    bsz = len(samples) // n_candidates
    cand = np.empty((bsz, n_candidates), dtype=np.int64)
    labels = np.empty((bsz, n_candidates), dtype=np.float32)
    lengths = np.empty(bsz, dtype=np.int64)
    f_a = np.empty(bsz, dtype=np.int64)
    prefixes = []
    for b in range(bsz):
        row = samples[b * n_candidates:(b + 1) * n_candidates]
        seq = split.sequences[row[0].user]
        prefixes.append(seq.items[:row[0].position])
        lengths[b] = row[0].position
        f_a[b] = seq.f_a
        for j, s in enumerate(row):
            cand[b, j] = s.item
            labels[b, j] = s.label
    window = int(lengths.max())
    seq_idx = np.zeros((bsz, window), dtype=np.int64)
    for b, prefix in enumerate(prefixes):
        seq_idx[b, :len(prefix)] = prefix
    return seq_idx, lengths, f_a, cand, labels


def _refresh_prototypes(cfg: TrainConfig, params: ModelParams,
                        key_state: KeyEncoderState,
                        rng: np.random.Generator, epoch: int,
                        cluster_cap: int | None) -> PrototypeSet:
    e_x = embed_item_features(params, np.arange(params.n_items))
    e_aug = augment(e_x.values, cfg.keep_ratio, rng)
    keys = tower_mlp(key_state.weights, Tensor(e_aug, dtype=np.float32)).values
    return build_prototypes(keys, params.n_items, cfg.n_clusters, cfg.tau_min,
                            rng, stamp=epoch, subsample_cap=cluster_cap)


def train(cfg: TrainConfig, split: DatasetSplit, vocab: Vocab,
          out_dir=None, resume: CheckpointState | None = None,
          neg_weights=None, cluster_cap: int | None = None):
    """Run the full loop; returns (CheckpointState, epoch log entries).

    Per step: sample a batch, forward both towers, augment + key-encode,
    combine the three losses, backprop, Adam on the query-side parameters,
    momentum-blend the key encoder. Prototypes are rebuilt from key-encoder
    outputs at the end of every ``refresh_every``-th epoch, and the
    prototype loss stays off until the first refresh lands.
    """
    validate_config(cfg)
    if len(split.trainable) == 0:
        raise ContractError("train: split has no trainable sequences")
    if cfg.n_clusters > split.n_items and cfg.beta_p > 0:
        raise ConfigError(f"n_clusters ({cfg.n_clusters}) exceeds the item "
                          f"corpus ({split.n_items})")

    if resume is not None:
        if config_hash(resume.config) != config_hash(cfg):
            raise ConfigError("resume checkpoint was produced by a different "
                              "config (hash mismatch); pass force to override")
        params, key_state, adam = resume.params, resume.key_state, resume.adam
        protos, rngs, completed = resume.protos, resume.rng, resume.epoch
    else:
        init_rng = stream_rng(cfg.seed, "init")
        params = init_model_params(
            n_items=vocab.n_items, n_categories=vocab.n_categories,
            item_category=vocab.item_category, d=cfg.d, d_e=cfg.d_e,
            k_interests=cfg.K, aisl_layers=cfg.L, n_max=cfg.n_max,
            gamma_init=cfg.gamma_init, rng=init_rng)
        key_state = init_key_encoder(params, cfg.alpha_m)
        adam = init_adam(params.named(), lr=cfg.lr)
        protos = None
        rngs = {name: stream_rng(cfg.seed, name)
                for name in ("data", "augment", "kmeans")}
        completed = 0

    trainable = params.named()
    tower = params.tower_weights()
    steps_per_epoch = max(1, math.ceil(len(split.trainable) / cfg.B))
    n_cand = 1 + cfg.J_neg
    lp_notice_pending = cfg.beta_p > 0
    state = CheckpointState(params=params, key_state=key_state, adam=adam,
                            protos=protos, epoch=completed, config=cfg,
                            rng=rngs)
    epoch_log = []
    log_path = os.path.join(out_dir, "epochs.jsonl") if out_dir else None
    if log_path and resume is None and os.path.exists(log_path):
        os.remove(log_path)

    for epoch in range(completed, cfg.epochs):
        t0 = time.perf_counter()
        acc = np.zeros(4, dtype=np.float64)
        for step in range(steps_per_epoch):
            samples = sample_training_batch(split, cfg.B, cfg.J_neg,
                                            rngs["data"],
                                            item_weights=neg_weights)
            seq_idx, lengths, f_a, cand, labels = _batch_arrays(
                split, samples, n_cand)
            zero_grads(trainable.values())
            tape = Tape()
            with tape:
                ue = interests_batched(params, seq_idx, lengths)
                sel = aisl_forward(params, f_a, t_aisl=cfg.T_aisl,
                                   mode=cfg.relaxation_mode)
                e_cand = embed_item_features(params, cand.reshape(-1))
                ie = ad.reshape(item_tower_forward(params, e_cand),
                                (cfg.B, n_cand, cfg.d))
                _, yhat = score_batched(ue, sel.mask, sel.hard, ie,
                                        params.gamma)
                l_main = main_loss(yhat, labels)

                l_self = l_p = None
                uniq = np.unique(cand[:, 0])
                want_self = cfg.alpha_self > 0 and len(uniq) >= 2
                want_proto = cfg.beta_p > 0 and state.protos is not None
                if want_self or want_proto:
                    e_q = embed_item_features(params, uniq)
                    queries = item_tower_forward(params, e_q)
                if want_self:
                    keys = key_encoder_forward(
                        key_state, augment(e_q, cfg.keep_ratio,
                                           rngs["augment"]))
                    l_self = info_nce_loss(queries, keys, cfg.T_ssl)
                if want_proto:
                    l_p = prototype_loss(queries, uniq, state.protos, cfg.r,
                                         rngs["data"])
                elif lp_notice_pending:
                    log.info("prototype loss counted as 0 until the first "
                             "refresh completes")
                    lp_notice_pending = False
                try:
                    loss = total_loss(l_main, l_self, l_p, cfg.alpha_self,
                                      cfg.beta_p)
                except TrainingDiverged as exc:
                    raise TrainingDiverged(
                        f"epoch {epoch} step {step}: {exc}") from None
            total_val = loss.item()
            if not math.isfinite(total_val) or total_val > 1.0e3:
                raise TrainingDiverged(
                    f"epoch {epoch} step {step}: total loss {total_val}; "
                    f"last good checkpoint retained")
            backward(tape, loss)
            adam_step(trainable, adam)
            momentum_update(tower, key_state.weights, cfg.alpha_m)
            acc += (l_main.item(),
                    l_self.item() if l_self is not None else 0.0,
                    l_p.item() if l_p is not None else 0.0,
                    total_val)

        if cfg.beta_p > 0 and (epoch + 1) % cfg.refresh_every == 0:
            state.protos = _refresh_prototypes(cfg, params, key_state,
                                               rngs["kmeans"], epoch,
                                               cluster_cap)
        state.epoch = epoch + 1
        means = acc / steps_per_epoch
        entry = {"epoch": epoch, "l_main": means[0], "l_self": means[1],
                 "l_p": means[2], "l_total": means[3],
                 "wall_ms": (time.perf_counter() - t0) * 1e3}
        epoch_log.append(entry)
        log.info("epoch %d: l_main=%.4f l_self=%.4f l_p=%.4f l_total=%.4f",
                 epoch, *means)
        if out_dir:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
            save_checkpoint(state, os.path.join(out_dir, "checkpoint.pcl"))
    return state, epoch_log
