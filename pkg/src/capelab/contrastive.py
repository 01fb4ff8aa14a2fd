"""Patient-pair contrastive pretraining with random or in-distribution batches."""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .datamodel import PatientIndex, Store, build_patient_index
from .nn.autodiff import backward
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.encoder import CapeNet, EncoderConfig, embed_array
from .nn.optim import AdamState, adam_step, cosine_lr
from .signal import AugmentConfig, PreprocessConfig, RecordTooShortError, augment_view, preprocess_record

log = logging.getLogger(__name__)

BATCH_MODES = ("random", "idb")


class Pair(NamedTuple):
    patient_id: int
    record_a: int
    record_b: int
    cohort_id: int


@dataclass
class PairPlan:
    pairs: list[Pair] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class PretrainConfig:
    batch_size: int = 1024
    epochs: int = 200
    eta0: float = 0.1
    mode: str = "random"
    tau: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch size must be even and >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mode not in BATCH_MODES:
            raise ValueError(f"unknown batching mode {self.mode!r}")

    @property
    def batch_pairs(self) -> int:
        return self.batch_size // 2


class EmptyIndexError(ValueError):
    pass


class HeterogeneousBatchError(ValueError):
    pass


def sample_epoch_pairs(index: PatientIndex, rng: np.random.Generator) -> PairPlan:
    """One positive pair (two distinct ECGs) per eligible patient, in shuffled order."""
    pairs = []
    for pid in index.patient_ids:
        recs = index.records[pid]
        if len(recs) < 2:
            continue
        a, b = rng.choice(len(recs), size=2, replace=False)
        pairs.append(Pair(pid, recs[a], recs[b], index.cohort[pid]))
    if not pairs:
        raise EmptyIndexError("no patient with at least two ECGs")
    order = rng.permutation(len(pairs))
    return PairPlan([pairs[i] for i in order])


def make_batches(
    plan: PairPlan,
    mode: str,
    batch_pairs: int,
    rng: np.random.Generator,
    cohort_names: Mapping[int, str] | None = None,
) -> list[tuple[Pair, ...]]:
    """Chunk a plan into batches of ``batch_pairs`` pairs; partial batches are dropped.

    ``random`` mixes cohorts freely. ``idb`` chunks each cohort separately and
    interleaves the batches, drawing the next cohort with probability
    proportional to its remaining pairs.
    """
    if mode not in BATCH_MODES:
        raise ValueError(f"unknown batching mode {mode!r}")
    if not plan.pairs:
        raise EmptyIndexError("empty pair plan")
    order = rng.permutation(len(plan.pairs))
    pairs = [plan.pairs[i] for i in order]

    if mode == "random":
        n = len(pairs) // batch_pairs
        if n == 0:
            raise ValueError(f"only {len(pairs)} pairs for batches of {batch_pairs}")
        return [tuple(pairs[i * batch_pairs : (i + 1) * batch_pairs]) for i in range(n)]

    by_cohort: dict[int, list[Pair]] = {}
    for p in pairs:
        by_cohort.setdefault(p.cohort_id, []).append(p)
    names = cohort_names or {}
    for cid, ps in sorted(by_cohort.items()):
        if len(ps) < batch_pairs:
            raise ValueError(
                f"cohort {names.get(cid, cid)!s} has {len(ps)} pairs, fewer than batch_pairs={batch_pairs}"
            )
    queues = {
        cid: [tuple(ps[i * batch_pairs : (i + 1) * batch_pairs]) for i in range(len(ps) // batch_pairs)]
        for cid, ps in sorted(by_cohort.items())
    }
    batches = []
    while any(queues.values()):
        live = [cid for cid in sorted(queues) if queues[cid]]
        if len(live) == 1:
            cid = live[0]
        else:
            weight = np.array([len(queues[c]) for c in live], dtype=np.float64)
            cid = live[int(rng.choice(len(live), p=weight / weight.sum()))]
        batches.append(queues[cid].pop(0))
    return batches


def batches_per_epoch(index: PatientIndex, mode: str, batch_pairs: int) -> int:
    counts: dict[int, int] = {}
    for pid, recs in index.records.items():
        if len(recs) >= 2:
            counts[index.cohort[pid]] = counts.get(index.cohort[pid], 0) + 1
    if mode == "random":
        return sum(counts.values()) // batch_pairs
    return sum(c // batch_pairs for c in counts.values())


@dataclass
class PairBatch:
    views: np.ndarray  # [2N, T, L]; rows 2k and 2k+1 are one patient
    patient_ids: np.ndarray
    cohort_ids: np.ndarray

    @property
    def n_pairs(self) -> int:
        return len(self.views) // 2


def build_pair_batch(
    pairs: Sequence[Pair], tensors: Mapping[int, np.ndarray], aug: AugmentConfig, rng: np.random.Generator
) -> PairBatch:
    views, pids, cids = [], [], []
    for p in pairs:
        for rid in (p.record_a, p.record_b):
            views.append(augment_view(tensors[rid], aug, rng))
            pids.append(p.patient_id)
            cids.append(p.cohort_id)
    return PairBatch(np.stack(views).astype(np.float32), np.asarray(pids), np.asarray(cids))


def adjacent_partners(n_views: int) -> np.ndarray:
    return np.arange(n_views) ^ 1


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def info_nce_terms(z: torch.Tensor, partner, tau: float) -> torch.Tensor:
    """Per-view losses ``l_{i, partner(i)}``; the softmax excludes only ``k = i``."""
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError(f"need at least one pair of projections, got shape {tuple(z.shape)}")
    norms = z.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm projection")
    zn = z / norms
    logits = zn @ zn.T / tau
    eye = torch.eye(z.shape[0], dtype=torch.bool)
    logits = logits.masked_fill(eye, float("-inf"))
    # log_softmax subtracts the row maximum internally
    logp = torch.log_softmax(logits, dim=1)
    partner = torch.as_tensor(np.asarray(partner), dtype=torch.long)
    return -logp[torch.arange(z.shape[0]), partner]


def info_nce(projections, partner=None, cfg: LossConfig | None = None):
    """Mean InfoNCE loss over all ``2N`` views.

    ``partner[i]`` is the index of view ``i``'s positive; by default views
    ``2k`` and ``2k+1`` are partners. numpy input gives a float, torch input
    a differentiable scalar tensor.
    """
    cfg = cfg or LossConfig()
    as_numpy = not isinstance(projections, torch.Tensor)
    z = torch.as_tensor(np.asarray(projections, dtype=np.float64)) if as_numpy else projections
    if partner is None:
        partner = adjacent_partners(z.shape[0])
    loss = info_nce_terms(z, partner, cfg.tau).mean()
    return float(loss) if as_numpy else loss


@dataclass
class IdbLoss:
    total: float | torch.Tensor  # sum over all views of all batches
    mean: float | torch.Tensor  # total / number of views
    per_batch: list


def idb_total_loss(batches, cfg: LossConfig | None = None) -> IdbLoss:
    """Sum of per-batch InfoNCE terms over cohort-homogeneous batches.

    Each batch is ``(projections, partner_or_None, cohort_ids)`` where
    ``cohort_ids`` is a scalar or one id per view.
    """
    cfg = cfg or LossConfig()
    total, n_views, per_batch = 0.0, 0, []
    for projections, partner, cohort_ids in batches:
        ids = np.unique(np.atleast_1d(np.asarray(cohort_ids)))
        if ids.size != 1:
            raise HeterogeneousBatchError(f"batch mixes cohorts {ids.tolist()}")
        as_numpy = not isinstance(projections, torch.Tensor)
        z = torch.as_tensor(np.asarray(projections, dtype=np.float64)) if as_numpy else projections
        if partner is None:
            partner = adjacent_partners(z.shape[0])
        terms = info_nce_terms(z, partner, cfg.tau)
        batch_sum = terms.sum()
        total = total + (float(batch_sum) if as_numpy else batch_sum)
        n_views += z.shape[0]
        per_batch.append(float(terms.mean()) if as_numpy else terms.mean())
    if n_views == 0:
        raise ValueError("no batches")
    return IdbLoss(total, total / n_views, per_batch)


class NonFiniteLossError(FloatingPointError):
    pass


class CapeEncoder(TransformerMixin, BaseEstimator):
    """Contrastive ECG encoder with a scikit-learn interface.

    ``fit`` pretrains on preprocessed windows ``[n, source_len, n_leads]``
    using two distinct ECGs of each patient as positives; ``transform`` maps
    ``[n, crop_len, n_leads]`` windows to evaluation-mode embeddings.
    """

    def __init__(
        self,
        encoder_config: EncoderConfig | None = None,
        batch_size: int = 128,
        epochs: int = 30,
        eta0: float = 1e-3,
        mode: str = "random",
        tau: float = 0.1,
        crop_len: int = 2800,
        mask_frac_max: float = 0.2,
        seed: int = 0,
        verbose: bool = False,
    ):
        self.encoder_config = encoder_config
        self.batch_size = batch_size
        self.epochs = epochs
        self.eta0 = eta0
        self.mode = mode
        self.tau = tau
        self.crop_len = crop_len
        self.mask_frac_max = mask_frac_max
        self.seed = seed
        self.verbose = verbose

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(self.batch_size, self.epochs, self.eta0, self.mode, self.tau, self.seed)

    def fit(self, X, y=None, *, patient_ids, cohort_ids, record_ids=None, cohort_names=None):
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 3:
            raise ValueError(f"expected [n, T, leads] windows, got shape {X.shape}")
        record_ids = np.arange(len(X)) if record_ids is None else np.asarray(record_ids)
        index = PatientIndex()
        for rid, pid, cid in zip(record_ids.tolist(), np.asarray(patient_ids).tolist(), np.asarray(cohort_ids).tolist()):
            if index.cohort.setdefault(pid, cid) != cid:
                raise ValueError(f"patient {pid} appears in two cohorts")
            index.records.setdefault(pid, []).append(rid)
        for pid in list(index.records):
            index.records[pid].sort()
        index = index.restrict(record_ids, multi_ecg_only=True)
        tensors = {int(r): X[i] for i, r in enumerate(record_ids.tolist())}
        self._fit_index(index, tensors, cohort_names)
        return self

    def _fit_index(self, index: PatientIndex, tensors: Mapping[int, np.ndarray], cohort_names=None):
        cfg = self.pretrain_config()
        enc_cfg = self.encoder_config or EncoderConfig()
        aug = AugmentConfig(
            crop_len=self.crop_len,
            mask_frac_max=self.mask_frac_max,
            source_len=min(t.shape[0] for t in tensors.values()),
        )
        loss_cfg = LossConfig(cfg.tau)
        n_batches = batches_per_epoch(index, cfg.mode, cfg.batch_pairs)
        if cfg.mode == "idb":
            # raises with the cohort name if any cohort is too small
            make_batches(sample_epoch_pairs(index, np.random.default_rng(0)), "idb", cfg.batch_pairs,
                         np.random.default_rng(0), cohort_names)
        if n_batches == 0:
            raise ValueError(f"{len(index)} eligible patients cannot fill a batch of {cfg.batch_pairs} pairs")
        total_steps = n_batches * cfg.epochs

        net = CapeNet(enc_cfg, seed=cfg.seed)
        params = dict(net.named_parameters())
        state = AdamState()
        self.loss_history_ = []
        step = 0
        for epoch in range(cfg.epochs):
            plan = sample_epoch_pairs(index, np.random.default_rng([cfg.seed, epoch, 0]))
            batches = make_batches(plan, cfg.mode, cfg.batch_pairs, np.random.default_rng([cfg.seed, epoch, 1]),
                                   cohort_names)
            aug_rng = np.random.default_rng([cfg.seed, epoch, 2])
            losses = []
            net.train()
            for b, pairs in enumerate(batches):
                batch = build_pair_batch(pairs, tensors, aug, aug_rng)
                z = net(torch.from_numpy(batch.views).to(enc_cfg.dtype))
                if cfg.mode == "idb":
                    loss = idb_total_loss([(z, None, batch.cohort_ids)], loss_cfg).mean
                else:
                    loss = info_nce(z, None, loss_cfg)
                if not torch.isfinite(loss):
                    raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, batch {b}")
                adam_step(state, params, backward(loss, params), cosine_lr(step, total_steps, cfg.eta0))
                step += 1
                losses.append(loss.item())
            self.loss_history_.append(float(np.mean(losses)))
            if self.verbose:
                log.info("epoch %d/%d mode=%s loss=%.4f", epoch + 1, cfg.epochs, cfg.mode, self.loss_history_[-1])
        net.eval()
        self.net_ = net
        self.n_steps_ = step
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        return embed_array(self.net_, np.asarray(X, dtype=np.float32))

    def save(self, path) -> None:
        check_is_fitted(self, "net_")
        save_checkpoint(self.net_, path)

    @classmethod
    def load(cls, path, encoder_config: EncoderConfig | None = None, **params) -> "CapeEncoder":
        enc_cfg = encoder_config or EncoderConfig()
        est = cls(encoder_config=enc_cfg, **params)
        est.net_ = load_checkpoint(path, enc_cfg)
        return est


def preprocess_store(
    store: Store,
    cfg: PreprocessConfig,
    record_ids=None,
    mains_by_cohort: Mapping[int, float] | None = None,
) -> tuple[dict[int, np.ndarray], list[int]]:
    """Preprocessed windows keyed by record id, plus the ids skipped as too short."""
    mains_by_cohort = mains_by_cohort or {}
    wanted = None if record_ids is None else set(int(r) for r in record_ids)
    out, skipped = {}, []
    for i in range(len(store)):
        rid = int(store.record_ids[i])
        if wanted is not None and rid not in wanted:
            continue
        rec = store[i]
        try:
            out[rid] = preprocess_record(rec, cfg, mains=mains_by_cohort.get(rec.cohort_id)).values
        except RecordTooShortError as exc:
            log.warning("skipping record %d: %s", rid, exc)
            skipped.append(rid)
    return out, skipped


@dataclass
class PretrainResult:
    encoder: CapeEncoder
    loss_history: list[float]
    checkpoint: Path | None


def pretrain(
    stores: Sequence[Store],
    cfg: PretrainConfig,
    enc_cfg: EncoderConfig,
    aug_cfg: AugmentConfig,
    pre_cfg: PreprocessConfig | None = None,
    mains_by_cohort: Mapping[int, float] | None = None,
    exclude_records=(),
    checkpoint_path: str | os.PathLike | None = None,
    cohort_names: Mapping[int, str] | None = None,
    tensor_cache: dict | None = None,
) -> PretrainResult:
    """Pretrain an encoder on every multi-ECG patient of ``stores``.

    Records in ``exclude_records`` are withheld (e.g. a downstream test split).
    ``tensor_cache`` lets callers reuse preprocessed windows across runs.
    """
    pre_cfg = pre_cfg or PreprocessConfig()
    src_cfg = PreprocessConfig(pre_cfg.band_lo, pre_cfg.band_hi, pre_cfg.mains, pre_cfg.target_rate,
                               aug_cfg.source_len, pre_cfg.lead_subset)
    excluded = set(int(r) for r in exclude_records)
    index = PatientIndex()
    tensors: dict[int, np.ndarray] = {}
    for store in stores:
        idx = build_patient_index(store, multi_ecg_only=True)
        keep = [r for recs in idx.records.values() for r in recs if r not in excluded]
        idx = idx.restrict(keep, multi_ecg_only=True)
        index = index.merge(idx)
        needed = [r for recs in idx.records.values() for r in recs]
        key = (str(store.path), aug_cfg.source_len)
        if tensor_cache is not None and key in tensor_cache:
            cached = tensor_cache[key]
        else:
            cached, _ = preprocess_store(store, src_cfg, None, mains_by_cohort)
            if tensor_cache is not None:
                tensor_cache[key] = cached
        for r in needed:
            if r not in cached:
                raise RecordTooShortError(f"record {r} is too short for pretraining windows")
            tensors[r] = cached[r]
    if len(index) == 0:
        raise EmptyIndexError("no multi-ECG patients to pretrain on")

    est = CapeEncoder(
        encoder_config=enc_cfg, batch_size=cfg.batch_size, epochs=cfg.epochs, eta0=cfg.eta0, mode=cfg.mode,
        tau=cfg.tau, crop_len=aug_cfg.crop_len, mask_frac_max=aug_cfg.mask_frac_max, seed=cfg.seed,
    )
    est._fit_index(index, tensors, cohort_names)
    path = None
    if checkpoint_path is not None:
        path = Path(checkpoint_path)
        est.save(path)
    return PretrainResult(est, est.loss_history_, path)


# ---------------------------------------------------------------- embeddings

EMB_MAGIC = b"EMB1"
EMB_VERSION = 1
_EMB_HEADER = struct.Struct("<4sIIQ")
_EMB_ENTRY = struct.Struct("<QHfB")


@dataclass
class EmbeddingSet:
    record_ids: np.ndarray
    cohort_ids: np.ndarray
    ages: np.ndarray  # NaN = missing
    sexes: np.ndarray
    X: np.ndarray  # [n, dim] float32
    n_skipped: int = 0

    def __len__(self) -> int:
        return len(self.record_ids)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, record_ids) -> "EmbeddingSet":
        pos = {int(r): i for i, r in enumerate(self.record_ids)}
        idx = np.array([pos[int(r)] for r in record_ids], dtype=np.int64)
        return EmbeddingSet(self.record_ids[idx], self.cohort_ids[idx], self.ages[idx], self.sexes[idx], self.X[idx])

    def rows(self, record_ids) -> np.ndarray:
        pos = {int(r): i for i, r in enumerate(self.record_ids)}
        return np.array([pos[int(r)] for r in record_ids], dtype=np.int64)


def write_embeddings(emb: EmbeddingSet, path: str | os.PathLike) -> None:
    X = np.ascontiguousarray(emb.X, dtype="<f4")
    parts = [_EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, X.shape[1], len(emb))]
    for i in range(len(emb)):
        parts.append(_EMB_ENTRY.pack(int(emb.record_ids[i]), int(emb.cohort_ids[i]), float(emb.ages[i]),
                                     int(emb.sexes[i])))
        parts.append(X[i].tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def read_embeddings(path: str | os.PathLike) -> EmbeddingSet:
    buf = Path(path).read_bytes()
    if buf[:4] != EMB_MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < _EMB_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    _, version, dim, count = _EMB_HEADER.unpack_from(buf, 0)
    if version != EMB_VERSION:
        raise ValueError(f"{path}: version {version}, expected {EMB_VERSION}")
    stride = _EMB_ENTRY.size + 4 * dim
    if len(buf) < _EMB_HEADER.size + stride * count:
        raise ValueError(f"{path}: truncated ({count} entries declared)")
    rids, cids, ages, sexes = (np.empty(count, dtype=t) for t in (np.int64, np.int64, np.float64, np.int64))
    X = np.empty((count, dim), dtype=np.float32)
    pos = _EMB_HEADER.size
    for i in range(count):
        rids[i], cids[i], ages[i], sexes[i] = _EMB_ENTRY.unpack_from(buf, pos)
        X[i] = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos + _EMB_ENTRY.size)
        pos += stride
    return EmbeddingSet(rids, cids, ages, sexes, X)


def embed(
    checkpoint,
    store: Store,
    split=None,
    pre_cfg: PreprocessConfig | None = None,
    enc_cfg: EncoderConfig | None = None,
    mains_by_cohort: Mapping[int, float] | None = None,
    out_path: str | os.PathLike | None = None,
    tensors: Mapping[int, np.ndarray] | None = None,
) -> EmbeddingSet:
    """Evaluation-mode embeddings of the records in ``split`` (all by default).

    ``checkpoint`` is a path, a :class:`CapeEncoder` or a :class:`CapeNet`.
    Records too short to preprocess are skipped and counted.
    """
    pre_cfg = pre_cfg or PreprocessConfig()
    if isinstance(checkpoint, CapeEncoder):
        net = checkpoint.net_
    elif isinstance(checkpoint, CapeNet):
        net = checkpoint
    else:
        net = load_checkpoint(checkpoint, enc_cfg or EncoderConfig())
    ids = store.record_ids if split is None else np.sort(np.asarray(list(split), dtype=np.int64))
    if tensors is None:
        tensors, skipped = preprocess_store(store, pre_cfg, ids, mains_by_cohort)
    else:
        skipped = [int(r) for r in ids if int(r) not in tensors]
    kept = [int(r) for r in ids if int(r) in tensors]
    if skipped:
        log.warning("embed: skipped %d records too short to preprocess", len(skipped))
    pos = np.array([store.position(r) for r in kept], dtype=np.int64)
    X = embed_array(net, np.stack([tensors[r] for r in kept])) if kept else np.zeros((0, net.cfg.embedding_dim), np.float32)
    emb = EmbeddingSet(
        record_ids=np.asarray(kept, dtype=np.int64),
        cohort_ids=store.cohort_ids[pos] if kept else np.zeros(0, np.int64),
        ages=store.ages[pos] if kept else np.zeros(0),
        sexes=store.sexes[pos] if kept else np.zeros(0, np.int64),
        X=X,
        n_skipped=len(skipped),
    )
    if out_path is not None:
        write_embeddings(emb, out_path)
    return emb


def concat_embeddings(sets: Sequence[EmbeddingSet]) -> EmbeddingSet:
    return EmbeddingSet(
        np.concatenate([s.record_ids for s in sets]),
        np.concatenate([s.cohort_ids for s in sets]),
        np.concatenate([s.ages for s in sets]),
        np.concatenate([s.sexes for s in sets]),
        np.concatenate([s.X for s in sets]),
        sum(s.n_skipped for s in sets),
    )
