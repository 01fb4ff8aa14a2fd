import math

import numpy as np
import pytest
import torch

from capelab.contrastive import (
    CapeEncoder,
    EmbeddingSet,
    EmptyIndexError,
    HeterogeneousBatchError,
    LossConfig,
    PretrainConfig,
    cosine_sim,
    embed,
    idb_total_loss,
    info_nce,
    make_batches,
    pretrain,
    read_embeddings,
    sample_epoch_pairs,
    write_embeddings,
)
from capelab.datamodel import PatientIndex
from capelab.nn import CheckpointError, EncoderConfig
from capelab.signal import AugmentConfig
from capelab.syncohort import CohortSpec, generate_cohort


def brute_force_loss(z, partner, tau):
    z = np.asarray(z, dtype=np.float64)
    n = len(z)
    sim = np.array([[cosine_sim(z[i], z[k]) for k in range(n)] for i in range(n)])
    total = 0.0
    for i in range(n):
        den = sum(math.exp(sim[i, k] / tau) for k in range(n) if k != i)
        total += -math.log(math.exp(sim[i, partner[i]] / tau) / den)
    return total / n


def test_cosine_sim_examples():
    assert cosine_sim([3, 4], [3, 4]) == pytest.approx(1.0)
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert cosine_sim([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2))
    with pytest.raises(ValueError):
        cosine_sim([0, 0], [1, 0])


def test_worked_example():
    z = [[1, 0], [1, 0], [0, 1], [0, 1]]
    assert info_nce(z, cfg=LossConfig(1.0)) == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-12)


def test_single_pair_is_zero():
    rng = np.random.default_rng(0)
    for _ in range(10):
        assert info_nce(rng.standard_normal((2, 7))) == 0.0


@pytest.mark.parametrize("n_views", [2, 4, 8, 16])
def test_identical_projections_give_log_2n_minus_1(n_views):
    assert info_nce(np.ones((n_views, 5))) == pytest.approx(math.log(n_views - 1), abs=1e-9)


def test_scale_and_permutation_invariance():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((8, 6))
    base = info_nce(z)
    assert info_nce(z * rng.uniform(0.1, 10, (8, 1))) == pytest.approx(base, abs=1e-9)
    order = rng.permutation(4)
    perm = np.concatenate([[2 * p, 2 * p + 1] for p in order])
    assert info_nce(z[perm]) == pytest.approx(base, abs=1e-9)


def test_matches_brute_force_with_custom_pairing():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((6, 3))
    partner = np.array([3, 4, 5, 0, 1, 2])
    assert info_nce(z, partner, LossConfig(0.5)) == pytest.approx(brute_force_loss(z, partner, 0.5), abs=1e-9)


def test_temperature_sharpening_lowers_loss():
    z = np.array([[1, 0.1], [1, 0.0], [-1, 0.1], [-1, 0.0]])
    losses = [info_nce(z, cfg=LossConfig(t)) for t in (1.0, 0.5, 0.1)]
    assert losses[0] > losses[1] > losses[2]


def test_loss_errors():
    with pytest.raises(ValueError):
        info_nce(np.ones((1, 3)))
    with pytest.raises(ValueError):
        info_nce(np.array([[1.0, 0], [0, 0]]))
    with pytest.raises(ValueError):
        LossConfig(0.0)


def test_torch_input_is_differentiable():
    z = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    loss = info_nce(z)
    loss.backward()
    assert z.grad is not None and torch.isfinite(z.grad).all()


def test_idb_total():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((6, 5))
    one = idb_total_loss([(a, None, 0)])
    assert one.mean == info_nce(a)
    two = idb_total_loss([(a, None, [1, 1, 1, 1]), (b, None, 2)])
    assert two.total == pytest.approx(4 * info_nce(a) + 6 * info_nce(b), abs=1e-12)
    assert two.mean == pytest.approx(two.total / 10)
    with pytest.raises(HeterogeneousBatchError, match=r"\[0, 1\]"):
        idb_total_loss([(a, None, [0, 0, 1, 1])])


def make_index(sizes_by_cohort: dict[int, int], ecgs=3) -> PatientIndex:
    idx = PatientIndex()
    for cohort, n in sizes_by_cohort.items():
        for i in range(n):
            pid = cohort * 100_000 + i
            idx.records[pid] = [pid * 10 + k for k in range(ecgs)]
            idx.cohort[pid] = cohort
    return idx


def test_sample_epoch_pairs():
    idx = make_index({0: 20})
    idx.records[5] = [50, 51]
    plan = sample_epoch_pairs(idx, np.random.default_rng(0))
    assert len(plan) == 20
    assert sorted(p.patient_id for p in plan.pairs) == sorted(idx.records)
    for p in plan.pairs:
        assert p.record_a != p.record_b
        assert {p.record_a, p.record_b} <= set(idx.records[p.patient_id])
    assert {(p.record_a, p.record_b) for p in plan.pairs if p.patient_id == 5} <= {(50, 51), (51, 50)}
    assert sample_epoch_pairs(idx, np.random.default_rng(0)).pairs == plan.pairs
    with pytest.raises(EmptyIndexError):
        sample_epoch_pairs(PatientIndex(), np.random.default_rng(0))


def test_single_ecg_patients_are_skipped():
    idx = make_index({0: 3})
    idx.records[99] = [990]
    idx.cohort[99] = 0
    plan = sample_epoch_pairs(idx, np.random.default_rng(0))
    assert 99 not in {p.patient_id for p in plan.pairs}


def test_idb_batches_are_homogeneous():
    plan = sample_epoch_pairs(make_index({0: 100, 1: 70, 2: 45}), np.random.default_rng(0))
    batches = make_batches(plan, "idb", 8, np.random.default_rng(1))
    assert len(batches) == 100 // 8 + 70 // 8 + 45 // 8
    for b in batches:
        assert len(b) == 8
        assert len({p.cohort_id for p in b}) == 1
    with pytest.raises(ValueError, match="tiny"):
        make_batches(plan, "idb", 50, np.random.default_rng(1), cohort_names={2: "tiny"})


def test_random_batches_mix_cohorts():
    plan = sample_epoch_pairs(make_index({0: 12_800, 1: 12_800}, ecgs=2), np.random.default_rng(0))
    batches = make_batches(plan, "random", 512, np.random.default_rng(0))
    assert len(batches) == 50
    assert all(len(b) * 2 == 1024 for b in batches)
    frac = np.array([np.mean([p.cohort_id for p in b]) for b in batches])
    assert abs(frac.mean() - 0.5) <= 0.1
    assert np.all(np.abs(frac - 0.5) < 0.1)


def test_pretrain_config_validation():
    with pytest.raises(ValueError):
        PretrainConfig(batch_size=7)
    with pytest.raises(ValueError):
        PretrainConfig(epochs=0)
    with pytest.raises(ValueError):
        PretrainConfig(mode="mixed")
    assert PretrainConfig().batch_pairs == 512


SMALL_ENC = EncoderConfig(widths=(4, 4, 8, 8), embedding_dim=256, projection_dims=(32, 16))


@pytest.fixture(scope="module")
def stores(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohorts")
    specs = [
        CohortSpec(0, "a", n_patients=12, ecgs_per_patient=(2, 3), seed=1, duration=9.0),
        CohortSpec(1, "b", n_patients=12, ecgs_per_patient=(2, 2), seed=2, duration=9.0, sampling_rate=400.0),
    ]
    return [generate_cohort(s, root / f"{s.name}.ecgc") for s in specs]


def small_pretrain(stores, tmp_path, mode="random", seed=0, epochs=2, batch_size=8):
    return pretrain(stores, PretrainConfig(batch_size=batch_size, epochs=epochs, eta0=1e-3, mode=mode, seed=seed),
                    SMALL_ENC, AugmentConfig(), checkpoint_path=tmp_path / f"{mode}{seed}.ckpt")


def test_pretrain_is_deterministic(stores, tmp_path):
    (tmp_path / "x").mkdir()
    (tmp_path / "y").mkdir()
    a = small_pretrain(stores, tmp_path / "x", seed=3)
    b = small_pretrain(stores, tmp_path / "y", seed=3)
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    assert a.loss_history == b.loss_history


def test_single_cohort_random_equals_idb(stores, tmp_path):
    r = small_pretrain(stores[:1], tmp_path, mode="random", batch_size=8)
    i = small_pretrain(stores[:1], tmp_path, mode="idb", batch_size=8)
    assert r.loss_history == i.loss_history


def test_idb_precondition(stores, tmp_path):
    with pytest.raises(ValueError, match="fewer than batch_pairs"):
        small_pretrain(stores, tmp_path, mode="idb", batch_size=26)


def test_embed_and_cache_round_trip(stores, tmp_path):
    res = small_pretrain(stores, tmp_path, epochs=1)
    store = stores[0]
    e1 = embed(res.checkpoint, store, out_path=tmp_path / "a.emb", enc_cfg=SMALL_ENC)
    embed(res.checkpoint, store, out_path=tmp_path / "b.emb", enc_cfg=SMALL_ENC)
    assert (tmp_path / "a.emb").read_bytes() == (tmp_path / "b.emb").read_bytes()
    assert e1.X.shape == (len(store), 256)
    back = read_embeddings(tmp_path / "a.emb")
    assert np.array_equal(back.X, e1.X)
    assert np.array_equal(back.record_ids, store.record_ids)
    np.testing.assert_allclose(back.ages, store.ages.astype(np.float32))
    sub = embed(res.checkpoint, store, split=store.record_ids[:5], enc_cfg=SMALL_ENC)
    assert len(sub) == 5
    np.testing.assert_array_equal(sub.X, e1.X[:5])


def test_corrupted_checkpoint_is_rejected(stores, tmp_path):
    res = small_pretrain(stores, tmp_path, epochs=1)
    raw = bytearray(res.checkpoint.read_bytes())
    raw[8] ^= 1
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        embed(bad, stores[0], enc_cfg=SMALL_ENC)


def test_embedding_cache_rejects_garbage(tmp_path):
    (tmp_path / "x.emb").write_bytes(b"EMB0" + bytes(16))
    with pytest.raises(ValueError):
        read_embeddings(tmp_path / "x.emb")
    emb = EmbeddingSet(np.array([1]), np.array([0]), np.array([50.0]), np.array([1]), np.ones((1, 4), np.float32))
    write_embeddings(emb, tmp_path / "y.emb")
    raw = (tmp_path / "y.emb").read_bytes()
    (tmp_path / "z.emb").write_bytes(raw[:-3])
    with pytest.raises(ValueError):
        read_embeddings(tmp_path / "z.emb")


def test_estimator_api(stores):
    from capelab.contrastive import preprocess_store
    from capelab.signal import PreprocessConfig

    tensors, _ = preprocess_store(stores[0], PreprocessConfig(window_len=3200))
    ids = np.array(sorted(tensors))
    X = np.stack([tensors[i] for i in ids])
    pids = np.array([stores[0].patient_ids[stores[0].position(i)] for i in ids])
    enc = CapeEncoder(encoder_config=SMALL_ENC, batch_size=8, epochs=1, eta0=1e-3)
    enc.fit(X, patient_ids=pids, cohort_ids=np.zeros(len(ids), int), record_ids=ids)
    out = enc.transform(X[:3, 200:3000])
    assert out.shape == (3, 256)
    assert enc.get_params()["batch_size"] == 8
    assert len(enc.loss_history_) == 1


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
def test_desk_pretraining_reduces_loss(seed, tmp_path):
    import dataclasses

    from capelab.datamodel import open_store
    from capelab.experiments import ExperimentConfig, synth_stores

    cfg = ExperimentConfig(seed=seed)
    stores = [open_store(p) for p in synth_stores(cfg, tmp_path).values()]
    res = pretrain(stores, dataclasses.replace(cfg.pretrain, epochs=5, seed=seed), cfg.encoder, cfg.augment,
                   cfg.preprocess, mains_by_cohort=cfg.mains_by_cohort())
    assert res.loss_history[-1] < res.loss_history[0]
