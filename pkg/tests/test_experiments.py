import json

import numpy as np
import pytest

from capelab.cli import main
from capelab.contrastive import PretrainConfig
from capelab.experiments import (
    ConfigError,
    ExperimentConfig,
    HeadSection,
    ManifestError,
    RunManifest,
    config_from_dict,
    load_config,
    matrix_id_mae,
    ood_outcome,
    ood_test_split,
    read_csv,
    report,
    run_matrix,
    run_ood,
)
from capelab.datamodel import open_store
from capelab.nn import EncoderConfig

SMALL = {
    "n_patients": 40,
    "runs": 2,
    "scale": 0.002,
    "encoder": {"widths": [4, 4, 8, 8], "projection_dims": [32, 16]},
    "pretrain": {"batch_size": 16, "epochs": 1, "eta0": 1e-3},
    "head": {"max_epochs": 5, "age_hidden": [32, 32], "sex_hidden": [32, 32]},
}


def small_config(kind="ood", **kw) -> ExperimentConfig:
    return config_from_dict({**SMALL, "kind": kind, **kw})


def test_config_round_trip_and_digest(tmp_path):
    cfg = small_config()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = load_config(path)
    assert back == cfg
    assert back.digest() == cfg.digest()
    assert cfg.replace(seed=1).digest() != cfg.digest()
    assert isinstance(back.encoder, EncoderConfig) and back.encoder.widths == (4, 4, 8, 8)
    assert isinstance(back.pretrain, PretrainConfig) and isinstance(back.head, HeadSection)


@pytest.mark.parametrize(
    "data,match",
    [
        ({"colour": 1}, "colour"),
        ({"pretrain": {"lr": 0.1}}, "pretrain"),
        ({"cohorts": [{"cohort_id": 0, "speed": 2}]}, r"cohorts\[0\]"),
        ({"cohorts": [{"cohort_id": 0, "device": {"hum": 1}}]}, r"cohorts\[0\]\.device"),
        ({"kind": "grid"}, "kind"),
        ({"runs": 2, "seeds": [1]}, "seeds"),
        ({"head_cohort": "mars"}, "mars"),
        ({"pretrain": {"batch_size": 7}}, "pretrain"),
        ({"head": {"age_hidden": [16, 8]}}, "head"),
    ],
)
def test_config_is_strict(data, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(data)


def test_run_seeds():
    assert small_config(seed=3).run_seeds() == [3000, 3001]
    assert small_config(seeds=[7, 9]).run_seeds() == [7, 9]


def test_single_cohort_is_rejected(tmp_path):
    one = {"cohorts": [{"cohort_id": 0, "name": "hospital", "n_patients": 4}]}
    with pytest.raises(ConfigError, match="at least two"):
        run_ood(small_config(**one), tmp_path / "o")
    with pytest.raises(ConfigError, match="at least two"):
        run_matrix(small_config("matrix", **one), tmp_path / "m")


@pytest.fixture(scope="module")
def ood_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("ood")
    cfg = small_config()
    return cfg, run_ood(cfg, root / "run")


@pytest.fixture(scope="module")
def matrix_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("matrix")
    cfg = small_config("matrix", scale=0.005)
    return cfg, run_matrix(cfg, root / "run")


def test_ood_outputs(ood_run):
    cfg, m = ood_run
    m.verify()
    runs = read_csv(m.artifact("heads", "runs"))
    n_cohorts = len(cfg.cohort_specs())
    assert len(runs) == cfg.runs * 2 * 2 * n_cohorts
    assert {r["role"] for r in runs if r["cohort"] == cfg.head_cohort} == {"id"}
    shift = read_csv(m.artifact("heads", "shift"))
    assert len(shift) == cfg.runs * 2
    tests = read_csv(m.artifact("heads", "tests"))
    assert {t["test"] for t in tests} == {"wilcoxon", "delong_median"}
    o = ood_outcome(m)
    assert set(o.mae_degradation) == set(o.ood_auroc) == {"random", "idb"}
    assert all(0.0 <= v <= 1.0 for v in o.probe.values())


def test_ood_test_share_is_withheld_at_patient_level(ood_run):
    cfg, m = ood_run
    store = open_store(m.root / "stores" / f"{cfg.head_cohort}.ecgc")
    test, pool = ood_test_split(cfg, store)
    assert test and pool and not test & pool
    pid = {int(r): int(store.patient_ids[store.position(r)]) for r in test | pool}
    assert not {pid[r] for r in test} & {pid[r] for r in pool}


def test_resume_skips_intact_stages_and_reproduces(ood_run, tmp_path):
    cfg, m = ood_run
    before = (m.root / "ood" / "table.csv").read_bytes()
    stamp = m.artifact("pretrain:random", "checkpoint").stat().st_mtime_ns
    again = run_ood(cfg, m.root, resume=True)
    assert again.artifact("pretrain:random", "checkpoint").stat().st_mtime_ns == stamp
    assert (m.root / "ood" / "table.csv").read_bytes() == before
    with pytest.raises(ManifestError, match="different config"):
        run_ood(cfg.replace(seed=5), m.root, resume=True)


def test_resume_redoes_a_tampered_stage(tmp_path):
    cfg = small_config(runs=1)
    m = run_ood(cfg, tmp_path / "run")
    table = (tmp_path / "run" / "ood" / "table.csv").read_bytes()
    (tmp_path / "run" / "ood" / "shift.csv").write_text("garbage\n")
    with pytest.raises(ManifestError):
        RunManifest.load(tmp_path / "run").verify()
    run_ood(cfg, tmp_path / "run", resume=True)
    RunManifest.load(tmp_path / "run").verify()
    assert (tmp_path / "run" / "ood" / "table.csv").read_bytes() == table
    assert m.config_digest == cfg.digest()


def test_matrix_outputs(matrix_run):
    cfg, m = matrix_run
    names = [s.name for s in cfg.cohort_specs()]
    summary = read_csv(m.artifact("heads", "summary"))
    assert len(summary) == 2 * (len(names) + 1) * len(names)
    kw = read_csv(m.artifact("heads", "kruskal"))
    assert len(kw) == 2 * len(names)
    assert all(0.0 <= float(r["p"]) <= 1.0 for r in kw)
    ids = matrix_id_mae(m)
    assert set(ids) == set(names) | {"union"}
    assert all(np.isfinite(v) and v > 0 for v in ids.values())


def test_report_is_byte_deterministic(ood_run, matrix_run, tmp_path):
    ms = [ood_run[1], matrix_run[1]]
    a = report(ms, tmp_path / "a")
    report([m.root for m in ms], tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b and len(files_a) > 3
    for f in files_a:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    text = a.read_text()
    assert "| " in text and "(" in text


def test_cli_pipeline(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({**SMALL, "n_patients": 30}))
    out = tmp_path / "out"
    common = ["--config", str(cfg_path), "--out", str(out)]
    assert main(["synth", *common]) == 0
    assert main(["pretrain", *common, "--mode", "idb"]) == 0
    ckpt = out / "checkpoints" / "idb.ckpt"
    assert ckpt.exists()
    assert main(["embed", *common, "--checkpoint", str(ckpt)]) == 0
    emb = out / "embeddings" / "idb" / "hospital.emb"
    assert main(["head", *common, "--embeddings", str(emb), "--task", "age"]) == 0
    preds = out / "predictions_age.csv"
    rows = read_csv(preds)
    assert {r["split"] for r in rows} == {"train", "val", "test"}
    capsys.readouterr()
    assert main(["eval", "--predictions", str(preds)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "metric,value,n" and lines[1].startswith("mae,")


def test_cli_reports_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "nonsense" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["pretrain", "--mode", "sideways", "--out", str(tmp_path)])
