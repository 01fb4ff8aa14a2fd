"""Experiment orchestration: the pretrain x label matrix, the OOD protocol and reporting.

Every stage writes its artifacts under the output directory and records
their sha256 digests in ``manifest.json``; ``resume=True`` skips stages
whose artifacts are still intact. Reports are rendered from those
artifacts only.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from . import __version__
from .contrastive import (
    EmbeddingSet,
    PretrainConfig,
    concat_embeddings,
    embed,
    preprocess_store,
    pretrain,
    read_embeddings,
)
from .datamodel import SplitSpec, Store, make_splits, open_store
from .eval import (
    DegenerateVarianceError,
    auroc,
    binned_mae,
    ci95,
    cohort_probe,
    delong_test,
    format_mean_se,
    kruskal_wallis,
    mae,
    pca2d,
    wilcoxon_signed_rank,
)
from .nn.encoder import EncoderConfig
from .nn.heads import AGE_PRESET, SEX_PRESET, HeadConfig, train_head
from .signal import AugmentConfig, PreprocessConfig
from .syncohort import BUNDLES, CohortSpec, DeviceArtifact, generate_cohort

log = logging.getLogger(__name__)

KINDS = ("matrix", "ood")
FULL_MATRIX_SPLIT = (10_000, 2_000, 2_000)
FULL_OOD_SUBSET = 10_000
OOD_FRACTIONS = (0.5, 0.1, 0.4)


class ConfigError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class HeadSection:
    age_hidden: tuple[int, int] = AGE_PRESET
    sex_hidden: tuple[int, int] = SEX_PRESET
    lr: float = 1e-4
    lr_decay: float = 0.5
    plateau_epochs: int = 5
    patience: int | None = 10
    max_epochs: int = 300
    batch_size: int = 64
    grid: bool = False

    def __post_init__(self):
        object.__setattr__(self, "age_hidden", tuple(self.age_hidden))
        object.__setattr__(self, "sex_hidden", tuple(self.sex_hidden))
        for task in ("age-regression", "sex-classification"):
            self.for_task(task, 0)

    def for_task(self, task: str, seed: int) -> HeadConfig:
        hidden = self.age_hidden if task == "age-regression" else self.sex_hidden
        return HeadConfig(hidden=tuple(hidden), lr=self.lr, lr_decay=self.lr_decay,
                          plateau_epochs=self.plateau_epochs, patience=self.patience,
                          max_epochs=self.max_epochs, batch_size=self.batch_size, grid=self.grid, seed=seed)


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "ood"
    bundle: str = "paperlike3"
    n_patients: int = 300
    cohorts: tuple[CohortSpec, ...] | None = None
    seed: int = 0
    runs: int = 10
    seeds: tuple[int, ...] | None = None
    scale: float = 0.05
    head_cohort: str = "hospital"
    bin_width: float = 2.0
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig(batch_size=128, epochs=30, eta0=1e-3))
    head: HeadSection = field(default_factory=HeadSection)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if self.seeds is not None and len(self.seeds) != self.runs:
            raise ConfigError(f"{len(self.seeds)} seeds for {self.runs} runs")
        if not 0 < self.scale <= 1:
            raise ConfigError("scale must lie in (0, 1]")
        if self.cohorts is None and self.bundle not in BUNDLES:
            raise ConfigError(f"unknown cohort bundle {self.bundle!r}")
        names = [c.name for c in self.cohort_specs()]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate cohort names {names}")
        if self.kind == "ood" and self.head_cohort not in names:
            raise ConfigError(f"head cohort {self.head_cohort!r} is not one of {names}")

    def cohort_specs(self) -> list[CohortSpec]:
        if self.cohorts is not None:
            return list(self.cohorts)
        return BUNDLES[self.bundle](n_patients=self.n_patients, seed=self.seed)

    def run_seeds(self) -> list[int]:
        return list(self.seeds) if self.seeds is not None else [1000 * self.seed + r for r in range(self.runs)]

    def mains_by_cohort(self) -> dict[int, float]:
        return {c.cohort_id: c.device.mains_hz for c in self.cohort_specs()}

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: Mapping[str, Any], where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _cohort_from_dict(d: Mapping[str, Any], i: int) -> CohortSpec:
    d = dict(d)
    if "device" in d:
        d["device"] = _build(DeviceArtifact, d["device"], f"cohorts[{i}].device")
    return _build(CohortSpec, d, f"cohorts[{i}]")


SECTIONS = {
    "preprocess": PreprocessConfig,
    "augment": AugmentConfig,
    "encoder": EncoderConfig,
    "pretrain": PretrainConfig,
    "head": HeadSection,
}


def config_from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    """Strict JSON-to-config conversion; unknown keys anywhere are errors."""
    data = dict(data)
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    for key, cls in SECTIONS.items():
        if key in data:
            data[key] = _build(cls, data[key], key)
    if data.get("cohorts") is not None:
        data["cohorts"] = tuple(_cohort_from_dict(c, i) for i, c in enumerate(data["cohorts"]))
    if data.get("seeds") is not None:
        data["seeds"] = tuple(int(s) for s in data["seeds"])
    try:
        return ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- manifest


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


@dataclass
class RunManifest:
    root: Path
    config_digest: str
    kind: str
    code_version: str = __version__
    stages: dict[str, dict] = field(default_factory=dict)

    @property
    def path(self) -> Path:
        return self.root / "manifest.json"

    def to_json(self) -> str:
        return json.dumps(
            {"config_digest": self.config_digest, "kind": self.kind, "code_version": self.code_version,
             "stages": self.stages},
            indent=2, sort_keys=True,
        )

    def save(self) -> None:
        _write_atomic(self.path, self.to_json().encode())

    @classmethod
    def load(cls, root: str | os.PathLike) -> "RunManifest":
        root = Path(root)
        if root.name == "manifest.json":
            root = root.parent
        data = json.loads((root / "manifest.json").read_text())
        return cls(root, data["config_digest"], data["kind"], data["code_version"], data["stages"])

    def artifact(self, stage: str, key: str) -> Path:
        return self.root / self.stages[stage]["artifacts"][key]["path"]

    def stage_ok(self, stage: str) -> bool:
        entry = self.stages.get(stage)
        if entry is None:
            return False
        for art in entry["artifacts"].values():
            p = self.root / art["path"]
            if not p.exists() or sha256_file(p) != art["sha256"]:
                return False
        return True

    def verify(self) -> None:
        for stage in self.stages:
            if not self.stage_ok(stage):
                raise ManifestError(f"{self.root}: artifacts of stage {stage!r} are missing or altered")

    def record(self, stage: str, artifacts: Mapping[str, Path], seconds: float) -> None:
        self.stages[stage] = {
            "artifacts": {
                k: {"path": Path(p).relative_to(self.root).as_posix(), "sha256": sha256_file(p)}
                for k, p in sorted(artifacts.items())
            },
            "seconds": round(seconds, 3),
        }
        self.save()


def _open_manifest(cfg: ExperimentConfig, out: Path, resume: bool) -> RunManifest:
    out.mkdir(parents=True, exist_ok=True)
    _write_atomic(out / "config.json", (json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n").encode())
    if resume and (out / "manifest.json").exists():
        m = RunManifest.load(out)
        if m.config_digest != cfg.digest():
            raise ManifestError(f"{out}: manifest belongs to a different config")
        return m
    m = RunManifest(out, cfg.digest(), cfg.kind)
    m.save()
    return m


def _stage(manifest: RunManifest, name: str, resume: bool, fn: Callable[[], Mapping[str, Path]]) -> dict[str, Path]:
    if resume and manifest.stage_ok(name):
        log.info("stage %s: up to date", name)
        return {k: manifest.artifact(name, k) for k in manifest.stages[name]["artifacts"]}
    t0 = time.perf_counter()
    arts = dict(fn())
    manifest.record(name, arts, time.perf_counter() - t0)
    log.info("stage %s: done in %.1fs", name, time.perf_counter() - t0)
    return arts


# ------------------------------------------------------------------ helpers


def _csv_text(header: list[str], rows: list[list]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue().encode("utf-8")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    _write_atomic(path, _csv_text(header, rows))
    return path


def read_csv(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def synth_stores(cfg: ExperimentConfig, out: Path) -> dict[str, Path]:
    arts = {}
    for spec in cfg.cohort_specs():
        path = out / "stores" / f"{spec.name}.ecgc"
        path.parent.mkdir(parents=True, exist_ok=True)
        generate_cohort(spec, path)
        arts[spec.name] = path
    return arts


class _Workspace:
    """Stores and preprocessed windows shared by the stages of one experiment."""

    def __init__(self, cfg: ExperimentConfig, store_paths: Mapping[str, Path]):
        self.cfg = cfg
        self.specs = {s.name: s for s in cfg.cohort_specs()}
        self.stores: dict[str, Store] = {name: open_store(store_paths[name]) for name in self.specs}
        self.mains = cfg.mains_by_cohort()
        self.pretrain_cache: dict = {}
        self._eval: dict[str, dict[int, np.ndarray]] = {}

    def eval_tensors(self, name: str) -> dict[int, np.ndarray]:
        if name not in self._eval:
            self._eval[name], _ = preprocess_store(self.stores[name], self.cfg.preprocess, None, self.mains)
        return self._eval[name]


def _pretrain_stage(ws: _Workspace, cohorts: list[str], mode: str, path: Path, exclude=()) -> dict[str, Path]:
    cfg = ws.cfg
    path.parent.mkdir(parents=True, exist_ok=True)
    res = pretrain(
        [ws.stores[c] for c in cohorts],
        dataclasses.replace(cfg.pretrain, mode=mode),
        cfg.encoder,
        cfg.augment,
        cfg.preprocess,
        mains_by_cohort=ws.mains,
        exclude_records=exclude,
        checkpoint_path=path,
        cohort_names={s.cohort_id: s.name for s in ws.specs.values()},
        tensor_cache=ws.pretrain_cache,
    )
    loss_path = _write_csv(path.with_suffix(".loss.csv"), ["epoch", "loss"],
                           [[i + 1, float(v)] for i, v in enumerate(res.loss_history)])
    return {"checkpoint": path, "loss": loss_path}


def _embed_stage(ws: _Workspace, ckpt: Path, enc_name: str, out: Path) -> dict[str, Path]:
    arts = {}
    for name, store in ws.stores.items():
        path = out / "embeddings" / enc_name / f"{name}.emb"
        path.parent.mkdir(parents=True, exist_ok=True)
        embed(ckpt, store, None, ws.cfg.preprocess, ws.cfg.encoder, ws.mains, path, tensors=ws.eval_tensors(name))
        arts[name] = path
    return arts


def _labels(emb: EmbeddingSet, task: str) -> np.ndarray:
    return emb.ages if task == "age-regression" else emb.sexes.astype(np.float64)


def _labelled(emb: EmbeddingSet) -> np.ndarray:
    return np.isfinite(emb.ages) & np.isin(emb.sexes, (0, 1))


def _fit_head(emb: EmbeddingSet, task: str, head_cfg: HeadConfig, tr, va):
    head, _ = train_head(emb.X, _labels(emb, task), task, head_cfg, (tr, va))
    return head


def _score(head, emb: EmbeddingSet, rows, task) -> tuple[float, np.ndarray]:
    y = _labels(emb, task)[rows]
    if task == "age-regression":
        pred = head.predict(emb.X[rows])
        return mae(pred, y), pred
    s = head.decision_function(emb.X[rows])
    return auroc(s, y), s


def _diagnostics(ws: _Workspace, embs: Mapping[str, Mapping[str, EmbeddingSet]], out: Path) -> dict[str, Path]:
    """Cohort probe scores and 2-D principal-component coordinates per encoder."""
    arts = {}
    rows = []
    for enc in sorted(embs):
        joined = concat_embeddings([embs[enc][c] for c in sorted(embs[enc])])
        rows.append([enc, cohort_probe(joined.X, joined.cohort_ids, seed=ws.cfg.seed)])
        coords, frac = pca2d(joined.X)
        arts[f"pca:{enc}"] = _write_csv(
            out / "pca" / f"{enc}.csv", ["record_id", "cohort_id", "pc1", "pc2"],
            [[int(r), int(c), float(a), float(b)] for r, c, (a, b) in zip(joined.record_ids, joined.cohort_ids, coords)],
        )
        arts[f"pca_var:{enc}"] = _write_csv(out / "pca" / f"{enc}.var.csv", ["component", "explained"],
                                            [[1, float(frac[0])], [2, float(frac[1])]])
    arts["probe"] = _write_csv(out / "probe.csv", ["encoder", "probe_auroc"], rows)
    return arts


def _binned(out: Path, enc: str, cohort: str, preds: list[tuple[np.ndarray, np.ndarray]], width: float) -> Path:
    pred = np.concatenate([p for p, _ in preds])
    truth = np.concatenate([t for _, t in preds])
    table = binned_mae(pred, truth, width)
    return _write_csv(
        out / "binned" / f"{enc}__{cohort}.csv",
        ["bin_lo", "bin_hi", "count", "mae", "normalized_mae", "empty"],
        [[r["bin_lo"], r["bin_hi"], r["count"], r["mae"], r["normalized_mae"], int(r["empty"])] for r in table.rows()],
    )


# ------------------------------------------------------------------ matrix


def scaled_counts(counts, scale: float) -> tuple[int, ...]:
    return tuple(max(1, int(round(c * scale))) for c in counts)


def run_matrix(cfg: ExperimentConfig, out: str | os.PathLike, resume: bool = False) -> RunManifest:
    """Pretrain one encoder per cohort plus a union encoder and evaluate every pairing."""
    if cfg.kind != "matrix":
        cfg = cfg.replace(kind="matrix")
    out = Path(out)
    specs = cfg.cohort_specs()
    if len(specs) < 2:
        raise ConfigError("the matrix experiment needs at least two cohorts")
    manifest = _open_manifest(cfg, out, resume)
    stores = _stage(manifest, "synth", resume, lambda: synth_stores(cfg, out))
    ws = _Workspace(cfg, stores)
    names = [s.name for s in specs]
    encoders = {n: [n] for n in names}
    encoders["union"] = names

    embs: dict[str, dict[str, EmbeddingSet]] = {}
    for enc, cohorts in encoders.items():
        ck = _stage(manifest, f"pretrain:{enc}", resume,
                    lambda: _pretrain_stage(ws, cohorts, "random", out / "checkpoints" / f"{enc}.ckpt"))["checkpoint"]
        arts = _stage(manifest, f"embed:{enc}", resume, lambda: _embed_stage(ws, ck, enc, out))
        embs[enc] = {c: read_embeddings(arts[c]) for c in names}

    n_tr, n_va, n_te = scaled_counts(FULL_MATRIX_SPLIT, cfg.scale)

    def heads() -> dict[str, Path]:
        rows, binned = [], {}
        for r, seed in enumerate(cfg.run_seeds()):
            for c in names:
                labelled = embs["union"][c].record_ids[_labelled(embs["union"][c])]
                tr, va, te = make_splits(ws.stores[c], SplitSpec(n_tr, n_va, n_te, seed=seed), labelled)
                for enc in encoders:
                    emb = embs[enc][c]
                    idx = [emb.rows(sorted(s)) for s in (tr, va, te)]
                    for task in ("age-regression", "sex-classification"):
                        head = _fit_head(emb, task, cfg.head.for_task(task, seed), idx[0], idx[1])
                        value, pred = _score(head, emb, idx[2], task)
                        rows.append([r, seed, enc, c, task, value])
                        if task == "age-regression":
                            binned.setdefault((enc, c), []).append((pred, emb.ages[idx[2]]))
        arts = {"runs": _write_csv(out / "matrix" / "runs.csv", ["run", "seed", "encoder", "cohort", "task", "value"], rows)}
        for (enc, c), preds in sorted(binned.items()):
            arts[f"binned:{enc}:{c}"] = _binned(out, enc, c, preds, cfg.bin_width)
        arts.update(_matrix_summary(out, rows, list(encoders), names))
        return arts

    _stage(manifest, "heads", resume, heads)
    _stage(manifest, "diagnostics", resume, lambda: _diagnostics(ws, embs, out))
    return manifest


def _matrix_summary(out: Path, rows, encoders, cohorts) -> dict[str, Path]:
    values: dict[tuple, list[float]] = {}
    for _, _, enc, c, task, v in rows:
        values.setdefault((enc, c, task), []).append(v)
    summary, kw = [], []
    for task in ("age-regression", "sex-classification"):
        for enc in encoders:
            for c in cohorts:
                v = values[(enc, c, task)]
                if len(v) >= 2:
                    m = ci95(v)
                    summary.append([task, enc, c, m.value, m.lo, m.hi, m.se, m.n])
                else:
                    summary.append([task, enc, c, float(v[0]), float("nan"), float("nan"), float("nan"), 1])
        for c in cohorts:
            h, p = kruskal_wallis([values[(enc, c, task)] for enc in encoders])
            kw.append([task, c, h, p])
    return {
        "summary": _write_csv(out / "matrix" / "summary.csv",
                              ["task", "encoder", "cohort", "mean", "lo", "hi", "se", "n"], summary),
        "kruskal": _write_csv(out / "matrix" / "kruskal.csv", ["task", "cohort", "H", "p"], kw),
    }


# --------------------------------------------------------------------- ood


OOD_ENCODERS = ("random", "idb")


def ood_test_split(cfg: ExperimentConfig, store: Store) -> tuple[set[int], set[int]]:
    """Fixed patient-level test share of the head cohort, and the remaining pool.

    The test share is drawn once from ``cfg.seed`` so it can be withheld from
    pretraining; the pool is re-split into train/val on every run.
    """
    labelled = store.record_ids[np.isfinite(store.ages) & np.isin(store.sexes, (0, 1))]
    if labelled.size == 0:
        raise ConfigError(f"head cohort {cfg.head_cohort!r} has no age/sex labels")
    pid_of = {int(r): int(store.patient_ids[store.position(r)]) for r in labelled}
    patients = np.array(sorted(set(pid_of.values())))
    n_test = int(np.floor(OOD_FRACTIONS[2] * patients.size + 1e-9))
    perm = patients[np.random.default_rng(cfg.seed).permutation(patients.size)]
    test_patients = set(perm[patients.size - n_test :].tolist())
    test = {r for r, p in pid_of.items() if p in test_patients}
    return test, set(pid_of) - test


def _train_val(store: Store, pool: set[int], seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-run patient-level split of the non-test pool in the 50:10 ratio."""
    f_tr, f_va, _ = OOD_FRACTIONS
    by_patient: dict[int, list[int]] = {}
    for r in sorted(pool):
        by_patient.setdefault(int(store.patient_ids[store.position(r)]), []).append(r)
    patients = np.array(sorted(by_patient))
    perm = patients[np.random.default_rng(seed).permutation(patients.size)]
    n_va = max(1, int(round(patients.size * f_va / (f_tr + f_va))))
    va = sorted(r for p in perm[:n_va] for r in by_patient[int(p)])
    tr = sorted(r for p in perm[n_va:] for r in by_patient[int(p)])
    return np.asarray(tr), np.asarray(va)


def run_ood(cfg: ExperimentConfig, out: str | os.PathLike, resume: bool = False) -> RunManifest:
    """Random vs in-distribution batching: heads on one cohort, evaluated on all cohorts."""
    if cfg.kind != "ood":
        cfg = cfg.replace(kind="ood")
    out = Path(out)
    specs = cfg.cohort_specs()
    if len(specs) < 2:
        raise ConfigError("out-of-distribution evaluation needs at least two cohorts")
    manifest = _open_manifest(cfg, out, resume)
    stores = _stage(manifest, "synth", resume, lambda: synth_stores(cfg, out))
    ws = _Workspace(cfg, stores)
    names = [s.name for s in specs]
    home = cfg.head_cohort
    test, pool = ood_test_split(cfg, ws.stores[home])

    embs: dict[str, dict[str, EmbeddingSet]] = {}
    for mode in OOD_ENCODERS:
        ck = _stage(manifest, f"pretrain:{mode}", resume,
                    lambda: _pretrain_stage(ws, names, mode, out / "checkpoints" / f"{mode}.ckpt", exclude=test))
        ck = ck["checkpoint"]
        arts = _stage(manifest, f"embed:{mode}", resume, lambda: _embed_stage(ws, ck, mode, out))
        embs[mode] = {c: read_embeddings(arts[c]) for c in names}

    subset = max(1, int(round(FULL_OOD_SUBSET * cfg.scale)))

    def heads() -> dict[str, Path]:
        rows, binned, scores = [], {}, {}
        for r, seed in enumerate(cfg.run_seeds()):
            tr_ids, va_ids = _train_val(ws.stores[home], pool, seed)
            eval_ids = {}
            for c in names:
                cand = np.array(sorted(test)) if c == home else \
                    embs["random"][c].record_ids[_labelled(embs["random"][c])]
                rng = np.random.default_rng(seed)
                eval_ids[c] = np.sort(rng.choice(cand, size=min(subset, cand.size), replace=False))
            for mode in OOD_ENCODERS:
                for task in ("age-regression", "sex-classification"):
                    emb = embs[mode][home]
                    head = _fit_head(emb, task, cfg.head.for_task(task, seed), emb.rows(tr_ids), emb.rows(va_ids))
                    for c in names:
                        e = embs[mode][c]
                        rows_c = e.rows(eval_ids[c])
                        value, out_scores = _score(head, e, rows_c, task)
                        role = "id" if c == home else "ood"
                        rows.append([r, seed, mode, c, role, task, value])
                        if task == "age-regression":
                            binned.setdefault((mode, c), []).append((out_scores, e.ages[rows_c]))
                        else:
                            scores[(r, mode, c)] = (out_scores, _labels(e, task)[rows_c])
        arts = {"runs": _write_csv(out / "ood" / "runs.csv",
                                   ["run", "seed", "encoder", "cohort", "role", "task", "value"], rows)}
        for (mode, c), preds in sorted(binned.items()):
            arts[f"binned:{mode}:{c}"] = _binned(out, mode, c, preds, cfg.bin_width)
        arts.update(_ood_summary(out, rows, names, home, scores, len(cfg.run_seeds())))
        return arts

    _stage(manifest, "heads", resume, heads)
    _stage(manifest, "diagnostics", resume, lambda: _diagnostics(ws, embs, out))
    return manifest


def _ood_summary(out: Path, rows, names, home, scores, n_runs) -> dict[str, Path]:
    values: dict[tuple, list[float]] = {}
    for r, _, mode, c, _, task, v in rows:
        values.setdefault((mode, c, task), []).append(v)
    table = []
    for task in ("age-regression", "sex-classification"):
        for mode in OOD_ENCODERS:
            for c in names:
                v = np.asarray(values[(mode, c, task)])
                se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
                table.append([task, mode, c, "id" if c == home else "ood", float(v.mean()), se, int(v.size)])

    tests = []
    for c in names:
        diffs = np.asarray(values[("random", c, "age-regression")]) - np.asarray(values[("idb", c, "age-regression")])
        try:
            p = wilcoxon_signed_rank(diffs)
        except ValueError:
            p = float("nan")
        tests.append(["age-regression", c, "wilcoxon", p])
        ps = []
        for r in range(n_runs):
            (sa, y), (sb, _) = scores[(r, "random", c)], scores[(r, "idb", c)]
            try:
                ps.append(delong_test(sa, sb, y))
            except (DegenerateVarianceError, ValueError):
                continue
        tests.append(["sex-classification", c, "delong_median", float(np.median(ps)) if ps else float("nan")])

    # per run: OOD-minus-ID MAE and mean OOD AUROC for each encoder
    shift = []
    for r in range(n_runs):
        for mode in OOD_ENCODERS:
            id_mae = values[(mode, home, "age-regression")][r]
            ood_mae = np.mean([values[(mode, c, "age-regression")][r] for c in names if c != home])
            ood_auc = np.mean([values[(mode, c, "sex-classification")][r] for c in names if c != home])
            shift.append([r, mode, float(ood_mae - id_mae), float(ood_auc)])
    return {
        "table": _write_csv(out / "ood" / "table.csv", ["task", "encoder", "cohort", "role", "mean", "se", "n"], table),
        "tests": _write_csv(out / "ood" / "tests.csv", ["task", "cohort", "test", "p"], tests),
        "shift": _write_csv(out / "ood" / "shift.csv", ["run", "encoder", "mae_degradation", "ood_auroc"], shift),
    }


@dataclass
class OodOutcome:
    """Per-experiment means used by the directional checks."""

    mae_degradation: dict[str, float]
    ood_auroc: dict[str, float]
    probe: dict[str, float]


def ood_outcome(manifest: RunManifest) -> OodOutcome:
    shift = read_csv(manifest.artifact("heads", "shift"))
    probe = read_csv(manifest.artifact("diagnostics", "probe"))
    deg, auc = {}, {}
    for mode in OOD_ENCODERS:
        sel = [row for row in shift if row["encoder"] == mode]
        deg[mode] = float(np.mean([float(row["mae_degradation"]) for row in sel]))
        auc[mode] = float(np.mean([float(row["ood_auroc"]) for row in sel]))
    return OodOutcome(deg, auc, {row["encoder"]: float(row["probe_auroc"]) for row in probe})


def matrix_id_mae(manifest: RunManifest) -> dict[str, float]:
    """Mean in-distribution age MAE across label cohorts for every encoder."""
    summary = read_csv(manifest.artifact("heads", "summary"))
    out: dict[str, list[float]] = {}
    for row in summary:
        if row["task"] == "age-regression":
            out.setdefault(row["encoder"], []).append(float(row["mean"]))
    return {enc: float(np.mean(v)) for enc, v in out.items()}


# ------------------------------------------------------------------ report


def _md_table(header: list[str], rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines)


def _fmt_p(p: str) -> str:
    v = float(p)
    return "n/a" if np.isnan(v) else f"{v:.3g}"


def report(manifests, out: str | os.PathLike) -> Path:
    """Render Markdown and CSV tables from finished experiment directories.

    Byte-deterministic; wall-clock timings are deliberately left out.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    sections = ["# capelab report", ""]
    bundle: dict[str, bytes] = {}
    for i, m in enumerate(manifests):
        if not isinstance(m, RunManifest):
            m = RunManifest.load(m)
        m.verify()
        tag = f"{i:02d}_{m.kind}"
        sections += [f"## Experiment {i} ({m.kind})", "", f"config digest `{m.config_digest[:16]}`", ""]
        if m.kind == "ood":
            sections += _report_ood(m, tag, bundle)
        else:
            sections += _report_matrix(m, tag, bundle)
        sections += _report_diagnostics(m, tag, bundle)
    bundle["report.md"] = ("\n".join(sections).rstrip() + "\n").encode("utf-8")
    for name, data in sorted(bundle.items()):
        _write_atomic(out / name, data)
    return out / "report.md"


def _report_ood(m: RunManifest, tag: str, bundle: dict) -> list[str]:
    table = read_csv(m.artifact("heads", "table"))
    tests = read_csv(m.artifact("heads", "tests"))
    cohorts = list(dict.fromkeys(r["cohort"] for r in table))
    lines = []
    csv_rows = []
    for task, kind, label in (("age-regression", "mae", "Age MAE (years)"), ("sex-classification", "auc", "Sex AUROC")):
        rows = []
        for mode in OOD_ENCODERS:
            cells = {r["cohort"]: r for r in table if r["task"] == task and r["encoder"] == mode}
            means = [float(cells[c]["mean"]) for c in cohorts]
            ses = [float(cells[c]["se"]) for c in cohorts]
            fmt = [format_mean_se(mu, se, kind) for mu, se in zip(means, ses)]
            rows.append([mode] + fmt + [f"{np.mean(means):.3f}"])
            csv_rows.append([task, mode] + fmt + [f"{np.mean(means):.3f}"])
        p_row = {r["cohort"]: r["p"] for r in tests if r["task"] == task}
        rows.append(["p"] + [_fmt_p(p_row[c]) for c in cohorts] + [""])
        role = {r["cohort"]: r["role"] for r in table}
        header = ["encoder"] + [f"{c} ({role[c]})" for c in cohorts] + ["mean"]
        lines += [f"### {label}", "", _md_table(header, rows), ""]
    bundle[f"{tag}_mean_se.csv"] = _csv_text(["task", "encoder"] + cohorts + ["mean"], csv_rows)
    shift = read_csv(m.artifact("heads", "shift"))
    srows = []
    for mode in OOD_ENCODERS:
        sel = [r for r in shift if r["encoder"] == mode]
        srows.append([mode, f"{np.mean([float(r['mae_degradation']) for r in sel]):.3f}",
                      f"{np.mean([float(r['ood_auroc']) for r in sel]):.3f}"])
    lines += ["### Shift summary", "", _md_table(["encoder", "OOD-minus-ID MAE", "mean OOD AUROC"], srows), ""]
    return lines


def _report_matrix(m: RunManifest, tag: str, bundle: dict) -> list[str]:
    summary = read_csv(m.artifact("heads", "summary"))
    kw = read_csv(m.artifact("heads", "kruskal"))
    encoders = list(dict.fromkeys(r["encoder"] for r in summary))
    cohorts = list(dict.fromkeys(r["cohort"] for r in summary))
    lines = []
    for task, label in (("age-regression", "Age MAE (years)"), ("sex-classification", "Sex AUROC")):
        cells = {(r["encoder"], r["cohort"]): r for r in summary if r["task"] == task}
        rows, csv_rows = [], []
        for enc in encoders:
            fmt = []
            for c in cohorts:
                r = cells[(enc, c)]
                fmt.append(f"{float(r['mean']):.3f} [{float(r['lo']):.3f}, {float(r['hi']):.3f}]")
            rows.append([enc] + fmt)
            csv_rows.append([enc] + [cells[(enc, c)]["mean"] for c in cohorts])
        kwrow = {r["cohort"]: r for r in kw if r["task"] == task}
        rows.append(["Kruskal-Wallis p"] + [_fmt_p(kwrow[c]["p"]) for c in cohorts])
        lines += [f"### {label}: pretraining cohort x label cohort", "",
                  _md_table(["pretrained on"] + cohorts, rows), ""]
        key = "mae" if task == "age-regression" else "auroc"
        bundle[f"{tag}_matrix_{key}.csv"] = _csv_text(["encoder"] + cohorts, csv_rows)
    return lines


def _report_diagnostics(m: RunManifest, tag: str, bundle: dict) -> list[str]:
    probe = read_csv(m.artifact("diagnostics", "probe"))
    lines = ["### Cohort identifiability", "",
             _md_table(["encoder", "probe AUROC"], [[r["encoder"], f"{float(r['probe_auroc']):.3f}"] for r in probe]),
             ""]
    bundle[f"{tag}_probe.csv"] = Path(m.artifact("diagnostics", "probe")).read_bytes()
    for key in sorted(m.stages["diagnostics"]["artifacts"]):
        if key.startswith("pca:"):
            bundle[f"{tag}_pca_{key[4:]}.csv"] = m.artifact("diagnostics", key).read_bytes()
    binned = sorted(k for k in m.stages["heads"]["artifacts"] if k.startswith("binned:"))
    if binned:
        lines += ["### Binned age error", "", "Per-bin MAE tables (normalised by the worst bin):", ""]
        for key in binned:
            _, enc, cohort = key.split(":")
            name = f"{tag}_binned_{enc}__{cohort}.csv"
            bundle[name] = m.artifact("heads", key).read_bytes()
            lines.append(f"- `{name}`")
        lines.append("")
    return lines
