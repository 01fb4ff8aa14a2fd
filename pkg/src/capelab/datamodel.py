"""ECG records, patient indexing, dataset splits and the ECGC container.

ECGC v1 layout (little-endian)::

    magic "ECGC" | version u32 | record_count u64 | offsets u64[record_count]
    record := record_id u64 | patient_id u64 | cohort_id u16 | device_id u16
              | age f32 (NaN = missing) | sex u8 | sampling_rate f32
              | n_leads u8 | n_leads x (len u8 | ascii name)
              | n_samples u32 | samples f32[n_leads * n_samples] (lead-major)
"""

from __future__ import annotations

import enum
import math
import mmap
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

MAGIC = b"ECGC"
VERSION = 1

_HEADER = struct.Struct("<4sIQ")
_RECORD_HEAD = struct.Struct("<QQHHfBfB")
_U32 = struct.Struct("<I")


class StoreError(ValueError):
    """Base class for ECGC container problems."""


class BadMagicError(StoreError):
    pass


class TruncatedStoreError(StoreError):
    pass


class VersionMismatchError(StoreError):
    pass


class RecordInvariantError(ValueError):
    pass


class InconsistentCohortError(ValueError):
    pass


class Sex(enum.IntEnum):
    FEMALE = 0
    MALE = 1
    UNKNOWN = 255


@dataclass
class EcgRecord:
    record_id: int
    patient_id: int
    cohort_id: int
    device_id: int
    age: float | None
    sex: Sex
    sampling_rate: float
    leads: list[str]
    samples: np.ndarray  # [n_leads, n_samples], millivolts, float32

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.sex = Sex(self.sex)
        self.leads = list(self.leads)
        if self.age is not None and math.isnan(self.age):
            self.age = None

    @property
    def n_samples(self) -> int:
        return self.samples.shape[-1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sampling_rate

    def validate(self) -> None:
        """Raise :class:`RecordInvariantError` if the record is malformed."""
        rid = self.record_id
        if self.samples.ndim != 2:
            raise RecordInvariantError(f"record {rid}: samples must be 2-D, got {self.samples.shape}")
        if not self.leads:
            raise RecordInvariantError(f"record {rid}: empty lead list")
        if len(set(self.leads)) != len(self.leads):
            raise RecordInvariantError(f"record {rid}: duplicate lead names {self.leads}")
        if self.samples.shape[0] != len(self.leads):
            raise RecordInvariantError(
                f"record {rid}: {len(self.leads)} leads but samples has {self.samples.shape[0]} rows"
            )
        if self.samples.shape[1] < 1:
            raise RecordInvariantError(f"record {rid}: no samples")
        if not self.sampling_rate > 0:
            raise RecordInvariantError(f"record {rid}: sampling_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise RecordInvariantError(f"record {rid}: non-finite sample values")
        for name in self.leads:
            if len(name) > 255 or not name.isascii():
                raise RecordInvariantError(f"record {rid}: lead name {name!r} is not short ASCII")

    def lead(self, name: str) -> np.ndarray:
        return self.samples[self.leads.index(name)]


def _encode_record(rec: EcgRecord) -> bytes:
    age = float("nan") if rec.age is None else float(rec.age)
    parts = [
        _RECORD_HEAD.pack(
            rec.record_id, rec.patient_id, rec.cohort_id, rec.device_id,
            age, int(rec.sex), rec.sampling_rate, len(rec.leads),
        )
    ]
    for name in rec.leads:
        raw = name.encode("ascii")
        parts.append(bytes([len(raw)]) + raw)
    parts.append(_U32.pack(rec.n_samples))
    parts.append(np.ascontiguousarray(rec.samples, dtype="<f4").tobytes())
    return b"".join(parts)


def write_store(records: Iterable[EcgRecord], path: str | os.PathLike) -> None:
    """Write records to an ECGC container, in the given order.

    Every record is validated before anything touches the disk.
    """
    records = list(records)
    for rec in records:
        rec.validate()
    seen = set()
    for rec in records:
        if rec.record_id in seen:
            raise RecordInvariantError(f"duplicate record_id {rec.record_id}")
        seen.add(rec.record_id)

    blobs = [_encode_record(r) for r in records]
    offsets = []
    pos = _HEADER.size + 8 * len(blobs)
    for b in blobs:
        offsets.append(pos)
        pos += len(b)

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(blobs)))
        fh.write(np.asarray(offsets, dtype="<u8").tobytes())
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


class Store:
    """Read-only view over an ECGC container.

    Header fields of every record are parsed eagerly into numpy arrays
    (``record_ids``, ``patient_ids``, ``cohort_ids``, ``device_ids``, ``ages``,
    ``sexes``); waveforms are decoded on access.
    """

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            size = os.fstat(fh.fileno()).st_size
            if size < _HEADER.size:
                self._buf = fh.read()
            else:
                self._buf = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
        buf = self._buf
        if len(buf) < 4 or bytes(buf[:4]) != MAGIC:
            raise BadMagicError(f"{self.path}: bad magic {bytes(buf[:4])!r}")
        if len(buf) < _HEADER.size:
            raise TruncatedStoreError(f"{self.path}: truncated header")
        _, version, count = _HEADER.unpack_from(buf, 0)
        if version != VERSION:
            raise VersionMismatchError(f"{self.path}: version {version}, expected {VERSION}")
        index_end = _HEADER.size + 8 * count
        if len(buf) < index_end:
            raise TruncatedStoreError(f"{self.path}: truncated index ({count} records declared)")
        self._offsets = np.frombuffer(buf, dtype="<u8", count=count, offset=_HEADER.size).astype(np.int64)

        n = int(count)
        self.record_ids = np.empty(n, dtype=np.int64)
        self.patient_ids = np.empty(n, dtype=np.int64)
        self.cohort_ids = np.empty(n, dtype=np.int64)
        self.device_ids = np.empty(n, dtype=np.int64)
        self.ages = np.empty(n, dtype=np.float64)
        self.sexes = np.empty(n, dtype=np.int64)
        self._layout: list[tuple[float, list[str], int, int]] = []
        for i, off in enumerate(self._offsets):
            off = int(off)
            if off < index_end or off + _RECORD_HEAD.size > len(buf):
                raise TruncatedStoreError(f"{self.path}: record {i} offset {off} out of range")
            rid, pid, cid, did, age, sex, fs, n_leads = _RECORD_HEAD.unpack_from(buf, off)
            pos = off + _RECORD_HEAD.size
            leads = []
            for _ in range(n_leads):
                if pos >= len(buf):
                    raise TruncatedStoreError(f"{self.path}: record {i} lead table truncated")
                ln = buf[pos]
                leads.append(bytes(buf[pos + 1 : pos + 1 + ln]).decode("ascii"))
                pos += 1 + ln
            if pos + 4 > len(buf):
                raise TruncatedStoreError(f"{self.path}: record {i} truncated")
            (n_samples,) = _U32.unpack_from(buf, pos)
            pos += 4
            if pos + 4 * n_leads * n_samples > len(buf):
                raise TruncatedStoreError(f"{self.path}: record {i} samples truncated")
            self.record_ids[i] = rid
            self.patient_ids[i] = pid
            self.cohort_ids[i] = cid
            self.device_ids[i] = did
            self.ages[i] = age
            self.sexes[i] = sex
            self._layout.append((fs, leads, n_samples, pos))
        self._pos = {int(r): i for i, r in enumerate(self.record_ids)}

    def __len__(self) -> int:
        return len(self._layout)

    def __iter__(self) -> Iterator[EcgRecord]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> EcgRecord:
        fs, leads, n_samples, pos = self._layout[i]
        samples = np.frombuffer(self._buf, dtype="<f4", count=len(leads) * n_samples, offset=pos)
        age = float(self.ages[i])
        return EcgRecord(
            record_id=int(self.record_ids[i]),
            patient_id=int(self.patient_ids[i]),
            cohort_id=int(self.cohort_ids[i]),
            device_id=int(self.device_ids[i]),
            age=None if math.isnan(age) else age,
            sex=Sex(int(self.sexes[i])),
            sampling_rate=fs,
            leads=list(leads),
            samples=samples.reshape(len(leads), n_samples).astype(np.float32),
        )

    def get(self, record_id: int) -> EcgRecord:
        return self[self._pos[int(record_id)]]

    def position(self, record_id: int) -> int:
        return self._pos[int(record_id)]


def open_store(path: str | os.PathLike) -> Store:
    return Store(path)


@dataclass
class PatientIndex:
    records: dict[int, list[int]] = field(default_factory=dict)
    cohort: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def patient_ids(self) -> list[int]:
        return sorted(self.records)

    def n_records(self) -> int:
        return sum(len(v) for v in self.records.values())

    def merge(self, other: "PatientIndex") -> "PatientIndex":
        """Union of two indices over disjoint patient sets."""
        clash = set(self.records) & set(other.records)
        if clash:
            raise ValueError(f"patient ids present in both indices: {sorted(clash)[:5]}")
        return PatientIndex({**self.records, **other.records}, {**self.cohort, **other.cohort})

    def restrict(self, record_ids: Iterable[int], multi_ecg_only: bool = True) -> "PatientIndex":
        """Drop records not in ``record_ids`` (and patients left with too few)."""
        keep = set(int(r) for r in record_ids)
        out = PatientIndex()
        min_n = 2 if multi_ecg_only else 1
        for pid, recs in self.records.items():
            kept = [r for r in recs if r in keep]
            if len(kept) >= min_n:
                out.records[pid] = kept
                out.cohort[pid] = self.cohort[pid]
        return out


def build_patient_index(store: Store, multi_ecg_only: bool = True) -> PatientIndex:
    records: dict[int, list[int]] = {}
    cohort: dict[int, int] = {}
    for rid, pid, cid in zip(store.record_ids, store.patient_ids, store.cohort_ids):
        pid, cid = int(pid), int(cid)
        if pid in cohort and cohort[pid] != cid:
            raise InconsistentCohortError(
                f"patient {pid} has records in cohorts {cohort[pid]} and {cid}"
            )
        cohort[pid] = cid
        records.setdefault(pid, []).append(int(rid))
    min_n = 2 if multi_ecg_only else 1
    index = PatientIndex()
    for pid in sorted(records):
        if len(records[pid]) >= min_n:
            index.records[pid] = sorted(records[pid])
            index.cohort[pid] = cohort[pid]
    return index


@dataclass(frozen=True)
class SplitSpec:
    """Train/val/test split request.

    ``mode="counts"`` takes absolute sizes, ``mode="fractions"`` takes
    fractions of the eligible pool (rounded down). With ``unit="patient"``
    sizes count patients and every patient lands in exactly one split.
    """

    train: float
    val: float
    test: float
    mode: str = "counts"
    unit: str = "record"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("counts", "fractions"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if self.unit not in ("record", "patient"):
            raise ValueError(f"unknown split unit {self.unit!r}")
        sizes = (self.train, self.val, self.test)
        if any(s <= 0 for s in sizes):
            raise ValueError(f"split sizes must be positive, got {sizes}")
        if self.mode == "fractions" and sum(sizes) > 1.0 + 1e-12:
            raise ValueError(f"fractions sum to {sum(sizes)} > 1")
        if self.mode == "counts" and any(float(s) != int(s) for s in sizes):
            raise ValueError(f"counts must be integers, got {sizes}")

    def sizes_for(self, total: int) -> tuple[int, int, int]:
        if self.mode == "counts":
            sizes = (int(self.train), int(self.val), int(self.test))
        else:
            # tiny epsilon so e.g. 0.1 * 100 is 10, not 9
            sizes = tuple(int(math.floor(f * total + 1e-9)) for f in (self.train, self.val, self.test))
        if sum(sizes) > total:
            raise ValueError(f"infeasible split {sizes}: only {total} units available")
        if min(sizes) < 1:
            raise ValueError(f"split {sizes} leaves an empty part for {total} units")
        return sizes


def make_splits(
    store: Store, spec: SplitSpec, record_ids: Sequence[int] | None = None
) -> tuple[set[int], set[int], set[int]]:
    """Disjoint (train, val, test) record-id sets, deterministic in ``spec.seed``.

    ``record_ids`` restricts the eligible pool (e.g. records with a label).
    """
    if len(store) == 0:
        raise ValueError("cannot split an empty store")
    pool = np.sort(np.asarray(store.record_ids if record_ids is None else list(record_ids), dtype=np.int64))
    if pool.size == 0:
        raise ValueError("no eligible records to split")
    rng = np.random.default_rng(spec.seed)

    if spec.unit == "record":
        n_tr, n_va, n_te = spec.sizes_for(pool.size)
        perm = pool[rng.permutation(pool.size)]
        parts = perm[:n_tr], perm[n_tr : n_tr + n_va], perm[n_tr + n_va : n_tr + n_va + n_te]
        return tuple(set(int(x) for x in p) for p in parts)

    pid_of = {int(r): int(store.patient_ids[store.position(r)]) for r in pool}
    by_patient: dict[int, list[int]] = {}
    for r in pool:
        by_patient.setdefault(pid_of[int(r)], []).append(int(r))
    patients = np.array(sorted(by_patient), dtype=np.int64)
    n_tr, n_va, n_te = spec.sizes_for(patients.size)
    perm = patients[rng.permutation(patients.size)]
    chunks = perm[:n_tr], perm[n_tr : n_tr + n_va], perm[n_tr + n_va : n_tr + n_va + n_te]
    return tuple(set(r for p in chunk for r in by_patient[int(p)]) for chunk in chunks)
