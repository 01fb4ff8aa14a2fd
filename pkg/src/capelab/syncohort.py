"""Synthetic multi-cohort 12-lead ECG generator.

Beats are sums of Gaussian P, Q, R, S and T waves of a 3-D cardiac dipole,
projected onto eight independent leads (I, II, V1-V6) by a fixed mixing
matrix; III, aVR, aVL and aVF follow from I and II. Every physiological
mapping here is synthetic and explicit:

* heart rate falls linearly with age (default -0.3 bpm/year from 80 bpm at 40),
* male R/S amplitudes are scaled by ``1 + sex_amp_offset``,
* R-wave amplitude shrinks with age by ``age_amp_slope`` per year,
* morphology jitter around the cohort baseline scales with ``health_severity``.

A cohort-constant :class:`DeviceArtifact` is applied after physiology.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .datamodel import EcgRecord, Sex, Store, open_store, write_store

LEADS_12 = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
WAVES = ("P", "Q", "R", "S", "T")

# rows: I, II, V1..V6 ; columns: dipole x (left), y (inferior), z (anterior)
LEAD_MATRIX = np.array(
    [
        [1.00, 0.00, 0.00],
        [0.50, 0.87, 0.00],
        [-0.20, 0.10, -0.95],
        [0.00, 0.15, -1.00],
        [0.35, 0.25, -0.75],
        [0.70, 0.30, -0.35],
        [0.90, 0.30, 0.05],
        [0.95, 0.25, 0.25],
    ]
)

# baseline wave shape: offset from R peak (s), width (s), amplitude (mV), dipole direction
BASE_OFFSET = np.array([-0.20, -0.028, 0.0, 0.030, 0.28])
BASE_WIDTH = np.array([0.025, 0.010, 0.012, 0.012, 0.055])
BASE_AMPLITUDE = np.array([0.15, -0.12, 1.10, -0.30, 0.32])
BASE_DIRECTION = np.array(
    [
        [0.55, 0.80, 0.20],
        [0.70, 0.20, -0.60],
        [0.60, 0.70, 0.40],
        [0.10, -0.40, -0.90],
        [0.55, 0.60, 0.55],
    ]
)
BASE_DIRECTION = BASE_DIRECTION / np.linalg.norm(BASE_DIRECTION, axis=1, keepdims=True)


@dataclass(frozen=True)
class DeviceArtifact:
    gain: float = 1.0
    baseline_wander: tuple[float, float] = (0.0, 0.3)  # (amplitude mV, frequency Hz)
    mains_leakage: float = 0.0  # mV
    mains_hz: float = 50.0
    lowpass_knee: float | None = None  # Hz; None disables the stage
    quantization_step: float = 0.0  # mV; 0 disables the stage

    def __post_init__(self):
        object.__setattr__(self, "baseline_wander", tuple(self.baseline_wander))
        if not self.gain > 0:
            raise ValueError("device gain must be positive")
        if self.baseline_wander[0] < 0 or self.mains_leakage < 0 or self.quantization_step < 0:
            raise ValueError("artifact amplitudes must be non-negative")
        if self.lowpass_knee is not None and not self.lowpass_knee > 0:
            raise ValueError("lowpass_knee must be positive")


@dataclass(frozen=True)
class CohortSpec:
    cohort_id: int
    name: str = ""
    n_patients: int = 100
    ecgs_per_patient: tuple[int, int] = (2, 3)
    age_mean: float = 60.0
    age_sd: float = 15.0
    age_clip: tuple[float, float] = (18.0, 100.0)
    female_fraction: float = 0.5
    health_severity: float = 0.3
    device: DeviceArtifact = field(default_factory=DeviceArtifact)
    device_id: int = 0
    sampling_rate: float = 500.0
    duration: float = 10.0
    seed: int = 0
    hr_at_40: float = 80.0
    hr_slope: float = -0.3
    hr_sd: float = 3.0
    sex_amp_offset: float = 0.25
    age_amp_slope: float = -0.004
    record_hr_sd: float = 1.5
    noise_mv: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "ecgs_per_patient", tuple(self.ecgs_per_patient))
        object.__setattr__(self, "age_clip", tuple(self.age_clip))
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        lo, hi = self.age_clip
        if not 18 <= lo < hi <= 100:
            raise ValueError(f"age clip {self.age_clip} must lie within [18, 100]")
        if not 0 <= self.health_severity <= 1:
            raise ValueError("health_severity must lie in [0, 1]")
        if not 0 <= self.female_fraction <= 1:
            raise ValueError("female_fraction must lie in [0, 1]")
        a, b = self.ecgs_per_patient
        if not 1 <= a <= b:
            raise ValueError(f"bad ecgs_per_patient range {self.ecgs_per_patient}")
        if self.sampling_rate <= 0 or self.duration <= 0:
            raise ValueError("sampling_rate and duration must be positive")


@dataclass
class PatientLatent:
    patient_id: int
    age: float
    sex: Sex
    heart_rate: float
    amplitude: np.ndarray  # [5] mV per wave
    width: np.ndarray  # [5] seconds
    offset: np.ndarray  # [5] seconds from the R peak
    direction: np.ndarray  # [5, 3] unit dipole directions
    signature: np.ndarray  # standard-normal draws behind the jitter

    def template_vector(self) -> np.ndarray:
        return np.concatenate([self.amplitude, self.width * 10, self.offset * 10, self.direction.ravel()])


def baseline_template(spec: CohortSpec, age: float, sex: Sex):
    """Cohort baseline (amplitude, width, offset, direction) for a given age and sex."""
    amp = BASE_AMPLITUDE.copy()
    amp[2] *= 1.0 + spec.age_amp_slope * (age - 40.0)
    if sex == Sex.MALE:
        amp[2:4] *= 1.0 + spec.sex_amp_offset
    return amp, BASE_WIDTH.copy(), BASE_OFFSET.copy(), BASE_DIRECTION.copy()


def _rotation(v: np.ndarray) -> np.ndarray:
    """Rotation matrix for the axis-angle vector ``v`` (Rodrigues)."""
    theta = np.linalg.norm(v)
    if theta == 0:
        return np.eye(3)
    k = v / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * K @ K


N_SIGNATURE = 5 + 5 + 5 + 3


def _jittered(amp, width, offset, direction, z: np.ndarray, scale: float):
    amp = amp * np.exp(0.5 * scale * z[0:5])
    width = width * np.exp(0.3 * scale * z[5:10])
    offset = offset + 0.02 * scale * z[10:15] * np.array([1, 0.3, 0, 0.3, 1])
    direction = direction @ _rotation(0.6 * scale * z[15:18]).T
    return amp, width, offset, direction


def sample_patient(spec: CohortSpec, rng: np.random.Generator, patient_id: int = 0) -> PatientLatent:
    lo, hi = spec.age_clip
    while True:
        age = rng.normal(spec.age_mean, spec.age_sd)
        if lo <= age <= hi:
            break
    sex = Sex.FEMALE if rng.random() < spec.female_fraction else Sex.MALE
    hr = spec.hr_at_40 + spec.hr_slope * (age - 40.0) + spec.hr_sd * rng.standard_normal()
    hr = float(np.clip(hr, 40.0, 160.0))
    z = rng.standard_normal(N_SIGNATURE)
    base = baseline_template(spec, age, sex)
    if spec.health_severity == 0:
        amp, width, offset, direction = base
    else:
        amp, width, offset, direction = _jittered(*base, z, spec.health_severity)
    return PatientLatent(patient_id, float(age), sex, hr, amp, width, offset, direction, z)


RECORD_JITTER = 0.08


def record_template(latent: PatientLatent, rng: np.random.Generator):
    """Small visit-to-visit variation of a patient's template."""
    z = rng.standard_normal(N_SIGNATURE)
    return _jittered(latent.amplitude, latent.width, latent.offset, latent.direction, z, RECORD_JITTER)


def physiology(latent: PatientLatent, spec: CohortSpec, rng: np.random.Generator) -> np.ndarray:
    """Noise-free-of-device 8-lead signal ``[8, n]`` in mV."""
    fs = spec.sampling_rate
    n = int(round(spec.duration * fs))
    t = np.arange(n) / fs
    amp, width, offset, direction = record_template(latent, rng)
    hr = float(np.clip(latent.heart_rate + spec.record_hr_sd * rng.standard_normal(), 40.0, 160.0))
    rr = 60.0 / hr
    # QT-like stretching of the T wave with cycle length
    offset = offset.copy()
    offset[4] *= np.sqrt(rr)
    beats = []
    pos = -rng.uniform(0, rr)
    while pos < spec.duration + rr:
        beats.append(pos)
        pos += rr * (1.0 + 0.03 * rng.uniform(-1, 1))
    beats = np.asarray(beats)
    dipole = np.zeros((3, n))
    for w in range(len(WAVES)):
        centers = beats + offset[w]
        keep = (centers > -5 * width[w]) & (centers < spec.duration + 5 * width[w])
        dt = t[None, :] - centers[keep, None]
        wave = np.exp(-0.5 * (dt / width[w]) ** 2).sum(axis=0)
        dipole += np.outer(amp[w] * direction[w], wave)
    x = LEAD_MATRIX @ dipole
    return x + spec.noise_mv * rng.standard_normal(x.shape)


def apply_device(x: np.ndarray, device: DeviceArtifact, fs: float, rng: np.random.Generator,
                 stop_after: str | None = None) -> np.ndarray:
    """gain -> baseline wander -> mains -> single-pole lowpass -> quantisation.

    Phases of the wander and mains sinusoids are drawn per record.
    ``stop_after`` returns the intermediate signal after the named stage.
    """
    n = x.shape[-1]
    t = np.arange(n) / fs
    phases = rng.uniform(0, 2 * np.pi, size=2)
    y = device.gain * x
    if stop_after == "gain":
        return y
    amp, f = device.baseline_wander
    y = y + amp * np.sin(2 * np.pi * f * t + phases[0])
    y = y + device.mains_leakage * np.sin(2 * np.pi * device.mains_hz * t + phases[1])
    if device.lowpass_knee is not None:
        alpha = 1.0 - np.exp(-2 * np.pi * device.lowpass_knee / fs)
        b, a = [alpha], [1.0, alpha - 1.0]
        zi = sps.lfilter_zi(b, a)
        y, _ = sps.lfilter(b, a, y, axis=-1, zi=zi[None, :] * y[:, :1])
    if device.quantization_step > 0:
        y = np.round(y / device.quantization_step) * device.quantization_step
    return y


def to_twelve_leads(x8: np.ndarray) -> np.ndarray:
    I, II = x8[0], x8[1]
    III = II - I
    avr = -(I + II) / 2
    avl = I - II / 2
    avf = II - I / 2
    return np.vstack([I, II, III, avr, avl, avf, x8[2:]])


def synth_ecg(latent: PatientLatent, spec: CohortSpec, rng: np.random.Generator, record_id: int = 0) -> EcgRecord:
    x8 = physiology(latent, spec, rng)
    x8 = apply_device(x8, spec.device, spec.sampling_rate, rng)
    return EcgRecord(
        record_id=record_id,
        patient_id=latent.patient_id,
        cohort_id=spec.cohort_id,
        device_id=spec.device_id,
        age=latent.age,
        sex=latent.sex,
        sampling_rate=spec.sampling_rate,
        leads=list(LEADS_12),
        samples=to_twelve_leads(x8),
    )


PATIENT_STRIDE = 1_000_000
RECORDS_PER_PATIENT_MAX = 64


def patient_rng(spec: CohortSpec, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, spec.cohort_id, index]))


def cohort_records(spec: CohortSpec):
    """Yield every record of the cohort; per-patient rng streams keep this order-independent."""
    lo, hi = spec.ecgs_per_patient
    if hi > RECORDS_PER_PATIENT_MAX:
        raise ValueError(f"at most {RECORDS_PER_PATIENT_MAX} ECGs per patient")
    for i in range(spec.n_patients):
        rng = patient_rng(spec, i)
        pid = spec.cohort_id * PATIENT_STRIDE + i
        latent = sample_patient(spec, rng, patient_id=pid)
        for k in range(int(rng.integers(lo, hi + 1))):
            yield synth_ecg(latent, spec, rng, record_id=pid * RECORDS_PER_PATIENT_MAX + k)


def generate_cohort(spec: CohortSpec, path: str | os.PathLike) -> Store:
    write_store(cohort_records(spec), path)
    return open_store(path)


def paperlike3(n_patients: int = 300, seed: int = 0) -> list[CohortSpec]:
    """Three cohorts echoing a hospital cohort and two population cohorts.

    They differ in device (gain, mains 60 vs 50 Hz, lowpass knee, wander,
    quantisation, sampling rate), age spread and health severity. Mean age is
    shared, so a head moved between cohorts meets no label shift and any OOD
    age bias comes from what the embedding carries about the device. The
    in-band respiratory wander (0.6 to 0.9 Hz survives the 0.5 Hz highpass)
    is the strongest device signature.
    """
    common = dict(n_patients=n_patients, ecgs_per_patient=(2, 4), duration=10.0)
    return [
        CohortSpec(
            cohort_id=0, name="hospital", age_mean=58.0, age_sd=15.0, female_fraction=0.45,
            health_severity=0.6, sampling_rate=500.0, device_id=0, seed=seed * 1000 + 1,
            device=DeviceArtifact(gain=1.0, baseline_wander=(0.5, 0.6), mains_leakage=0.02, mains_hz=60.0,
                                  lowpass_knee=150.0, quantization_step=0.005),
            **common,
        ),
        CohortSpec(
            cohort_id=1, name="population-a", age_mean=58.0, age_sd=17.0, female_fraction=0.6,
            health_severity=0.3, sampling_rate=400.0, device_id=1, seed=seed * 1000 + 2,
            device=DeviceArtifact(gain=1.08, baseline_wander=(0.5, 0.75), mains_leakage=0.05, mains_hz=60.0,
                                  lowpass_knee=40.0, quantization_step=0.01),
            **common,
        ),
        CohortSpec(
            cohort_id=2, name="population-b", age_mean=58.0, age_sd=11.0, female_fraction=0.5,
            health_severity=0.25, sampling_rate=500.0, device_id=2, seed=seed * 1000 + 3,
            device=DeviceArtifact(gain=0.94, baseline_wander=(0.5, 0.9), mains_leakage=0.03, mains_hz=50.0,
                                  lowpass_knee=90.0, quantization_step=0.0025),
            **common,
        ),
    ]


BUNDLES = {"paperlike3": paperlike3}
