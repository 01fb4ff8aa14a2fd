"""Preprocessing filters, resampling and the temporal augmentations used for contrastive views."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy import signal as sps
from sklearn.base import BaseEstimator, TransformerMixin

from .datamodel import EcgRecord

DEFAULT_LEADS = ("I", "II", "V1", "V2", "V3", "V4", "V5", "V6")

BUTTER_ORDER = 4
NOTCH_Q = 30.0
KAISER_BETA = 8.6
TAPS_PER_PHASE = 32
PAD_SECONDS = 2.0


class SignalError(ValueError):
    pass


class MissingLeadError(SignalError):
    pass


class RecordTooShortError(SignalError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    band_lo: float = 0.5
    band_hi: float = 100.0
    mains: float = 50.0
    target_rate: float = 400.0
    window_len: int = 2800
    lead_subset: tuple[str, ...] = DEFAULT_LEADS

    def __post_init__(self):
        object.__setattr__(self, "lead_subset", tuple(self.lead_subset))
        if not 0 < self.band_lo < self.band_hi < self.target_rate / 2:
            raise ValueError(
                f"need 0 < band_lo < band_hi < target_rate/2, got {self.band_lo}, {self.band_hi}, {self.target_rate}"
            )
        if not self.band_lo < self.mains < self.band_hi:
            raise ValueError(f"mains {self.mains} Hz outside the passband")
        if self.window_len <= 0:
            raise ValueError("window_len must be positive")
        if not self.lead_subset:
            raise ValueError("lead_subset is empty")


@dataclass
class EcgTensor:
    values: np.ndarray  # [window_len, n_leads], millivolts
    record_id: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass(frozen=True)
class AugmentConfig:
    crop_len: int = 2800
    mask_frac_max: float = 0.2
    mask_mode: str = "contiguous-per-lead"
    # pretraining views are cropped from a longer preprocessed window
    source_len: int = 3200

    def __post_init__(self):
        if not 0 <= self.mask_frac_max < 1:
            raise ValueError(f"mask_frac_max must lie in [0, 1), got {self.mask_frac_max}")
        if self.mask_mode != "contiguous-per-lead":
            raise ValueError(f"unsupported mask_mode {self.mask_mode!r}")
        if self.crop_len <= 0 or self.source_len < self.crop_len:
            raise ValueError("need 0 < crop_len <= source_len")


@lru_cache(maxsize=32)
def _bandpass_sos(lo: float, hi: float, fs: float) -> np.ndarray:
    return sps.butter(BUTTER_ORDER, [lo, hi], btype="bandpass", fs=fs, output="sos")


@lru_cache(maxsize=32)
def _notch_ba(f0: float, fs: float) -> tuple[np.ndarray, np.ndarray]:
    return sps.iirnotch(f0, NOTCH_Q, fs=fs)


def prefilter_response(freqs, fs: float, cfg: PreprocessConfig, mains: float | None = None) -> np.ndarray:
    """Magnitude response of the forward-backward filter chain at ``freqs`` (Hz)."""
    freqs = np.atleast_1d(np.asarray(freqs, dtype=np.float64))
    _, h_bp = sps.sosfreqz(_bandpass_sos(cfg.band_lo, cfg.band_hi, fs), worN=freqs, fs=fs)
    b, a = _notch_ba(cfg.mains if mains is None else mains, fs)
    _, h_n = sps.freqz(b, a, worN=freqs, fs=fs)
    # forward-backward squares the magnitude
    return np.abs(h_bp) ** 2 * np.abs(h_n) ** 2


def prefilter(x, fs: float, cfg: PreprocessConfig | None = None, mains: float | None = None) -> np.ndarray:
    """Zero-phase bandpass + mains notch along the last axis.

    ``mains`` overrides ``cfg.mains`` for sources recorded on a different grid.
    """
    cfg = cfg or PreprocessConfig()
    x = np.asarray(x, dtype=np.float64)
    if fs <= 2 * cfg.band_hi:
        raise SignalError(f"sampling rate {fs} Hz too low for a {cfg.band_hi} Hz band edge")
    if not np.all(np.isfinite(x)):
        raise SignalError("non-finite input to prefilter")
    f0 = cfg.mains if mains is None else mains
    if not cfg.band_lo < f0 < min(cfg.band_hi, fs / 2):
        raise SignalError(f"notch frequency {f0} Hz outside the passband")
    # long odd-extension padding keeps the narrow notch's edge transient short
    padlen = min(x.shape[-1] - 1, int(PAD_SECONDS * fs))
    y = sps.sosfiltfilt(_bandpass_sos(cfg.band_lo, cfg.band_hi, fs), x, axis=-1, padlen=padlen)
    b, a = _notch_ba(f0, fs)
    return sps.filtfilt(b, a, y, axis=-1, padlen=padlen)


def _rational(fs_in: float, fs_out: float) -> tuple[int, int]:
    fr = Fraction(fs_out / fs_in).limit_denominator(1000)
    return fr.numerator, fr.denominator


@lru_cache(maxsize=32)
def _polyphase_taps(up: int, down: int) -> np.ndarray:
    h = sps.firwin(TAPS_PER_PHASE * up, 1.0 / max(up, down), window=("kaiser", KAISER_BETA))
    # unit DC gain in every phase; resample_poly multiplies the taps by `up`
    for p in range(up):
        h[p::up] /= h[p::up].sum() * up
    return h


def resample(x, fs_in: float, fs_out: float) -> np.ndarray:
    """Polyphase Kaiser-sinc resampling along the last axis.

    Output length is ``floor(n * fs_out / fs_in)``.
    """
    if fs_in <= 0 or fs_out <= 0:
        raise SignalError(f"sampling rates must be positive, got {fs_in} -> {fs_out}")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    n_out = int(np.floor(n * fs_out / fs_in + 1e-9))
    if fs_in == fs_out:
        return x.copy()
    up, down = _rational(fs_in, fs_out)
    y = sps.resample_poly(x, up, down, axis=-1, window=_polyphase_taps(up, down), padtype="line")
    if y.shape[-1] < n_out:
        raise SignalError("resampler produced too few samples")  # pragma: no cover
    return y[..., :n_out]


def center_crop(x: np.ndarray, length: int) -> np.ndarray:
    """Crop ``[T, L]`` to the central ``length`` samples."""
    start = (x.shape[0] - length) // 2
    return x[start : start + length]


def preprocess_record(
    record: EcgRecord, cfg: PreprocessConfig | None = None, mains: float | None = None
) -> EcgTensor:
    """Lead selection, prefilter, resample and center-crop to ``cfg.window_len``."""
    cfg = cfg or PreprocessConfig()
    missing = [name for name in cfg.lead_subset if name not in record.leads]
    if missing:
        raise MissingLeadError(f"record {record.record_id} lacks leads {missing}")
    n_out = int(np.floor(record.n_samples * cfg.target_rate / record.sampling_rate + 1e-9))
    if n_out < cfg.window_len:
        raise RecordTooShortError(
            f"record {record.record_id}: {n_out} samples at {cfg.target_rate} Hz < window {cfg.window_len}"
        )
    x = np.stack([record.lead(name) for name in cfg.lead_subset])
    x = prefilter(x, record.sampling_rate, cfg, mains=mains)
    x = resample(x, record.sampling_rate, cfg.target_rate)
    values = center_crop(x.T, cfg.window_len).astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise SignalError(f"record {record.record_id}: non-finite preprocessing output")
    return EcgTensor(np.ascontiguousarray(values), record.record_id)


def random_crop(x: np.ndarray, crop_len: int, rng: np.random.Generator) -> np.ndarray:
    T = x.shape[0]
    if T < crop_len:
        raise SignalError(f"cannot crop {crop_len} samples from {T}")
    start = int(rng.integers(0, T - crop_len + 1))
    return x[start : start + crop_len]


def zero_mask(x: np.ndarray, frac: float, rng: np.random.Generator, mask_frac_max: float = 0.2) -> np.ndarray:
    """Zero one contiguous run of ``round(frac * T)`` samples in every lead.

    Run positions are drawn independently per lead.
    """
    if not 0 <= frac <= mask_frac_max:
        raise SignalError(f"mask fraction {frac} outside [0, {mask_frac_max}]")
    T, L = x.shape
    m = int(round(frac * T))
    out = np.array(x, copy=True)
    if m == 0:
        return out
    starts = rng.integers(0, T - m + 1, size=L)
    for lead, s in enumerate(starts):
        out[s : s + m, lead] = 0
    return out


def augment_view(x: np.ndarray, aug: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    view = random_crop(x, aug.crop_len, rng)
    frac = rng.uniform(0.0, aug.mask_frac_max) if aug.mask_frac_max > 0 else 0.0
    return zero_mask(view, frac, rng, aug.mask_frac_max)


def make_view_pair(a, b, aug: AugmentConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Augmented views of two ECGs of one patient (crop, then mask)."""
    a = a.values if isinstance(a, EcgTensor) else np.asarray(a)
    b = b.values if isinstance(b, EcgTensor) else np.asarray(b)
    return augment_view(a, aug, rng), augment_view(b, aug, rng)


class EcgPreprocessor(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping records to ``[n, window_len, n_leads]`` arrays.

    ``mains_by_cohort`` picks the notch frequency from each record's cohort,
    falling back to ``mains``.
    """

    def __init__(
        self,
        band_lo=0.5,
        band_hi=100.0,
        mains=50.0,
        target_rate=400.0,
        window_len=2800,
        lead_subset=DEFAULT_LEADS,
        mains_by_cohort=None,
    ):
        self.band_lo = band_lo
        self.band_hi = band_hi
        self.mains = mains
        self.target_rate = target_rate
        self.window_len = window_len
        self.lead_subset = lead_subset
        self.mains_by_cohort = mains_by_cohort

    def _config(self) -> PreprocessConfig:
        return PreprocessConfig(
            self.band_lo, self.band_hi, self.mains, self.target_rate, self.window_len, tuple(self.lead_subset)
        )

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        return self

    def transform(self, X) -> np.ndarray:
        cfg = getattr(self, "config_", None) or self._config()
        mains = self.mains_by_cohort or {}
        out = [preprocess_record(r, cfg, mains=mains.get(r.cohort_id)).values for r in X]
        if not out:
            return np.zeros((0, cfg.window_len, len(cfg.lead_subset)), dtype=np.float32)
        return np.stack(out)
