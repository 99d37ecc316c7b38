"""Band-power (Welch PSD) and differential-entropy features from raw EEG windows."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import welch

from .errors import ConfigError, DataError

VARIANCE_FLOOR = 1e-12
WELCH_SEGMENT = 256


@dataclass(frozen=True)
class BandSpec:
    label: str
    lo: float
    hi: float

    def check(self, fs: float) -> None:
        if not (0 < self.lo < self.hi):
            raise ConfigError(f"band {self.label!r}: need 0 < lo < hi, got {self.lo}, {self.hi}")
        if self.hi > fs / 2:
            raise ConfigError(f"band {self.label!r} upper edge {self.hi} Hz exceeds Nyquist {fs / 2} Hz")


DEFAULT_BANDS = (
    BandSpec("delta", 1.0, 4.0),
    BandSpec("theta", 4.0, 8.0),
    BandSpec("alpha", 8.0, 14.0),
    BandSpec("beta", 14.0, 31.0),
    BandSpec("gamma", 31.0, 50.0),
)


@dataclass(frozen=True)
class RawWindow:
    subject_id: str
    trial_id: str
    t0: float
    fs: float
    samples: np.ndarray  # n_channels x n_samples, microvolts
    window_index: int = 0

    def __post_init__(self):
        if self.fs <= 0:
            raise DataError("sampling rate must be positive")
        if self.samples.ndim != 2 or self.samples.shape[1] < 2:
            raise DataError("window samples must be n_channels x n_samples with n_samples >= 2")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("window contains non-finite samples")


@dataclass(frozen=True)
class FeatureArray:
    subject_id: str
    trial_id: str
    window_index: int
    kind: str  # "PSD" or "DE"
    values: np.ndarray  # n_channels x n_bands


def load_bands(path) -> tuple[BandSpec, ...]:
    """Read a band file: one ``label lo_hz hi_hz`` per line, ``#`` comments."""
    bands = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ConfigError(f"{path}:{lineno}: expected 'label lo_hz hi_hz'")
        try:
            lo, hi = float(parts[1]), float(parts[2])
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: band edges must be numbers") from None
        band = BandSpec(parts[0], lo, hi)
        if not (0 < lo < hi):
            raise ConfigError(f"{path}:{lineno}: need 0 < lo < hi")
        bands.append(band)
    if not bands:
        raise ConfigError(f"{path}: no bands defined")
    if len({b.label for b in bands}) != len(bands):
        raise ConfigError(f"{path}: duplicate band label")
    return tuple(bands)


def sliding_windows(samples: np.ndarray, fs: float, win_len: float = 1.0, hop: float = 1.0,
                    subject_id: str = "", trial_id: str = "") -> list[RawWindow]:
    """Cut a trial into windows starting every ``hop`` seconds; the short tail is dropped."""
    samples = np.asarray(samples, dtype=np.float64)
    n_win = int(round(win_len * fs))
    if n_win < 2:
        raise ConfigError("window must span at least 2 samples")
    if hop <= 0:
        raise ConfigError("hop must be positive")
    out = []
    k = 0
    while True:
        start = int(round(k * hop * fs))
        if start + n_win > samples.shape[1]:
            break
        out.append(RawWindow(subject_id, trial_id, k * hop, fs, samples[:, start:start + n_win], k))
        k += 1
    return out


def bandpass(w: RawWindow, lo: float, hi: float) -> RawWindow:
    """Zero every FFT bin outside ``[lo, hi)`` and transform back."""
    BandSpec("bandpass", lo, hi).check(w.fs)
    n = w.samples.shape[1]
    spec = np.fft.rfft(w.samples, axis=1)
    freqs = np.fft.rfftfreq(n, d=1.0 / w.fs)
    spec[:, (freqs < lo) | (freqs >= hi)] = 0.0
    filtered = np.fft.irfft(spec, n=n, axis=1)
    return RawWindow(w.subject_id, w.trial_id, w.t0, w.fs, filtered, w.window_index)


def band_power_psd(w: RawWindow, bands: Sequence[BandSpec] = DEFAULT_BANDS) -> FeatureArray:
    """Welch band powers (Hann, 256-sample segments, 50% overlap).

    A band's value is the power of the bins whose centre lies in
    ``[lo, hi)``, i.e. the density times the bin width, so a sinusoid of
    amplitude A contributes about A^2 / 2 to its band.
    """
    for b in bands:
        b.check(w.fs)
    n = w.samples.shape[1]
    nperseg = min(WELCH_SEGMENT, n)
    freqs, dens = welch(w.samples, fs=w.fs, window="hann", nperseg=nperseg,
                        noverlap=nperseg // 2, scaling="density", axis=1)
    df = freqs[1] - freqs[0]
    values = np.empty((w.samples.shape[0], len(bands)))
    for j, b in enumerate(bands):
        sel = (freqs >= b.lo) & (freqs < b.hi)
        values[:, j] = dens[:, sel].sum(axis=1) * df
    return FeatureArray(w.subject_id, w.trial_id, w.window_index, "PSD", np.maximum(values, 0.0))


def differential_entropy(w: RawWindow, bands: Sequence[BandSpec] = DEFAULT_BANDS) -> FeatureArray:
    """Gaussian differential entropy 0.5 * ln(2 pi e var) of each band-filtered channel."""
    for b in bands:
        b.check(w.fs)
    values = np.empty((w.samples.shape[0], len(bands)))
    for j, b in enumerate(bands):
        var = bandpass(w, b.lo, b.hi).samples.var(axis=1, ddof=1)
        values[:, j] = 0.5 * np.log(2 * np.pi * np.e * np.maximum(var, VARIANCE_FLOOR))
    return FeatureArray(w.subject_id, w.trial_id, w.window_index, "DE", values)


def extract(w: RawWindow, method: str, bands: Sequence[BandSpec] = DEFAULT_BANDS) -> FeatureArray:
    if method == "psd":
        return band_power_psd(w, bands)
    if method == "de":
        return differential_entropy(w, bands)
    raise ConfigError(f"unknown feature method {method!r} (psd or de)")
