"""Per-window EEG descriptors: band powers, ZCR, Hjorth triple, RMS, entropy.

The 11-field order of :class:`FeatureVector` is the wire schema used by the
fog packets and every CSV/model artifact downstream; do not reorder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import List, Sequence, Tuple

import numpy as np

from .errors import DegenerateInputError, InvalidBandError, InvalidInputError
from .signal_chain import EegSignal

#: canonical bands (name, low_hz, high_hz); bins counted over [low, high)
BANDS: Tuple[Tuple[str, float, float], ...] = (
    ("delta", 0.5, 4.0),
    ("theta", 4.0, 8.0),
    ("alpha", 8.0, 13.0),
    ("beta", 13.0, 30.0),
    ("gamma", 31.0, 100.0),
)


@dataclass
class WindowSpec:
    length_s: float = 2.0
    overlap_fraction: float = 0.5

    def __post_init__(self):
        if not (2.0 <= self.length_s <= 5.0):
            raise InvalidInputError(
                f"window length_s must be in [2, 5], got {self.length_s}")
        if not (0.0 <= self.overlap_fraction < 1.0):
            raise InvalidInputError(
                f"overlap_fraction must be in [0, 1), got {self.overlap_fraction}")


@dataclass
class Window:
    """One analysis window cut from a signal."""

    samples: np.ndarray
    sample_rate_hz: float
    index: int = 0
    start_s: float = 0.0

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass
class FeatureVector:
    """The 11 canonical per-window features, in wire order."""

    delta_pw: float
    theta_pw: float
    alpha_pw: float
    beta_pw: float
    gamma_pw: float
    zcr: float
    hjorth_activity: float
    hjorth_mobility: float
    hjorth_complexity: float
    rms: float
    spectral_entropy: float

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise InvalidInputError("feature vector contains non-finite values")
        if np.any(vals < 0):
            raise InvalidInputError("feature values must be nonnegative")
        if self.spectral_entropy > 1.0 + 1e-9:
            raise InvalidInputError(
                f"spectral_entropy {self.spectral_entropy} > 1")
        self.spectral_entropy = min(self.spectral_entropy, 1.0)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)],
                        dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "FeatureVector":
        values = list(values)
        if len(values) != len(FEATURE_NAMES):
            raise InvalidInputError(
                f"expected {len(FEATURE_NAMES)} features, got {len(values)}")
        return cls(*[float(v) for v in values])


FEATURE_NAMES: Tuple[str, ...] = tuple(f.name for f in fields(FeatureVector))


def segment(signal: EegSignal, spec: WindowSpec | None = None) -> List[Window]:
    """Cut index-ordered windows; a trailing partial window is dropped."""
    spec = spec or WindowSpec()
    fs = signal.sample_rate_hz
    wlen = int(round(spec.length_s * fs))
    hop = max(1, int(round(wlen * (1.0 - spec.overlap_fraction))))
    n = len(signal)
    windows = []
    for idx, start in enumerate(range(0, n - wlen + 1, hop)):
        windows.append(Window(signal.samples[start:start + wlen], fs,
                              index=idx, start_s=start / fs))
    return windows


def periodogram(window: Window) -> Tuple[np.ndarray, np.ndarray]:
    """Hann-windowed one-sided periodogram (freqs_hz, power_uv2).

    Normalized so the bin sum equals the Hann-weighted time-domain power
    sum(w*x)^2 / sum(w^2); a steady tone of amplitude A contributes ~A^2/2.
    """
    x = window.samples
    n = x.size
    w = np.hanning(n)
    spectrum = np.fft.rfft(w * x)
    freqs = np.fft.rfftfreq(n, d=1.0 / window.sample_rate_hz)
    scale = np.full(freqs.size, 2.0)
    scale[0] = 1.0
    if n % 2 == 0:
        scale[-1] = 1.0
    power = scale * np.abs(spectrum) ** 2 / (n * np.sum(w ** 2))
    return freqs, power


def band_power(window: Window, band: Tuple[float, float]) -> float:
    """Power summed over periodogram bins with center frequency in [low, high)."""
    low, high = band
    nyq = window.sample_rate_hz / 2.0
    if not (0.0 < low < high < nyq):
        raise InvalidBandError(
            f"band [{low}, {high}) must lie within (0, {nyq}) Hz")
    freqs, power = periodogram(window)
    mask = (freqs >= low) & (freqs < high)
    return float(np.sum(power[mask]))


def zcr(window: Window) -> float:
    """Strict polarity changes per second; zero samples inherit the prior sign."""
    x = window.samples
    if x.size == 0:
        raise InvalidInputError("empty window")
    s = np.sign(x)
    if s[0] == 0.0:
        s[0] = 1.0
    nonzero = s != 0.0
    idx = np.where(nonzero, np.arange(s.size), 0)
    np.maximum.accumulate(idx, out=idx)
    s = s[idx]
    crossings = int(np.count_nonzero(s[1:] != s[:-1]))
    return crossings / window.duration_s


def hjorth(window: Window) -> Tuple[float, float, float]:
    """(activity, mobility, complexity).

    Activity is the sample variance; mobility the RMS ratio of the
    rate-scaled first difference to the signal; complexity the mobility of
    the difference relative to the signal's own mobility (1.0 for a
    sinusoid).
    """
    x = window.samples
    if x.size < 3:
        raise InvalidInputError("hjorth needs at least 3 samples")
    fs = window.sample_rate_hz
    var_x = float(np.var(x))
    if var_x == 0.0:
        raise DegenerateInputError("zero variance", stage="hjorth")
    dx = np.diff(x) * fs
    var_dx = float(np.var(dx))
    mobility = math.sqrt(var_dx / var_x)
    if var_dx == 0.0:
        raise DegenerateInputError("constant first difference", stage="hjorth")
    ddx = np.diff(dx) * fs
    var_ddx = float(np.var(ddx))
    mobility_dx = math.sqrt(var_ddx / var_dx)
    return var_x, mobility, mobility_dx / mobility


def rms(window: Window) -> float:
    if window.samples.size == 0:
        raise InvalidInputError("empty window")
    return float(np.sqrt(np.mean(window.samples ** 2)))


def spectral_entropy(window: Window) -> float:
    """Shannon entropy of the normalized periodogram over positive bins, in [0, 1]."""
    _, power = periodogram(window)
    pos = power[1:]  # exclude DC
    total = float(np.sum(pos))
    if total <= 0.0:
        raise DegenerateInputError("zero spectral power", stage="spectral_entropy")
    if pos.size < 2:
        return 0.0
    q = pos / total
    nz = q[q > 0.0]
    h = -float(np.sum(nz * np.log(nz)))
    return h / math.log(pos.size)


def assemble(window: Window) -> FeatureVector:
    """All 11 features for one window; degenerate input is tagged with its index."""
    try:
        powers = [band_power(window, (lo, hi)) for _, lo, hi in BANDS]
        activity, mobility, complexity = hjorth(window)
        return FeatureVector(
            delta_pw=powers[0],
            theta_pw=powers[1],
            alpha_pw=powers[2],
            beta_pw=powers[3],
            gamma_pw=powers[4],
            zcr=zcr(window),
            hjorth_activity=activity,
            hjorth_mobility=mobility,
            hjorth_complexity=complexity,
            rms=rms(window),
            spectral_entropy=spectral_entropy(window),
        )
    except DegenerateInputError as exc:
        raise DegenerateInputError(
            str(exc), stage=f"window {window.index}") from exc


def extract_features(signal: EegSignal,
                     spec: WindowSpec | None = None) -> List[Tuple[Window, FeatureVector]]:
    """Segment then assemble; returns (window, features) pairs."""
    return [(w, assemble(w)) for w in segment(signal, spec)]


# ---------------------------------------------------------------------------
# CSV: "window_index,start_s" then the 11 canonical names.
# ---------------------------------------------------------------------------

FEATURE_CSV_HEADER = "window_index,start_s," + ",".join(FEATURE_NAMES)


def write_features_csv(path: str,
                       rows: Sequence[Tuple[Window, FeatureVector]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(FEATURE_CSV_HEADER + "\n")
        for window, feats in rows:
            vals = ",".join(repr(float(v)) for v in feats.as_array())
            fh.write(f"{window.index},{window.start_s!r},{vals}\n")


def read_features_csv(path: str) -> List[Tuple[int, float, FeatureVector]]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != FEATURE_CSV_HEADER:
            raise InvalidInputError(f"unexpected features CSV header: {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2 + len(FEATURE_NAMES):
                raise InvalidInputError("wrong column count in features CSV")
            out.append((int(parts[0]), float(parts[1]),
                        FeatureVector.from_array([float(p) for p in parts[2:]])))
    return out
