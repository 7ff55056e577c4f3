"""
Signal preparation module for SourceCV.
Turns raw ECG signals into fixed-shape model inputs and lead II feature vectors.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import neurokit2 as nk
import numpy as np
from joblib import Parallel, delayed
from scipy.ndimage import maximum_filter1d
from scipy.signal import find_peaks, peak_widths, welch
from scipy.stats import kurtosis, skew

from src.dataset import Dataset, load_signal
from src.seeding import derive_rng

logger = logging.getLogger(__name__)

N_SIGNAL_FEATURES = 20
N_FEATURES = N_SIGNAL_FEATURES + 2

FEATURE_NAMES = (
    "rr_mean",
    "rr_median",
    "sdnn",
    "rmssd",
    "pnn50",
    "rr_min",
    "rr_max",
    "hr_mean",
    "hr_std",
    "r_peak_count",
    "r_amp_mean",
    "r_amp_std",
    "energy",
    "zero_crossing_rate",
    "skewness",
    "kurtosis",
    "qrs_width_mean",
    "qrs_width_std",
    "baseline_power_ratio",
    "hf_power_ratio",
)
DEMOGRAPHIC_NAMES = ("age_scaled", "sex_numeric")

# Detection and spectral constants
REFRACTORY_S = 0.25
ENVELOPE_WINDOW_S = 2.0
ENVELOPE_FRACTION = 0.5
MIN_SIGNAL_S = 2.0
BASELINE_BAND_HZ = (0.0, 0.5)
HF_BAND_HZ = (15.0, 40.0)
MIN_HRV_PEAKS = 3

SEX_ONEHOT = {
    "male": (1.0, 0.0, 0.0),
    "female": (0.0, 1.0, 0.0),
    "unknown": (0.0, 0.0, 1.0),
}
SEX_NUMERIC = {"male": 1.0, "female": 0.0, "unknown": 0.5}
_SEX_ALIASES = {"M": "male", "F": "female", "U": "unknown"}
UNKNOWN_AGE_SCALED = 0.5


@dataclass(frozen=True)
class PrepConfig:
    target_fs: float = 250.0
    target_len: int = 4096
    age_scale_max: float = 100.0
    per_lead_normalization: bool = False
    lead_index: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if not self.target_fs > 0:
            raise ValueError(f"target_fs must be positive, got {self.target_fs}")
        if self.target_len <= 0:
            raise ValueError(f"target_len must be positive, got {self.target_len}")
        if not self.age_scale_max > 0:
            raise ValueError(f"age_scale_max must be positive, got {self.age_scale_max}")
        if self.lead_index < 0:
            raise ValueError(f"lead_index must be non-negative, got {self.lead_index}")


@dataclass(frozen=True, eq=False)
class ModelInput:
    """Fixed-shape input of a waveform model."""

    signal: np.ndarray
    age_scaled: float
    sex_onehot: Tuple[float, float, float]

    def __post_init__(self):
        if np.any(self.signal < 0) or np.any(self.signal > 1):
            raise ValueError("Model input signal must lie in [0, 1]")
        if sorted(self.sex_onehot) != [0.0, 0.0, 1.0]:
            raise ValueError(f"sex_onehot must have exactly one 1, got {self.sex_onehot}")


@dataclass(frozen=True)
class Lead2Features:
    """20 lead II features followed by age_scaled and sex_numeric."""

    values: Tuple[float, ...]
    r_peaks_found: bool = True

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if len(values) != N_FEATURES:
            raise ValueError(f"Expected {N_FEATURES} feature values, got {len(values)}")
        if not all(np.isfinite(values)):
            raise ValueError("Feature values must be finite")
        object.__setattr__(self, "values", values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


def _as_2d(signal) -> Tuple[np.ndarray, bool]:
    x = np.asarray(signal, dtype=float)
    if x.ndim == 1:
        return x[np.newaxis, :], True
    if x.ndim != 2:
        raise ValueError(f"Signal must be 1-D or leads x samples, got shape {x.shape}")
    return x, False


def resample(signal, fs_in: float, fs_out: float) -> np.ndarray:
    """
    Linear-interpolation resampling on the uniform time grid, lead by lead.

    Args:
        signal: leads x n (or a single lead)
        fs_in: Input sampling frequency in Hz
        fs_out: Output sampling frequency in Hz

    Returns:
        Signal with m = round(n * fs_out / fs_in) samples

    Raises:
        ValueError: Non-positive frequencies or fewer than 2 samples
    """
    if not (fs_in > 0 and fs_out > 0):
        raise ValueError(f"Sampling frequencies must be positive, got {fs_in} and {fs_out}")
    x, squeeze = _as_2d(signal)
    n = x.shape[1]
    if n < 2:
        raise ValueError(f"Cannot resample a signal of {n} samples")

    if fs_in == fs_out:
        out = x.copy()
    else:
        m = int(round(n * fs_out / fs_in))
        t_in = np.arange(n) / fs_in
        t_out = np.arange(m) / fs_out
        out = np.vstack([np.interp(t_out, t_in, lead) for lead in x])
    return out[0] if squeeze else out


def fit_length(signal, target_len: int, rng: np.random.Generator) -> np.ndarray:
    """
    Crop or zero-pad to target_len samples.

    Longer signals are cropped at a uniformly random offset. Shorter ones get
    k ~ U{0..deficit} zeros on the left and the rest on the right.
    """
    if target_len <= 0:
        raise ValueError(f"target_len must be positive, got {target_len}")
    x, squeeze = _as_2d(signal)
    n = x.shape[1]

    if n > target_len:
        offset = int(rng.integers(0, n - target_len + 1))
        out = x[:, offset:offset + target_len].copy()
    elif n < target_len:
        deficit = target_len - n
        left = int(rng.integers(0, deficit + 1))
        out = np.pad(x, ((0, 0), (left, deficit - left)))
    else:
        out = x.copy()
    return out[0] if squeeze else out


def normalize_amplitude(signal, per_lead: bool = False) -> np.ndarray:
    """
    Min-max scale into [0, 1], jointly over leads unless per_lead.

    Constant signals map to 0.5.

    Raises:
        ValueError: Non-finite values
    """
    x, squeeze = _as_2d(signal)
    if not np.all(np.isfinite(x)):
        raise ValueError("Cannot normalize a signal with non-finite values")

    axis = 1 if per_lead else None
    low = x.min(axis=axis, keepdims=True)
    span = x.max(axis=axis, keepdims=True) - low
    safe_span = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (x - low) / safe_span, 0.5)
    return out[0] if squeeze else out


def _canonical_sex(sex: str) -> str:
    sex = _SEX_ALIASES.get(sex, sex)
    if sex not in SEX_ONEHOT:
        raise ValueError(f"Unknown sex value {sex!r}")
    return sex


def encode_demographics(
    age: Optional[float], sex: str, age_scale_max: float = 100.0
) -> Tuple[float, Tuple[float, float, float]]:
    """
    Scale age into [0, 1] and one-hot encode sex over (M, F, unknown).

    Unknown age maps to 0.5.
    """
    if age is None:
        age_scaled = UNKNOWN_AGE_SCALED
    else:
        age_scaled = float(np.clip(age / age_scale_max, 0.0, 1.0))
    return age_scaled, SEX_ONEHOT[_canonical_sex(sex)]


def detect_r_peaks(lead, fs: float) -> np.ndarray:
    """
    R-peak sample indices.

    Local maxima above half of a moving-maximum envelope, at least
    REFRACTORY_S apart.
    """
    x = np.asarray(lead, dtype=float)
    x = x - np.median(x)
    if x.size < 3 or np.max(np.abs(x)) == 0:
        return np.array([], dtype=int)

    window = max(int(round(ENVELOPE_WINDOW_S * fs)), 1)
    envelope = maximum_filter1d(np.abs(x), size=window, mode="nearest")
    threshold = ENVELOPE_FRACTION * envelope
    distance = max(int(round(REFRACTORY_S * fs)), 1)
    peaks, _ = find_peaks(x, height=threshold, distance=distance)
    return peaks


def hrv_features(peaks: np.ndarray, fs: float) -> np.ndarray:
    """
    The nine HRV slots of FEATURE_NAMES from an R-peak train.

    Interval statistics come from neurokit2's time-domain HRV (SDNN with
    ddof=1) and are converted from ms to seconds; pNN50 is a fraction.

    Args:
        peaks: R-peak sample indices, at least MIN_HRV_PEAKS of them
        fs: Sampling frequency in Hz

    Returns:
        Array of 9 values; NaN entries become 0
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        hrv = nk.hrv_time({"ECG_R_Peaks": np.asarray(peaks)}, sampling_rate=fs).iloc[0]
    hr = 60.0 * fs / np.diff(peaks)
    values = np.array([
        hrv["HRV_MeanNN"] / 1000.0,
        hrv["HRV_MedianNN"] / 1000.0,
        hrv["HRV_SDNN"] / 1000.0,
        hrv["HRV_RMSSD"] / 1000.0,
        hrv["HRV_pNN50"] / 100.0,
        hrv["HRV_MinNN"] / 1000.0,
        hrv["HRV_MaxNN"] / 1000.0,
        hr.mean(),
        hr.std(),
    ], dtype=float)
    return np.nan_to_num(values, nan=0.0, posinf=0.0, neginf=0.0)


def _band_power(freqs: np.ndarray, power: np.ndarray, band: Tuple[float, float]) -> float:
    low, high = band
    mask = (freqs >= low) & (freqs <= high)
    return float(power[mask].sum())


def extract_lead2_features(lead, fs: float) -> Tuple[np.ndarray, bool]:
    """
    The 20 hand-crafted lead II features (see FEATURE_NAMES).

    HRV slots are zero when fewer than MIN_HRV_PEAKS R peaks are found.

    Args:
        lead: One lead at fs
        fs: Sampling frequency in Hz

    Returns:
        Tuple of (20 finite values, whether the HRV slots were computed)

    Raises:
        ValueError: Signal shorter than MIN_SIGNAL_S seconds
    """
    x = np.asarray(lead, dtype=float)
    if x.size < MIN_SIGNAL_S * fs:
        raise ValueError(f"Need at least {MIN_SIGNAL_S:g} s of signal, got {x.size / fs:.2f} s")

    centered = x - np.median(x)
    peaks = detect_r_peaks(x, fs)
    features = np.zeros(N_SIGNAL_FEATURES)
    found = False

    if peaks.size >= MIN_HRV_PEAKS:
        try:
            features[:9] = hrv_features(peaks, fs)
            found = True
        except (ValueError, IndexError, ZeroDivisionError) as e:
            logger.debug(f"HRV computation failed on {peaks.size} R peaks: {e}")
    if not found:
        logger.debug(f"Only {peaks.size} usable R peaks, HRV features set to zero")
    features[9] = peaks.size

    if peaks.size:
        amplitudes = centered[peaks]
        features[10] = amplitudes.mean()
        features[11] = amplitudes.std()
        widths = peak_widths(centered, peaks, rel_height=0.5)[0] / fs
        features[16] = widths.mean()
        features[17] = widths.std()

    features[12] = np.mean(centered ** 2)
    signs = np.signbit(x - x.mean())
    features[13] = np.count_nonzero(signs[1:] != signs[:-1]) / (x.size - 1)
    if np.ptp(x) > 0:
        features[14] = skew(x)
        features[15] = kurtosis(x)

    freqs, power = welch(centered, fs=fs, nperseg=min(x.size, int(4 * fs)))
    total = power.sum()
    if total > 0:
        features[18] = _band_power(freqs, power, BASELINE_BAND_HZ) / total
        features[19] = _band_power(freqs, power, HF_BAND_HZ) / total

    return np.nan_to_num(features, nan=0.0, posinf=0.0, neginf=0.0), found


def prepare_model_input(
    signal, fs: float, age: Optional[float], sex: str, cfg: PrepConfig, record_id: str = ""
) -> ModelInput:
    """
    Resample, fit length, normalize and encode demographics.

    The crop/pad draw uses a stream derived from (cfg.rng_seed, record_id),
    so outputs do not depend on processing order.
    """
    x, _ = _as_2d(signal)
    x = resample(x, fs, cfg.target_fs)
    x = fit_length(x, cfg.target_len, derive_rng(cfg.rng_seed, "fit_length", record_id))
    x = normalize_amplitude(x, per_lead=cfg.per_lead_normalization)
    age_scaled, sex_onehot = encode_demographics(age, sex, cfg.age_scale_max)
    return ModelInput(signal=x, age_scaled=age_scaled, sex_onehot=sex_onehot)


def build_feature_vector(
    signal, fs: float, age: Optional[float], sex: str, cfg: PrepConfig
) -> Lead2Features:
    """
    Lead II features at cfg.target_fs plus age_scaled and sex_numeric.

    Raises:
        ValueError: Signal has no lead at cfg.lead_index
    """
    x, _ = _as_2d(signal)
    if x.shape[0] <= cfg.lead_index:
        raise ValueError(f"Signal has {x.shape[0]} leads, lead index {cfg.lead_index} requested")
    lead = resample(x[cfg.lead_index], fs, cfg.target_fs)
    features, found = extract_lead2_features(lead, cfg.target_fs)
    age_scaled, _ = encode_demographics(age, sex, cfg.age_scale_max)
    values = tuple(features) + (age_scaled, SEX_NUMERIC[_canonical_sex(sex)])
    return Lead2Features(values=values, r_peaks_found=found)


def _record_features(record, base_dir: Optional[str], cfg: PrepConfig) -> Lead2Features:
    signal = load_signal(record, base_dir)
    return build_feature_vector(signal, record.payload.fs_hz, record.age, record.sex, cfg)


def extract_dataset_features(ds: Dataset, cfg: PrepConfig, n_jobs: int = 1) -> np.ndarray:
    """
    Lead II feature vectors (22 columns) for every signal record of a dataset.

    Returns:
        n x 22 array in record order
    """
    results = Parallel(n_jobs=n_jobs)(
        delayed(_record_features)(record, ds.base_dir, cfg) for record in ds.records
    )
    missing = sum(not result.r_peaks_found for result in results)
    if missing:
        logger.warning(f"{missing} of {len(results)} records used the no-R-peak fallback")
    logger.info(f"Extracted lead II features for {len(results)} records")
    if not results:
        return np.zeros((0, N_FEATURES))
    return np.vstack([result.as_array() for result in results])
