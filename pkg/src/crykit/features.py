"""Acoustic feature extraction onto a fused (273, 233) tensor.

Channel layout (rows): 0-12 cepstral coefficients, 13-269 log-power
spectrogram bins, 270 fundamental frequency in Hz, 271 voicing confidence,
272 waveform amplitude. Columns are 233 time frames on a unified grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import TARGET_SR, AudioClip
from .errors import ConfigError, TooShort

N_FRAMES = 233
N_CHANNELS = 273
MODALITIES = ("mfcc", "stft", "f0", "wave")
CHANNEL_LAYOUT = {
    "mfcc": (0, 13),
    "stft": (13, 270),
    "f0": (270, 271),
    "f0_conf": (271, 272),
    "wave": (272, 273),
}


@dataclass
class StftConfig:
    fft_size: int = 512
    window_len: int = 480  # 30 ms at 16 kHz
    hop: int = 240  # 50% overlap
    epsilon: float = 1e-10

    def __post_init__(self):
        if not self.window_len <= self.fft_size:
            raise ConfigError("window_len must be <= fft_size")
        if not 0 < self.hop <= self.window_len:
            raise ConfigError("hop must be in (0, window_len]")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")


@dataclass
class MfccConfig:
    window_len: int = 480  # 30 ms Hamming
    hop: int = 160  # 10 ms
    n_mels: int = 26
    n_coeffs: int = 13
    fft_size: int = 512
    epsilon: float = 1e-10

    def __post_init__(self):
        if not 1 <= self.n_coeffs <= self.n_mels:
            raise ConfigError("need 1 <= n_coeffs <= n_mels")


@dataclass
class PitchConfig:
    frame_len: int = 1024  # 64 ms at 16 kHz
    hop: int = 240  # matched to the spectrogram hop
    f0_min: float = 80.0
    f0_max: float = 600.0
    conf_threshold: float = 0.3

    def validate(self, sample_rate: int) -> None:
        if self.frame_len < 2 * (sample_rate / self.f0_max):
            raise ConfigError("frame_len must cover two periods of f0_max")


@dataclass
class FeatureConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    mfcc: MfccConfig = field(default_factory=MfccConfig)
    pitch: PitchConfig = field(default_factory=PitchConfig)
    n_frames: int = N_FRAMES
    subset: tuple[str, ...] = MODALITIES

    def __post_init__(self):
        bad = set(self.subset) - set(MODALITIES)
        if bad:
            raise ConfigError(f"unknown modalities {sorted(bad)}")

    def to_dict(self) -> dict:
        return {
            "stft": vars(self.stft).copy(),
            "mfcc": vars(self.mfcc).copy(),
            "pitch": vars(self.pitch).copy(),
            "n_frames": self.n_frames,
            "subset": sorted(self.subset),
        }


@dataclass
class PitchTrack:
    """Per-frame fundamental frequency (Hz, 0 when unvoiced) and confidence."""

    f0: np.ndarray
    confidence: np.ndarray
    times: np.ndarray | None = None

    def __post_init__(self):
        self.f0 = np.asarray(self.f0, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.f0.shape != self.confidence.shape:
            raise ConfigError("f0 and confidence must have equal length")
        if np.any(self.f0 < 0):
            raise ConfigError("f0 must be non-negative")
        if np.any((self.confidence < 0) | (self.confidence > 1)):
            raise ConfigError("confidence must lie in [0, 1]")


# -- framing and spectra -----------------------------------------------------


def frame_signal(x: np.ndarray, window_len: int, hop: int) -> np.ndarray:
    """(n_frames, window_len) view; frames start every `hop` samples."""
    if len(x) < window_len:
        raise TooShort(f"clip of {len(x)} samples is shorter than one {window_len}-sample window")
    n = (len(x) - window_len) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(x, window_len)[:: hop][:n]


def _power_spectrum(x: np.ndarray, window_len: int, hop: int, fft_size: int) -> np.ndarray:
    """(n_frames, fft_size//2 + 1) squared-magnitude spectra, Hamming windowed."""
    frames = frame_signal(x, window_len, hop) * np.hamming(window_len)
    spec = np.fft.rfft(frames, n=fft_size, axis=1)
    return np.abs(spec) ** 2


def stft_logpower(clip: AudioClip, cfg: StftConfig | None = None) -> np.ndarray:
    """log(|X|^2 + eps) spectrogram, shape (fft_size//2 + 1, n_frames)."""
    cfg = cfg or StftConfig()
    power = _power_spectrum(clip.samples, cfg.window_len, cfg.hop, cfg.fft_size)
    return np.log(power + cfg.epsilon).T


# -- mel cepstrum ------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(cfg: MfccConfig, fft_size: int = 512, sample_rate: int = TARGET_SR) -> np.ndarray:
    """Triangular mel filters on the FFT-bin grid, peak weight 1, 0..Nyquist."""
    if cfg.n_mels < cfg.n_coeffs:
        raise ConfigError("n_mels must be >= n_coeffs")
    n_bins = fft_size // 2 + 1
    edges_mel = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), cfg.n_mels + 2)
    edges = np.floor((fft_size + 1) * mel_to_hz(edges_mel) / sample_rate).astype(int)
    if np.any(np.diff(edges) < 1):
        raise ConfigError("mel filters collapse onto single FFT bins; lower n_mels")
    weights = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        k = np.arange(lo, mid)
        weights[m, k] = (k - lo) / (mid - lo)
        k = np.arange(mid, min(hi, n_bins))
        weights[m, k] = (hi - k) / (hi - mid)
    return weights


def mel_center_frequencies(cfg: MfccConfig, sample_rate: int = TARGET_SR) -> np.ndarray:
    edges_mel = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), cfg.n_mels + 2)
    return mel_to_hz(edges_mel[1:-1])


def mfcc(clip: AudioClip, cfg: MfccConfig | None = None, filterbank: np.ndarray | None = None) -> np.ndarray:
    """Cepstral coefficients, shape (n_coeffs, n_frames).

    Mel energies are floored at epsilon before the log so silent frames
    stay finite; the cosine transform follows the plain sum
    c_d = sum_m log E_m * cos(pi d (m + 0.5) / M).
    """
    cfg = cfg or MfccConfig()
    if filterbank is None:
        filterbank = build_mel_filterbank(cfg, cfg.fft_size)
    power = _power_spectrum(clip.samples, cfg.window_len, cfg.hop, cfg.fft_size)
    energies = power @ filterbank.T
    log_e = np.log(np.maximum(energies, cfg.epsilon))
    m = np.arange(cfg.n_mels)
    d = np.arange(cfg.n_coeffs)
    dct = np.cos(np.pi * d[:, None] * (m[None, :] + 0.5) / cfg.n_mels)
    return (log_e @ dct.T).T


# -- pitch -------------------------------------------------------------------


def estimate_pitch(clip: AudioClip, cfg: PitchConfig | None = None) -> PitchTrack:
    """Frame-wise normalized autocorrelation pitch with voicing confidence.

    Per frame: search lags covering [f0_min, f0_max], confidence is the
    peak normalized autocorrelation clamped to [0, 1]; frames below the
    confidence threshold report f0 = 0. Silence yields zeros throughout.
    """
    cfg = cfg or PitchConfig()
    sr = clip.sample_rate
    cfg.validate(sr)
    frames = frame_signal(clip.samples, cfg.frame_len, cfg.hop).astype(np.float64)
    frames = frames - frames.mean(axis=1, keepdims=True)

    lag_min = int(np.ceil(sr / cfg.f0_max))
    lag_max = min(int(np.floor(sr / cfg.f0_min)), cfg.frame_len - 1)
    n_fft = 1 << int(np.ceil(np.log2(2 * cfg.frame_len)))
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    autocorr = np.fft.irfft(np.abs(spec) ** 2, n=n_fft, axis=1)[:, : lag_max + 1]

    # energies of the two shifted segments, per lag, via cumulative sums
    sq = frames**2
    csum = np.concatenate([np.zeros((len(frames), 1)), np.cumsum(sq, axis=1)], axis=1)
    total = csum[:, -1:]
    lags = np.arange(lag_max + 1)
    head = csum[:, cfg.frame_len - lags]
    tail = total - csum[:, lags]
    ncc = autocorr / np.sqrt(head * tail + 1e-20)

    band = ncc[:, lag_min : lag_max + 1]
    peak = band.max(axis=1)
    # Period multiples peak at nearly the same NCC on periodic signals, so a
    # bare argmax flips octaves frame to frame. Choose the shortest lag that
    # is a local maximum within 5% of the global peak.
    interior = np.zeros_like(band, dtype=bool)
    interior[:, 1:-1] = (band[:, 1:-1] >= band[:, :-2]) & (band[:, 1:-1] >= band[:, 2:])
    interior[:, 0] = band[:, 0] >= band[:, 1]
    interior[:, -1] = band[:, -1] >= band[:, -2]
    candidate = interior & (band >= 0.95 * peak[:, None])
    candidate[np.arange(len(frames)), band.argmax(axis=1)] = True  # peak always qualifies
    best = candidate.argmax(axis=1) + lag_min
    confidence = np.clip(peak, 0.0, 1.0)
    f0 = np.where(confidence >= cfg.conf_threshold, sr / best, 0.0)
    times = (np.arange(len(frames)) * cfg.hop + cfg.frame_len / 2.0) / sr
    return PitchTrack(f0=f0, confidence=confidence, times=times)


def read_pitch_sidecar(path: Path | str) -> PitchTrack:
    """Load `time_s,f0_hz,confidence` CSV rows produced by an external tracker."""
    import csv

    times, f0, conf = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"time_s", "f0_hz", "confidence"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ConfigError(f"{path}: sidecar must have columns {sorted(required)}")
        for row in reader:
            times.append(float(row["time_s"]))
            f0.append(float(row["f0_hz"]))
            conf.append(float(row["confidence"]))
    return PitchTrack(f0=np.array(f0), confidence=np.array(conf), times=np.array(times))


def write_pitch_sidecar(path: Path | str, track: PitchTrack) -> None:
    import csv

    times = track.times if track.times is not None else np.arange(len(track.f0), dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "f0_hz", "confidence"])
        for t, f, c in zip(times, track.f0, track.confidence):
            writer.writerow([f"{t:.6f}", f"{f:.4f}", f"{c:.6f}"])


def pitch_sidecar_path(wav_path: Path | str) -> Path:
    """`clip.wav` pairs with `clip.f0.csv`."""
    p = Path(wav_path)
    return p.with_suffix(".f0.csv") if p.suffix == ".wav" else Path(str(p) + ".f0.csv")


# -- time alignment and fusion ------------------------------------------------


def waveform_channel(clip: AudioClip, n_frames: int = N_FRAMES) -> np.ndarray:
    """(1, n_frames) linear interpolation of the raw waveform, no normalization."""
    x = clip.samples
    if len(x) == 0:
        raise TooShort("empty clip")
    if len(x) == 1:
        return np.full((1, n_frames), x[0])
    pos = np.linspace(0.0, len(x) - 1.0, n_frames)
    return np.interp(pos, np.arange(len(x)), x)[None, :]


def align_time(fm: np.ndarray, n_frames: int = N_FRAMES) -> np.ndarray:
    """Nearest-index time scaling: column t <- clamp(floor(alpha t), 1, T_m), 1-based."""
    fm = np.atleast_2d(fm)
    t_m = fm.shape[1]
    if t_m < 1 or n_frames < 1:
        raise ConfigError("alignment needs at least one frame on both grids")
    alpha = t_m / n_frames
    idx = np.clip(np.floor(alpha * np.arange(1, n_frames + 1)).astype(int), 1, t_m) - 1
    return fm[:, idx]


def fuse_features(clip: AudioClip, cfg: FeatureConfig | None = None,
                  pitch_track: PitchTrack | None = None) -> np.ndarray:
    """Stacked (273, n_frames) tensor; excluded modalities stay zero rows.

    Row order: cepstra, spectrogram, f0, voicing confidence, waveform. An
    external pitch track replaces the built-in estimator when given.
    """
    cfg = cfg or FeatureConfig()
    if clip.sample_rate != TARGET_SR:
        raise ConfigError(f"expected {TARGET_SR} Hz input, got {clip.sample_rate}")
    t = cfg.n_frames
    out = np.zeros((N_CHANNELS, t))
    if "mfcc" in cfg.subset:
        lo, hi = CHANNEL_LAYOUT["mfcc"]
        out[lo:hi] = align_time(mfcc(clip, cfg.mfcc), t)
    if "stft" in cfg.subset:
        lo, hi = CHANNEL_LAYOUT["stft"]
        out[lo:hi] = align_time(stft_logpower(clip, cfg.stft), t)
    if "f0" in cfg.subset:
        track = pitch_track if pitch_track is not None else estimate_pitch(clip, cfg.pitch)
        out[CHANNEL_LAYOUT["f0"][0]] = align_time(track.f0[None, :], t)[0]
        out[CHANNEL_LAYOUT["f0_conf"][0]] = align_time(track.confidence[None, :], t)[0]
    if "wave" in cfg.subset:
        out[CHANNEL_LAYOUT["wave"][0]] = waveform_channel(clip, t)[0]
    return out


def modality_row_mask(subset) -> np.ndarray:
    """Boolean (273,) mask: True for rows of the selected modalities."""
    mask = np.zeros(N_CHANNELS, dtype=bool)
    for name in subset:
        if name not in MODALITIES:
            raise ConfigError(f"unknown modality {name!r}")
        lo, hi = CHANNEL_LAYOUT[name]
        mask[lo:hi] = True
        if name == "f0":
            lo, hi = CHANNEL_LAYOUT["f0_conf"]
            mask[lo:hi] = True
    return mask


def stft_frame_count(n_samples: int, cfg: StftConfig | None = None) -> int:
    cfg = cfg or StftConfig()
    if n_samples < cfg.window_len:
        return 0
    return (n_samples - cfg.window_len) // cfg.hop + 1


def median_frame_count(sample_counts, cfg: StftConfig | None = None) -> int:
    """Median per-clip frame count on the spectrogram grid (rounded)."""
    counts = [stft_frame_count(n, cfg) for n in sample_counts]
    if not counts:
        raise ConfigError("no clips to take a median over")
    return int(round(float(np.median(counts))))
