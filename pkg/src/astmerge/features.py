"""Log-mel spectrogram front end.

Converts a mono waveform into the normalized 128 x 100t log-mel matrix the
encoder consumes: 25 ms Hann window, 10 ms hop (100 frames/s), centered
framing with reflection padding so a t-second clip yields exactly
ceil(100t) frames, power-spectrum mel filterbank, natural log with a small
floor. Also owns the ``SPEC1`` spectrogram file format and 16-bit PCM WAV
ingestion.
"""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

SPEC1_MAGIC = b"SPEC1"

# Guard against float noise in duration-derived frame counts
# (e.g. 100 * 0.16 = 16.000000000000004 must still mean 16 frames).
_DURATION_EPS = 1e-9


@dataclass(frozen=True)
class SpectrogramConfig:
    """Front-end parameters. Defaults give the 128 x 100t layout."""

    n_mels: int = 128
    frames_per_second: int = 100
    window_length_ms: float = 25.0
    hop_length_ms: float = 10.0
    fft_size: int | None = None  # None: next power of two >= window samples
    mel_fmin: float = 0.0
    mel_fmax: float | None = None  # None: sample_rate / 2
    log_floor: float = 1e-10

    def __post_init__(self) -> None:
        if self.n_mels < 1:
            raise ConfigError(f"n_mels must be >= 1, got {self.n_mels}")
        if self.hop_length_ms * self.frames_per_second != 1000.0:
            raise ConfigError(
                "hop_length_ms * frames_per_second must equal 1000, got "
                f"{self.hop_length_ms} * {self.frames_per_second}"
            )
        if self.log_floor <= 0:
            raise ConfigError(f"log_floor must be positive, got {self.log_floor}")

    def window_samples(self, sample_rate: int) -> int:
        return int(round(sample_rate * self.window_length_ms / 1000.0))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(sample_rate * self.hop_length_ms / 1000.0))

    def effective_fft_size(self, sample_rate: int) -> int:
        if self.fft_size is not None:
            return self.fft_size
        win = self.window_samples(sample_rate)
        return 1 << (win - 1).bit_length()

    def effective_fmax(self, sample_rate: int) -> float:
        return self.mel_fmax if self.mel_fmax is not None else sample_rate / 2.0


@dataclass(frozen=True)
class Waveform:
    """Mono waveform with amplitudes nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1 or samples.size < 1:
            raise ConfigError("waveform must be a non-empty 1-D sample array")
        if not np.all(np.isfinite(samples)):
            raise ConfigError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    """Log-mel matrix [n_mels x n_frames]. ``config`` is None for file loads."""

    values: np.ndarray
    config: SpectrogramConfig | None = field(default=None)

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def frames_for_duration(seconds: float, frames_per_second: int = 100) -> int:
    """Frame count of a clip: ceil(fps * seconds), robust to float noise."""
    return int(math.ceil(frames_per_second * seconds - _DURATION_EPS))


def hz_to_mel(f: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    cfg: SpectrogramConfig, sample_rate: int
) -> tuple[np.ndarray, np.ndarray]:
    """Triangular mel filterbank and its center frequencies.

    Returns (weights [n_mels x n_fft_bins], centers_hz [n_mels]). Triangles
    are peak-normalized (height 1) so a pure tone is maximal in the filter
    whose center is nearest the tone.
    """
    fmax = cfg.effective_fmax(sample_rate)
    if not cfg.mel_fmin < fmax:
        raise ConfigError(f"mel_fmin {cfg.mel_fmin} must be below mel_fmax {fmax}")
    if fmax > sample_rate / 2.0 + 1e-9:
        raise ConfigError(
            f"mel_fmax {fmax} exceeds Nyquist {sample_rate / 2.0} "
            f"for sample_rate {sample_rate}"
        )
    n_fft = cfg.effective_fft_size(sample_rate)
    n_bins = n_fft // 2 + 1
    fft_freqs = np.arange(n_bins, dtype=np.float64) * sample_rate / n_fft

    mel_points = np.linspace(hz_to_mel(cfg.mel_fmin), hz_to_mel(fmax), cfg.n_mels + 2)
    hz_points = np.asarray(mel_to_hz(mel_points))
    weights = np.zeros((cfg.n_mels, n_bins), dtype=np.float64)
    for m in range(cfg.n_mels):
        left, center, right = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (fft_freqs - left) / max(center - left, 1e-12)
        falling = (right - fft_freqs) / max(right - center, 1e-12)
        weights[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    centers = hz_points[1:-1]
    return weights, centers


def _hann_window(length: int) -> np.ndarray:
    # Periodic Hann, the STFT convention.
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


def compute_log_mel(w: Waveform, cfg: SpectrogramConfig) -> Spectrogram:
    """Log-mel spectrogram of a waveform.

    Frame k is centered at sample k * hop; the signal is reflection-padded by
    half a window on both sides, so a t-second clip yields ceil(100t) frames.
    Output values are ln(mel_power + log_floor) as float32.
    """
    sr = w.sample_rate
    win = cfg.window_samples(sr)
    hop = cfg.hop_samples(sr)
    if hop < 1 or win < 2:
        raise ConfigError(f"sample_rate {sr} too low for the configured window/hop")
    n_fft = cfg.effective_fft_size(sr)
    if n_fft < win:
        raise ConfigError(f"fft_size {n_fft} smaller than window ({win} samples)")
    fb, _ = mel_filterbank(cfg, sr)

    x = w.samples
    n_frames = int(math.ceil(x.size / hop))
    pad = win // 2
    if x.size > pad:
        padded = np.pad(x, pad, mode="reflect")
    else:
        padded = np.pad(x, pad, mode="constant")  # degenerate ultra-short clip
    # Ensure the last frame start (n_frames-1)*hop has a full window available.
    needed = (n_frames - 1) * hop + win
    if padded.size < needed:
        padded = np.pad(padded, (0, needed - padded.size), mode="constant")

    window = _hann_window(win)
    frames = np.lib.stride_tricks.sliding_window_view(padded, win)[::hop][:n_frames]
    spectrum = np.fft.rfft(frames * window, n=n_fft, axis=1)
    power = np.abs(spectrum) ** 2  # [n_frames x n_bins]
    mel = power @ fb.T  # [n_frames x n_mels]
    values = np.log(mel + cfg.log_floor).T.astype(np.float32)
    return Spectrogram(values=values, config=cfg)


def normalize(s: Spectrogram, mean: float, std: float) -> Spectrogram:
    """Shift/scale every value to (v - mean) / std."""
    if std <= 0:
        raise ConfigError(f"normalization std must be positive, got {std}")
    values = ((s.values.astype(np.float32) - np.float32(mean)) / np.float32(std)).astype(
        np.float32
    )
    return Spectrogram(values=values, config=s.config)


def read_wav(path: str | Path) -> Waveform:
    """Read a 16-bit PCM mono WAV file into a [-1, 1] waveform."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise FormatError(f"{path}: expected mono WAV, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise FormatError(
                f"{path}: expected 16-bit PCM WAV, got {8 * f.getsampwidth()}-bit"
            )
        sr = f.getframerate()
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate=sr)


def write_wav(path: str | Path, w: Waveform) -> None:
    """Write a waveform as 16-bit PCM mono WAV (tests and data generation)."""
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def save_spec(path: str | Path, s: Spectrogram) -> None:
    """Write the SPEC1 format: magic, u32 n_mels, u32 n_frames, f32 row-major."""
    values = np.ascontiguousarray(s.values, dtype="<f4")
    with open(path, "wb") as f:
        f.write(SPEC1_MAGIC)
        f.write(struct.pack("<II", values.shape[0], values.shape[1]))
        f.write(values.tobytes())


def load_spec(path: str | Path) -> Spectrogram:
    """Read a SPEC1 file. The format carries no front-end config."""
    data = Path(path).read_bytes()
    if len(data) < 5 or data[:5] != SPEC1_MAGIC:
        raise FormatError(
            f"{path}: bad magic {data[:5]!r}, expected {SPEC1_MAGIC!r}"
        )
    if len(data) < 13:
        raise FormatError(f"{path}: truncated SPEC1 header")
    n_mels, n_frames = struct.unpack_from("<II", data, 5)
    expected = 13 + 4 * n_mels * n_frames
    if len(data) != expected:
        raise FormatError(
            f"{path}: SPEC1 payload is {len(data)} bytes, expected {expected}"
        )
    values = np.frombuffer(data, dtype="<f4", offset=13).reshape(n_mels, n_frames)
    return Spectrogram(values=values.copy(), config=None)


def fit_frames(values: np.ndarray, expected_frames: int) -> np.ndarray:
    """Zero-pad a spectrogram in time to the model's frame count.

    Longer clips are rejected: positional tables are sized for one declared
    clip length and interpolation is out of scope.
    """
    n_frames = values.shape[1]
    if n_frames > expected_frames:
        raise ShapeError(
            f"clip has {n_frames} frames but the model expects at most "
            f"{expected_frames}; longer clips are rejected"
        )
    if n_frames == expected_frames:
        return values
    out = np.zeros((values.shape[0], expected_frames), dtype=np.float32)
    out[:, :n_frames] = values
    return out
