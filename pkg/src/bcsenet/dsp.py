"""WAV ingestion and 40-band log-Mel feature extraction.

The feature recipe is fixed by the model contract: 16 kHz mono PCM input,
30 ms (480-sample) Hann-windowed frames with a 10 ms (160-sample) hop,
512-point FFT power spectrum, 40 triangular HTK-mel filters between 20 Hz
and 8 kHz, then log(x + 1e-6). The resulting map is laid out
[channel=1, frequency=40, time=T] with T = 1 + floor((len - 480) / 160).
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import AudioFormatError, InvalidArgument
from .tensor import Tensor

SAMPLE_RATE = 16_000
WINDOW = 480
HOP = 160
N_FFT = 512
N_MELS = 40
LOG_FLOOR = 1e-6


@dataclass
class AudioClip:
    """Mono waveform, nominally in [-1, 1], at the fixed 16 kHz rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioFormatError(f"expected a mono sample vector, got shape {self.samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(f"sample_rate={self.sample_rate}, expected {SAMPLE_RATE}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioFormatError("clip contains non-finite samples")

    def __len__(self):
        return len(self.samples)


@dataclass
class MelFilterbank:
    """Triangular mel filters over the one-sided FFT power bins."""

    weights: Tensor  # [n_mels, n_fft//2 + 1]
    fmin: float
    fmax: float
    center_freqs_hz: np.ndarray = field(default=None)


@dataclass
class FeatureMap:
    """Log-mel spectrogram, shape [1, n_mels, T]."""

    values: Tensor
    window: int = WINDOW
    hop: int = HOP

    @property
    def n_frames(self) -> int:
        return self.values.shape[2]


def load_wav(path) -> AudioClip:
    """Read a RIFF/WAVE file; it must be 16-bit PCM, mono, 16 kHz."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            if channels != 1:
                raise AudioFormatError(f"{path}: channels={channels}, expected 1")
            rate = wf.getframerate()
            if rate != SAMPLE_RATE:
                raise AudioFormatError(f"{path}: sample_rate={rate}, expected {SAMPLE_RATE}")
            width = wf.getsampwidth()
            if width != 2:
                raise AudioFormatError(
                    f"{path}: sample_width={width} bytes, expected 2 (16-bit PCM)")
            n = wf.getnframes()
            raw = wf.readframes(n)
    except wave.Error as e:
        raise AudioFormatError(f"{path}: not a readable PCM WAV file ({e})") from e
    except EOFError as e:
        raise AudioFormatError(f"{path}: truncated WAV file") from e
    if len(raw) != 2 * n:
        raise AudioFormatError(
            f"{path}: truncated data chunk, header declares {n} frames "
            f"but only {len(raw) // 2} are present")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, SAMPLE_RATE)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write a mono 16-bit PCM WAV; values are clipped to [-1, 1)."""
    pcm = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 32767.0 / 32768.0)
    pcm = np.round(pcm * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def fix_length(clip: AudioClip, target_samples: int) -> AudioClip:
    """Force a clip to an exact length: zero-pad the tail when short,
    center-crop when long."""
    if target_samples < 1:
        raise InvalidArgument(f"target_samples must be >= 1, got {target_samples}")
    n = len(clip.samples)
    if n == target_samples:
        return clip
    if n < target_samples:
        out = np.zeros(target_samples, dtype=clip.samples.dtype)
        out[:n] = clip.samples
    else:
        start = (n - target_samples) // 2
        out = clip.samples[start:start + target_samples].copy()
    return AudioClip(out, clip.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT,
                   sample_rate: int = SAMPLE_RATE,
                   fmin: float = 20.0, fmax: float = 8000.0) -> MelFilterbank:
    """Build n_mels triangular filters with peaks equally spaced on the mel
    scale between fmin and fmax."""
    if not fmin < fmax:
        raise InvalidArgument(f"fmin ({fmin}) must be below fmax ({fmax})")
    if fmax > sample_rate / 2:
        raise InvalidArgument(f"fmax ({fmax}) exceeds Nyquist ({sample_rate / 2})")
    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)

    weights = np.zeros((n_mels, n_fft // 2 + 1), dtype=np.float64)
    for m in range(n_mels):
        lo, mid, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (bin_freqs - lo) / (mid - lo)
        down = (hi - bin_freqs) / (hi - mid)
        weights[m] = np.maximum(0.0, np.minimum(up, down))
    return MelFilterbank(Tensor(weights, dtype=np.float64), fmin, fmax,
                         center_freqs_hz=hz_pts[1:-1].copy())


def _hann(n: int) -> np.ndarray:
    # periodic variant, the usual choice for STFT analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


_WIN = _hann(WINDOW)


def frame_count(n_samples: int) -> int:
    if n_samples < WINDOW:
        raise InvalidArgument(
            f"clip of {n_samples} samples is shorter than one {WINDOW}-sample window")
    return 1 + (n_samples - WINDOW) // HOP


def log_mel_array(samples: np.ndarray, fb: MelFilterbank) -> np.ndarray:
    """Numpy-level pipeline: [n] samples -> [n_mels, T] float32 log energies."""
    t = frame_count(len(samples))
    frames = np.lib.stride_tricks.sliding_window_view(samples, WINDOW)[::HOP][:t]
    spectrum = np.fft.rfft(frames * _WIN, n=N_FFT, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2          # [T, n_fft//2+1]
    mel = power @ fb.weights.data.T                          # [T, n_mels]
    return np.log(mel + LOG_FLOOR).T.astype(np.float32)


def log_mel(clip: AudioClip, fb: MelFilterbank | None = None) -> FeatureMap:
    """Full feature map for one clip, shape [1, n_mels, T]."""
    if fb is None:
        fb = default_filterbank()
    values = log_mel_array(clip.samples, fb)
    return FeatureMap(Tensor(values[np.newaxis]))


_default_fb: MelFilterbank | None = None


def default_filterbank() -> MelFilterbank:
    global _default_fb
    if _default_fb is None:
        _default_fb = mel_filterbank()
    return _default_fb


def write_feature_blob(fm: FeatureMap, path) -> None:
    """Serialize a FeatureMap: three little-endian int32 extents [1, F, T]
    followed by the float32 values in row-major order."""
    shape = np.asarray(fm.values.shape, dtype="<i4")
    data = np.ascontiguousarray(fm.values.data, dtype="<f4")
    with open(path, "wb") as f:
        f.write(shape.tobytes())
        f.write(data.tobytes())


def read_feature_blob(path) -> FeatureMap:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise AudioFormatError(f"{path}: feature blob too short for its header")
    shape = tuple(int(v) for v in np.frombuffer(raw[:12], dtype="<i4"))
    n = int(np.prod(shape))
    if len(raw) != 12 + 4 * n:
        raise AudioFormatError(f"{path}: feature blob size does not match header {shape}")
    values = np.frombuffer(raw[12:], dtype="<f4").reshape(shape)
    return FeatureMap(Tensor(values.copy()))
