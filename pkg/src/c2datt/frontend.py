"""Log mel-filterbank front-end and PCM16 WAV I/O."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

LOG_FLOOR = 1e-10


class AudioError(ValueError):
    """Malformed, unreadable or unsupported audio input."""


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    preemphasis: float = 0.97
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 64
    fmin: float = 20.0
    fmax: float = 7600.0

    @property
    def win_length(self) -> int:
        return int(round(self.win_ms * self.sample_rate / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000))

    def errors(self) -> list[str]:
        errs = []
        if self.sample_rate <= 0:
            errs.append("sample_rate must be positive")
        if not 0.0 <= self.preemphasis < 1.0:
            errs.append("preemphasis must lie in [0, 1)")
        if self.hop_length < 1 or self.win_length < 1:
            errs.append("window and hop must each span at least one sample")
        if self.n_fft < self.win_length:
            errs.append(f"n_fft ({self.n_fft}) is shorter than the window ({self.win_length} samples)")
        if self.n_mels < 1:
            errs.append("n_mels must be >= 1")
        if not 0.0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            errs.append("need 0 <= fmin < fmax <= sample_rate / 2")
        return errs

    def validate(self) -> "FeatureConfig":
        errs = self.errors()
        if errs:
            raise ValueError("; ".join(errs))
        return self

    @classmethod
    def from_mapping(cls, values: dict) -> "FeatureConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(kinds))
        if unknown:
            raise ValueError(f"unknown feature keys: {', '.join(unknown)}")
        casts = {"sample_rate": int, "n_fft": int, "n_mels": int}
        return cls(**{k: casts.get(k, float)(v) for k, v in values.items()})

    def to_mapping(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise AudioError("sample_rate must be positive")
        if not np.isfinite(self.samples).all():
            raise AudioError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


# ---------------------------------------------------------------------------
# WAV / feature file I/O
# ---------------------------------------------------------------------------

def read_wav(path: str | Path, expected_rate: int | None = 16000) -> Waveform:
    """Read a mono 16-bit PCM WAV file, scaling samples to [-1, 1)."""
    path = Path(path)
    if not path.is_file():
        raise AudioError(f"audio file not found: {path}")
    try:
        with wave.open(str(path), "rb") as wf:
            channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise AudioError(f"{path}: malformed WAV ({exc})") from exc
    if channels != 1 or width != 2:
        raise AudioError(f"{path}: expected mono 16-bit PCM, got {channels} channel(s) of {8 * width}-bit")
    if expected_rate is not None and rate != expected_rate:
        raise AudioError(f"{path}: sample rate {rate} Hz is not supported (need {expected_rate} Hz; no resampling)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path: str | Path, wav: Waveform) -> None:
    pcm = np.clip(np.round(wav.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(wav.sample_rate)
        wf.writeframes(pcm.tobytes())


def write_matrix(path: str | Path, matrix: np.ndarray) -> None:
    """Two little-endian u32 dims followed by row-major little-endian float32 data."""
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValueError("write_matrix expects a 2-D array")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *matrix.shape))
        fh.write(np.ascontiguousarray(matrix).tobytes())


def read_matrix(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise ValueError(f"{path}: truncated matrix header")
    rows, cols = struct.unpack_from("<II", blob)
    if len(blob) != 8 + 4 * rows * cols:
        raise ValueError(f"{path}: expected {rows}x{cols} floats, file size disagrees")
    return np.frombuffer(blob, dtype="<f4", offset=8).reshape(rows, cols).copy()


# ---------------------------------------------------------------------------
# feature pipeline
# ---------------------------------------------------------------------------

def preemphasize(wav: Waveform, alpha: float = 0.97) -> Waveform:
    if len(wav) == 0:
        raise AudioError("cannot pre-emphasize an empty waveform")
    if not 0.0 <= alpha < 1.0:
        raise ValueError("pre-emphasis coefficient must lie in [0, 1)")
    x = wav.samples
    y = np.empty_like(x)
    y[0] = x[0]
    y[1:] = x[1:] - alpha * x[:-1]
    return Waveform(y, wav.sample_rate)


def hamming(length: int) -> np.ndarray:
    n = np.arange(length)
    return 0.54 - 0.46 * np.cos(2 * np.pi * n / (length - 1))


def num_frames(num_samples: int, cfg: FeatureConfig) -> int:
    if num_samples < cfg.win_length:
        raise AudioError(f"utterance of {num_samples} samples is shorter than one window ({cfg.win_length})")
    return 1 + (num_samples - cfg.win_length) // cfg.hop_length


def frame_window(wav: Waveform, cfg: FeatureConfig) -> np.ndarray:
    """Slice into overlapping Hamming-windowed frames, shape (T, win_length)."""
    win, hop = cfg.win_length, cfg.hop_length
    t = num_frames(len(wav), cfg)
    frames = np.lib.stride_tricks.sliding_window_view(wav.samples, win)[::hop][:t]
    return frames * hamming(win)


def power_spectrum(frames: np.ndarray, n_fft: int) -> np.ndarray:
    """|rDFT|^2 of each zero-padded frame, shape (T, n_fft // 2 + 1)."""
    if frames.shape[-1] > n_fft:
        raise ValueError("frame longer than n_fft")
    spec = np.fft.rfft(frames, n=n_fft, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular filters with unit peak, equally spaced on the HTK mel scale.

    Edges are placed at continuous frequencies, so each triangle reaches
    exactly 1 only if its centre falls on a bin; the rows are rescaled to a
    unit maximum afterwards.
    """
    cfg.validate()
    n_bins = cfg.n_fft // 2 + 1
    freqs = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    lo, centre, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (centre - lo)
    falling = (hi - freqs) / (hi - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    peaks = fb.max(axis=1)
    if (peaks <= 0).any():
        empty = int(np.argmin(peaks))
        raise ValueError(f"mel filter {empty} covers no FFT bin; reduce n_mels or raise n_fft")
    return fb / peaks[:, None]


_FB_CACHE: dict[FeatureConfig, np.ndarray] = {}


def _cached_filterbank(cfg: FeatureConfig) -> np.ndarray:
    fb = _FB_CACHE.get(cfg)
    if fb is None:
        fb = _FB_CACHE[cfg] = mel_filterbank(cfg)
    return fb


def log_fbanks(wav: Waveform, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Log mel energies oriented frequency x time, shape (n_mels, T), float32."""
    if wav.sample_rate != cfg.sample_rate:
        raise AudioError(f"waveform is {wav.sample_rate} Hz but features expect {cfg.sample_rate} Hz")
    frames = frame_window(preemphasize(wav, cfg.preemphasis), cfg)
    mel = power_spectrum(frames, cfg.n_fft) @ _cached_filterbank(cfg).T
    return np.log(np.maximum(mel, LOG_FLOOR)).T.astype(np.float32)
