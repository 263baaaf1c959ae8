"""MFCC + log-energy features (40 + 1 per 10 ms frame) and the feature cache."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct


class AudioFormatError(ValueError):
    pass


class SignalTooShort(ValueError):
    pass


@dataclass(frozen=True)
class MfccConfig:
    window_ms: float = 40.0
    step_ms: float = 10.0
    n_mfcc: int = 40
    n_mel_filters: int = 40
    pre_emphasis: float = 0.97
    fft_size: int | None = None  # next power of two >= window
    energy_floor: float = 1e-10

    def __post_init__(self):
        if self.window_ms < self.step_ms:
            raise ValueError("window must be at least as long as the step")
        if self.n_mfcc > self.n_mel_filters:
            raise ValueError("n_mfcc cannot exceed n_mel_filters")

    def window_samples(self, sample_rate: int) -> int:
        return int(round(self.window_ms * sample_rate / 1000.0))

    def step_samples(self, sample_rate: int) -> int:
        return int(round(self.step_ms * sample_rate / 1000.0))

    def nfft(self, sample_rate: int) -> int:
        w = self.window_samples(sample_rate)
        n = self.fft_size or 1 << (w - 1).bit_length()
        if n < w:
            raise ValueError(f"fft_size {n} is shorter than the window ({w} samples)")
        return n


@dataclass
class PcmSignal:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")
        if not np.isfinite(self.samples).all():
            raise ValueError("signal contains non-finite samples")


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # (T, 41): 40 MFCC then log energy
    utt_id: str = ""

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def frame_count(n_samples: int, window: int, step: int) -> int:
    return 1 + (n_samples - window) // step


def frame_signal(signal: PcmSignal, config: MfccConfig = MfccConfig()) -> np.ndarray:
    """Pre-emphasise, cut into overlapping frames and apply a Hamming window.

    Returns (n_frames, window_samples); n_frames = 1 + floor((L - W) / S).
    """
    x = signal.samples
    W = config.window_samples(signal.sample_rate)
    S = config.step_samples(signal.sample_rate)
    if len(x) < W:
        raise SignalTooShort(f"signal has {len(x)} samples, one window needs {W}")
    y = np.empty_like(x)
    y[0] = x[0]
    y[1:] = x[1:] - config.pre_emphasis * x[:-1]
    n = frame_count(len(y), W, S)
    idx = np.arange(W)[None, :] + S * np.arange(n)[:, None]
    return y[idx] * np.hamming(W)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_filters: int, nfft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters, equally spaced on the mel scale from 0 to Nyquist.

    Weights are evaluated at each FFT bin's exact frequency, which keeps the
    narrow low-frequency filters non-degenerate. Shape (n_filters, nfft//2+1).
    """
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_filters + 2))
    freqs = np.arange(nfft // 2 + 1) * sample_rate / nfft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def filter_centers(n_filters: int, sample_rate: int) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_filters + 2))[1:-1]


def power_spectrum(frames: np.ndarray, nfft: int) -> np.ndarray:
    return np.abs(np.fft.rfft(frames, nfft)) ** 2 / nfft


def filterbank_energies(frames: np.ndarray, config: MfccConfig = MfccConfig(),
                        sample_rate: int = 16000) -> np.ndarray:
    nfft = config.nfft(sample_rate)
    fb = mel_filterbank(config.n_mel_filters, nfft, sample_rate)
    return power_spectrum(frames, nfft) @ fb.T


def mfcc(frames: np.ndarray, config: MfccConfig = MfccConfig(), sample_rate: int = 16000,
         raw_energy: np.ndarray | None = None) -> np.ndarray:
    """40 cepstral coefficients (log mel energies -> DCT-II) plus log frame energy.

    Frame energy is the sum of squares of the windowed frame unless
    ``raw_energy`` supplies it. Every log is floored at ``log(energy_floor)``.
    """
    floor = config.energy_floor
    fbank = np.log(np.maximum(filterbank_energies(frames, config, sample_rate), floor))
    ceps = dct(fbank, type=2, axis=1, norm="ortho")[:, :config.n_mfcc]
    energy = (frames ** 2).sum(axis=1) if raw_energy is None else raw_energy
    log_e = np.log(np.maximum(energy, floor))
    return np.concatenate([ceps, log_e[:, None]], axis=1)


def compute_features(signal: PcmSignal, config: MfccConfig = MfccConfig(), utt_id: str = "") -> FeatureMatrix:
    frames = frame_signal(signal, config)
    return FeatureMatrix(mfcc(frames, config, signal.sample_rate), utt_id)


def read_wav(path) -> PcmSignal:
    """Read a 16-bit little-endian PCM mono WAV file."""
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            comp = w.getcomptype()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as e:
        raise AudioFormatError(f"{path}: unreadable WAV ({e})") from None
    if comp != "NONE":
        raise AudioFormatError(f"{path}: compressed WAV ({comp}) not supported")
    if channels != 1:
        raise AudioFormatError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit samples, got {8 * width}-bit")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return PcmSignal(samples, rate)


def write_wav(path, signal: PcmSignal) -> None:
    pcm = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(signal.sample_rate)
        w.writeframes(pcm.tobytes())


def extract_features(wav_path, config: MfccConfig = MfccConfig()) -> FeatureMatrix:
    return compute_features(read_wav(wav_path), config, Path(wav_path).stem)


# ---------------------------------------------------------------- cache file

CACHE_MAGIC = b"SLTF"


def write_feature_cache(path, feats: list[FeatureMatrix]) -> None:
    parts = [CACHE_MAGIC, struct.pack("<I", len(feats))]
    for f in feats:
        raw = f.utt_id.encode("utf-8")
        T, n = f.frames.shape
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<II", T, n))
        parts.append(np.ascontiguousarray(f.frames, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_feature_cache(path) -> dict[str, FeatureMatrix]:
    buf = Path(path).read_bytes()
    if buf[:4] != CACHE_MAGIC:
        raise AudioFormatError(f"{path}: not a feature cache (bad magic)")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    out: dict[str, FeatureMatrix] = {}
    for _ in range(count):
        (k,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        utt = buf[pos:pos + k].decode("utf-8")
        pos += k
        T, n = struct.unpack_from("<II", buf, pos)
        pos += 8
        frames = np.frombuffer(buf, dtype="<f4", count=T * n, offset=pos).reshape(T, n)
        pos += 4 * T * n
        out[utt] = FeatureMatrix(frames.astype(np.float32), utt)
    return out
