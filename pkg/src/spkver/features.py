"""Log-mel filterbank features, cepstral mean normalization and WAV I/O.

Framing uses a Hamming window, power spectra come from a real FFT, and
filters are HTK-style triangles evaluated on the exact FFT bin
frequencies. There is no pre-emphasis, dither or VAD, so extraction is
fully deterministic.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(x)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def read_wav(path) -> Waveform:
    """Read mono 16-bit PCM WAV; anything else is rejected."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getcomptype() != "NONE":
                raise ValueError(f"{path}: compressed WAV ({fh.getcomptype()}) not supported")
            if fh.getnchannels() != 1:
                raise ValueError(f"{path}: expected mono, got {fh.getnchannels()} channels")
            if fh.getsampwidth() != 2:
                raise ValueError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
            sr = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise ValueError(f"{path}: not a PCM RIFF WAV ({exc})") from exc
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(data, sr)


def write_wav(path, wav: Waveform) -> None:
    pcm = np.clip(np.round(wav.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(wav.sample_rate))
        fh.writeframes(pcm.tobytes())


@dataclass(frozen=True)
class FbankConfig:
    n_mels: int = 96
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int | None = None  # defaults to next power of two >= window
    f_min: float = 20.0
    f_max: float | None = None  # defaults to Nyquist
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def resolve(self, sample_rate: int) -> tuple[int, int, int, float, float]:
        """(window, hop, n_fft, f_min, f_max) in samples/Hz for ``sample_rate``."""
        win = int(round(sample_rate * self.win_ms / 1000.0))
        hop = int(round(sample_rate * self.hop_ms / 1000.0))
        n_fft = self.n_fft or 1 << (win - 1).bit_length()
        if n_fft < win or n_fft & (n_fft - 1):
            raise ValueError(f"n_fft={n_fft} must be a power of two >= window length {win}")
        f_max = sample_rate / 2 if self.f_max is None else self.f_max
        if not self.f_min < f_max <= sample_rate / 2:
            raise ValueError(f"need f_min < f_max <= {sample_rate / 2}, got {self.f_min}, {f_max}")
        return win, hop, n_fft, self.f_min, f_max


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    edges = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    return mel_to_hz(edges[1:-1])


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, f_min: float, f_max: float) -> np.ndarray:
    """Triangular filters ``[n_mels, n_fft//2 + 1]``, unit peak, linear in mel."""
    edges = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    bin_mel = hz_to_mel(np.arange(n_fft // 2 + 1) * sample_rate / n_fft)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_mel[None] - left) / (center - left)
    down = (right - bin_mel[None]) / (right - center)
    return np.maximum(0.0, np.minimum(up, down))


def num_frames(n_samples: int, win: int, hop: int) -> int:
    return 1 + (n_samples - win) // hop


def frame_signal(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = num_frames(x.size, win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def power_spectrum(frames: np.ndarray, n_fft: int) -> np.ndarray:
    """One-sided |FFT|^2 of each (already windowed) frame."""
    return np.abs(np.fft.rfft(frames, n=n_fft, axis=-1)) ** 2


def log_fbank(wav: Waveform, cfg: FbankConfig = FbankConfig()) -> np.ndarray:
    """Log mel energies ``[T, n_mels]`` with ``T = 1 + (N - win) // hop``."""
    win, hop, n_fft, f_min, f_max = cfg.resolve(wav.sample_rate)
    if len(wav) < win:
        raise ValueError(f"waveform has {len(wav)} samples; need at least {win} "
                         f"({cfg.win_ms} ms at {wav.sample_rate} Hz)")
    frames = frame_signal(wav.samples, win, hop) * np.hamming(win)
    fb = mel_filterbank(cfg.n_mels, n_fft, wav.sample_rate, f_min, f_max)
    energies = power_spectrum(frames, n_fft) @ fb.T
    return np.log(np.maximum(energies, cfg.log_floor))


def cmn(feats: np.ndarray) -> np.ndarray:
    """Subtract the per-dimension mean over time."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValueError(f"cmn expects [T >= 1, n_mels], got {feats.shape}")
    return feats - feats.mean(axis=0, keepdims=True)


def read_manifest(path) -> list[list[str]]:
    """Tab-separated manifest lines, blank lines skipped."""
    rows = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            raise ValueError(f"{path}:{ln}: expected utt_id<TAB>speaker_id<TAB>path")
        rows.append(parts)
    return rows
