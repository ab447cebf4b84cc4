"""On-the-fly chain augmentation and speed perturbation.

An effect chain is an ordered list of effects, each switched on
independently with its own probability. Every effect draws from its own
child stream of ``SeedSequence(seed)``, so whether one effect fires never
changes the random numbers another effect sees.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import fftconvolve

from .features import Waveform


def _power(x: np.ndarray) -> float:
    return float(np.mean(x * x)) if x.size else 0.0


def apply_gain(wav: Waveform, gain_db: float) -> Waveform:
    return Waveform(wav.samples * 10.0 ** (gain_db / 20.0), wav.sample_rate)


def fit_length(noise: np.ndarray, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Loop a short noise or take a (random) crop of a long one."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.size < n:
        return np.tile(noise, -(-n // noise.size))[:n]
    off = 0 if rng is None or noise.size == n else int(rng.integers(0, noise.size - n + 1))
    return noise[off:off + n]


def noise_scale(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    """Factor bringing ``noise`` to ``snr_db`` below ``signal`` in mean power."""
    pn = _power(noise)
    if pn == 0:
        raise ValueError("noise has zero energy")
    return float(np.sqrt(_power(signal) / (pn * 10.0 ** (snr_db / 10.0))))


def add_noise_at_snr(wav: Waveform, noise, snr_db: float, seed: int | None = 0) -> Waveform:
    noise = noise.samples if isinstance(noise, Waveform) else np.asarray(noise, dtype=np.float64)
    if _power(noise) == 0:
        raise ValueError("noise has zero energy")
    rng = np.random.default_rng(seed)
    n = fit_length(noise, len(wav), rng)
    return Waveform(wav.samples + noise_scale(wav.samples, n, snr_db) * n, wav.sample_rate)


def convolve_rir(wav: Waveform, rir) -> Waveform:
    """Reverberate, keep the input's length and RMS, and align on the RIR's direct path."""
    rir = rir.samples if isinstance(rir, Waveform) else np.asarray(rir, dtype=np.float64)
    if rir.size == 0 or not np.any(rir):
        raise ValueError("RIR is empty or all zeros")
    peak = int(np.argmax(np.abs(rir)))
    x = wav.samples
    y = fftconvolve(x, rir)[peak:peak + x.size]
    rms_in, rms_out = np.sqrt(_power(x)), np.sqrt(_power(y))
    if rms_out > 0:
        y = y * (rms_in / rms_out)
    return Waveform(y, wav.sample_rate)


def speed_perturb(wav: Waveform, factor: float) -> Waveform:
    """Linear-interpolation resampling; changes tempo and pitch together."""
    if factor <= 0:
        raise ValueError("speed factor must be positive")
    x = wav.samples
    n_out = int(round(x.size / factor))
    t = np.arange(n_out) * factor
    return Waveform(np.interp(t, np.arange(x.size), x), wav.sample_rate)


STRETCH_RANGE = (0.8, 1.25)


def time_stretch(wav: Waveform, factor: float, frame: int = 512, tolerance: int | None = None) -> Waveform:
    """WSOLA time stretch: output length ``round(N / factor)``, pitch unchanged.

    ``factor > 1`` speeds up (shorter output).
    """
    lo, hi = STRETCH_RANGE
    if not lo <= factor <= hi:
        raise ValueError(f"stretch factor {factor} outside supported range [{lo}, {hi}]")
    x = wav.samples
    n = x.size
    n_out = int(round(n / factor))
    hop = frame // 2
    tol = hop // 2 if tolerance is None else tolerance
    window = np.hanning(frame + 2)[1:-1]
    pad = frame + tol
    xp = np.pad(x, (pad, pad + frame + int(np.ceil(n_out * factor)) + hop))
    n_frames = (n_out + 2 * frame) // hop + 1
    out = np.zeros(n_frames * hop + frame)
    norm = np.zeros_like(out)
    prev = pad - frame  # frame 0 starts on padding so the signal start is fully covered
    for k in range(n_frames):
        nominal = int(round(pad - frame + k * hop * factor))
        if k == 0:
            pos = nominal
        else:
            target = xp[prev + hop: prev + hop + frame]
            lo_i = max(nominal - tol, 0)
            region = xp[lo_i: nominal + tol + frame]
            corr = np.correlate(region, target, mode="valid")
            energy = np.convolve(region * region, np.ones(frame), mode="valid")
            corr = corr / np.sqrt(np.maximum(energy, 1e-20))
            deltas = np.arange(corr.size) + lo_i - nominal
            # prefer the smallest shift among near-ties
            best = np.flatnonzero(corr >= corr.max() - 1e-12 * max(1.0, abs(corr.max())))
            pos = nominal + int(deltas[best[np.argmin(np.abs(deltas[best]))]])
        out[k * hop: k * hop + frame] += window * xp[pos: pos + frame]
        norm[k * hop: k * hop + frame] += window
        prev = pos
    y = np.divide(out, norm, out=np.zeros_like(out), where=norm > 1e-8)
    # frame 0 maps input index -frame to output 0
    start = int(round(frame / factor))
    return Waveform(y[start:start + n_out], wav.sample_rate)


@dataclass(frozen=True)
class Effect:
    """One chain stage. ``kind`` is gain | white_noise | reverb_noise | time_stretch."""

    kind: str
    prob: float
    low: float = 0.0
    high: float = 0.0
    rirs: tuple = ()
    noises: tuple = ()
    snr_low: float = 0.0
    snr_high: float = 20.0

    def __post_init__(self):
        if self.kind not in ("gain", "white_noise", "reverb_noise", "time_stretch"):
            raise ValueError(f"unknown effect kind {self.kind!r}")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"{self.kind}: probability {self.prob} outside [0, 1]")
        if self.low > self.high or self.snr_low > self.snr_high:
            raise ValueError(f"{self.kind}: empty parameter range")
        if self.kind == "reverb_noise" and self.prob > 0 and not (self.rirs or self.noises):
            raise ValueError("reverb_noise effect can activate but has no RIR or noise sources")
        if self.kind == "time_stretch" and not (STRETCH_RANGE[0] <= self.low and self.high <= STRETCH_RANGE[1]):
            raise ValueError(f"time_stretch range [{self.low}, {self.high}] outside {STRETCH_RANGE}")

    def apply(self, wav: Waveform, rng: np.random.Generator) -> Waveform:
        if self.kind == "gain":
            return apply_gain(wav, rng.uniform(self.low, self.high))
        if self.kind == "white_noise":
            snr = rng.uniform(self.low, self.high)
            noise = rng.standard_normal(len(wav))
            if _power(wav.samples) == 0:
                return wav
            return Waveform(wav.samples + noise_scale(wav.samples, noise, snr) * noise, wav.sample_rate)
        if self.kind == "reverb_noise":
            out = wav
            if self.rirs:
                out = convolve_rir(out, self.rirs[int(rng.integers(len(self.rirs)))])
            if self.noises:
                noise = self.noises[int(rng.integers(len(self.noises)))]
                out = add_noise_at_snr(out, noise, rng.uniform(self.snr_low, self.snr_high),
                                       int(rng.integers(2**63)))
            return out
        return time_stretch(wav, rng.uniform(self.low, self.high))


@dataclass(frozen=True)
class EffectChain:
    effects: tuple[Effect, ...] = field(default_factory=tuple)

    def activations(self, seed: int) -> np.ndarray:
        """Which effects fire for ``seed``, without touching any audio."""
        return np.array([self._rng(seed, i).random() < e.prob for i, e in enumerate(self.effects)])

    @staticmethod
    def _rng(seed: int, i: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))


def chain_apply(wav: Waveform, chain: EffectChain, seed: int) -> Waveform:
    out = wav
    for i, effect in enumerate(chain.effects):
        rng = chain._rng(seed, i)
        if rng.random() < effect.prob:
            out = effect.apply(out, rng)
    return Waveform(np.clip(out.samples, -1.0, 1.0), out.sample_rate)


def standard_chain(rirs: Sequence = (), noises: Sequence = (), gain_db: float = 6.0,
                white_snr: tuple[float, float] = (0.0, 20.0),
                noise_snr: tuple[float, float] = (0.0, 20.0),
                stretch: tuple[float, float] = (0.9, 1.1)) -> EffectChain:
    """Gain 0.2, white noise 0.2, RIR + noise 0.6, time stretch 0.2, in that order."""
    return EffectChain((
        Effect("gain", 0.2, -gain_db, gain_db),
        Effect("white_noise", 0.2, *white_snr),
        Effect("reverb_noise", 0.6, rirs=tuple(rirs), noises=tuple(noises),
               snr_low=noise_snr[0], snr_high=noise_snr[1]),
        Effect("time_stretch", 0.2, *stretch),
    ))


def utterance_seed(master_seed: int, utt_id: str) -> int:
    """First 8 bytes (big-endian) of sha256(f"{master_seed}:{utt_id}")."""
    digest = hashlib.sha256(f"{master_seed}:{utt_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


SPEED_FACTORS = (0.9, 1.1)


def speed_speaker_id(speaker: str, factor: float) -> str:
    """Perturbed copies count as new speakers."""
    return f"{speaker}-sp{factor:g}"
