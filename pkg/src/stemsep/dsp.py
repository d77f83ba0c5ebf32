"""Signal processing: STFT analysis/synthesis, log1p features, Wiener
soft masks, and a simplified signal-to-distortion ratio.

The STFT uses a periodic Hann window of 2048 samples with hop 1024
(half-overlap satisfies the constant-overlap-add condition exactly) and
reflection padding of half a window on both ends, so the inverse
transform reconstructs interior samples to better than 1e-6 relative
RMS. Masking is a single-pass power-ratio soft mask applied to the
complex mixture with the mixture's phase; the SDR here is a plain
energy ratio over the whole track, not the full BSS-Eval decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_io import AudioClip
from .errors import DataError, ShapeError

WINDOW_SIZE = 2048
HOP_SIZE = 1024
FREQ_BINS = WINDOW_SIZE // 2 + 1
WIENER_POWER_FLOOR = 1e-10
SDR_CAP_DB = 100.0


def hann_window(size: int = WINDOW_SIZE) -> np.ndarray:
    """Periodic Hann window: w[n] + w[n + size/2] == 1 at half-overlap."""
    n = np.arange(size)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / size))


@dataclass
class ComplexSpectrogram:
    """Complex STFT of one audio channel: ``data`` is (bins, frames)."""

    data: np.ndarray
    sample_rate: int
    length: int  # samples in the originating signal; drives exact-length synthesis
    window_size: int = WINDOW_SIZE
    hop_size: int = HOP_SIZE

    @property
    def bins(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.data)


def _as_mono_samples(clip) -> tuple[np.ndarray, int]:
    if isinstance(clip, AudioClip):
        if clip.channels != 1:
            raise DataError("stft expects a single-channel clip; split channels first")
        return clip.channel(0), clip.sample_rate
    samples = np.asarray(clip, dtype=np.float64)
    if samples.ndim != 1:
        raise DataError(f"stft expects a 1-D signal, got shape {samples.shape}")
    return samples, 0


def stft(clip, sample_rate: int | None = None) -> ComplexSpectrogram:
    """Hann-windowed STFT with reflection padding of window/2 per side.

    Frame count is 1 + floor((N + window - window) / hop) = 1 + floor(N / hop)
    for an N-sample input.
    """
    samples, rate = _as_mono_samples(clip)
    if sample_rate is not None:
        rate = sample_rate
    n = samples.size
    if n < WINDOW_SIZE:
        raise DataError(f"signal of {n} samples is shorter than one {WINDOW_SIZE}-sample window")
    half = WINDOW_SIZE // 2
    padded = np.pad(samples, half, mode="reflect")
    frames = 1 + (padded.size - WINDOW_SIZE) // HOP_SIZE
    window = hann_window()
    starts = np.arange(frames) * HOP_SIZE
    segments = padded[starts[:, None] + np.arange(WINDOW_SIZE)] * window
    spec = np.fft.rfft(segments, n=WINDOW_SIZE, axis=1).T  # (bins, frames)
    return ComplexSpectrogram(spec, rate, n)


def istft(spec: ComplexSpectrogram) -> AudioClip:
    """Weighted overlap-add inverse with the analysis window as synthesis
    window, normalized by the accumulated squared-window envelope."""
    if spec.bins != spec.window_size // 2 + 1:
        raise ShapeError(f"spectrogram has {spec.bins} bins, expected {spec.window_size // 2 + 1}")
    window = hann_window(spec.window_size)
    frames = spec.frames
    hop = spec.hop_size
    total = (frames - 1) * hop + spec.window_size
    out = np.zeros(total)
    envelope = np.zeros(total)
    segments = np.fft.irfft(spec.data.T, n=spec.window_size, axis=1) * window
    wsq = window * window
    for t in range(frames):
        start = t * hop
        out[start:start + spec.window_size] += segments[t]
        envelope[start:start + spec.window_size] += wsq
    out /= np.maximum(envelope, 1e-12)
    half = spec.window_size // 2
    length = spec.length if spec.length else max(total - 2 * half, 0)
    samples = out[half:half + length]
    if samples.size < length:
        samples = np.pad(samples, (0, length - samples.size))
    return AudioClip(samples, spec.sample_rate)


def log1p_magnitude(spec: ComplexSpectrogram) -> np.ndarray:
    """The model's feature map: log(1 + |X|)."""
    return np.log1p(np.abs(spec.data))


def magnitude_from_features(features: np.ndarray) -> np.ndarray:
    """Invert the feature map back to magnitudes, clipping the negative
    excursions a leaky output nonlinearity can produce."""
    return np.maximum(np.expm1(features), 0.0)


def wiener_masks(source_mags, mixture: ComplexSpectrogram) -> list[ComplexSpectrogram]:
    """Single-pass power-ratio soft masks applied to the complex mixture.

    mask_s = mag_s^2 / max(sum_j mag_j^2, floor); the floor only binds in
    (near-)silent bins, so wherever it does not, the masked sources sum
    exactly to the mixture bin. The mixture phase is inherited.
    """
    mags = np.asarray(source_mags, dtype=np.float64)
    if mags.ndim != 3:
        raise ShapeError(f"expected source magnitudes of shape (S, F, T), got {mags.shape}")
    if mags.shape[1:] != mixture.data.shape:
        raise ShapeError(f"source magnitudes {mags.shape[1:]} do not match mixture {mixture.data.shape}")
    if np.any(mags < 0):
        raise DataError("negative magnitudes passed to wiener_masks")
    power = mags * mags
    denom = np.maximum(power.sum(axis=0), WIENER_POWER_FLOOR)
    outputs = []
    for s in range(mags.shape[0]):
        masked = (power[s] / denom) * mixture.data
        outputs.append(ComplexSpectrogram(masked, mixture.sample_rate, mixture.length,
                                          mixture.window_size, mixture.hop_size))
    return outputs


def sdr(reference: AudioClip, estimate: AudioClip) -> float | None:
    """Energy-ratio SDR in dB over the full track, averaged per channel.

    10*log10(|s|^2 / |s - s_hat|^2), capped to [-100, +100] dB. Returns
    None ("undefined") when the reference is silent; silent channels of a
    stereo reference are likewise excluded from the channel average.
    """
    if reference.num_samples != estimate.num_samples or reference.channels != estimate.channels:
        raise ShapeError(
            f"reference {reference.data.shape} and estimate {estimate.data.shape} do not align")
    values = []
    for c in range(reference.channels):
        s = reference.channel(c)
        err = s - estimate.channel(c)
        signal_power = float(s @ s)
        if signal_power == 0.0:
            continue
        noise_power = float(err @ err)
        if noise_power == 0.0:
            values.append(SDR_CAP_DB)
            continue
        db = 10.0 * np.log10(signal_power / noise_power)
        values.append(float(np.clip(db, -SDR_CAP_DB, SDR_CAP_DB)))
    if not values:
        return None
    return float(np.mean(values))
