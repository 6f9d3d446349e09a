"""WAV I/O, log-mel features, 16x16 patches, positional tables and mask plans."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000
WIN_LENGTH = 400   # 25 ms
HOP_LENGTH = 160   # 10 ms
N_FFT = 512
N_MELS = 128
PATCH = 16
F_PATCHES = N_MELS // PATCH
LOG_FLOOR = 1e-10
PATCH_EPS = 1e-6


class SampleRateError(ValueError):
    pass


def load_wav(path) -> np.ndarray:
    """Read a 16 kHz PCM16 or float32 WAV as mono float64 in [-1, 1]."""
    sr, data = wavfile.read(path)
    if sr != SAMPLE_RATE:
        raise SampleRateError(f"{path}: sample rate {sr} Hz, expected {SAMPLE_RATE} Hz")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        x = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return x


def write_wav(path, samples: np.ndarray) -> None:
    """Write mono PCM16 at 16 kHz; input is clipped to [-1, 1]."""
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype(np.int16)
    wavfile.write(path, SAMPLE_RATE, pcm)


# ----------------------------------------------------------------------------
# mel spectrogram


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank() -> np.ndarray:
    """(N_MELS, N_FFT//2+1) triangular HTK-mel filters over 0-8000 Hz, peak 1."""
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(SAMPLE_RATE / 2), N_MELS + 2))
    bins = np.arange(N_FFT // 2 + 1) * SAMPLE_RATE / N_FFT
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins[None, :] - lo) / (center - lo)
    down = (hi - bins[None, :]) / (hi - center)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def mel_centers() -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(SAMPLE_RATE / 2), N_MELS + 2))
    return edges[1:-1]


def frame_count(n_samples: int) -> int:
    """Frames produced for ``n_samples``: one per full hop, i.e. n // 160."""
    return n_samples // HOP_LENGTH


@dataclass
class MelFrames:
    frames: np.ndarray  # (time, 128) natural-log mel energies
    frame_rate: int = SAMPLE_RATE // HOP_LENGTH
    sample_rate: int = SAMPLE_RATE


def mel_spectrogram(samples: np.ndarray) -> MelFrames:
    """Log-mel energies: Hann 400 / hop 160 / FFT 512 / 128 bands / ln(P + 1e-10).

    The tail is zero-padded by ``WIN_LENGTH - HOP_LENGTH`` samples so a clip of
    ``n`` samples yields ``n // 160`` frames (10.24 s -> 1024 frames).
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.size < WIN_LENGTH:
        raise ValueError(f"need at least {WIN_LENGTH} mono samples, got shape {x.shape}")
    x = np.concatenate([x, np.zeros(WIN_LENGTH - HOP_LENGTH)])
    n_frames = (x.size - WIN_LENGTH) // HOP_LENGTH + 1
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(n_frames)[:, None]
    window = np.hanning(WIN_LENGTH + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(x[idx] * window, n=N_FFT, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    mel = power @ mel_filterbank().T
    return MelFrames(frames=np.log(mel + LOG_FLOOR))


# ----------------------------------------------------------------------------
# patches


@dataclass
class PatchGrid:
    patches: np.ndarray   # (N, 256), per-patch normalised, time-major
    t_patches: int
    f_patches: int
    means: np.ndarray     # (N,)
    stds: np.ndarray      # (N,)
    n_frames: int = 0     # frames before padding

    @property
    def n(self) -> int:
        return self.patches.shape[0]

    def time_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.t_patches), self.f_patches)

    def freq_index(self) -> np.ndarray:
        return np.tile(np.arange(self.f_patches), self.t_patches)


def per_patch_normalize(patch: np.ndarray):
    """Return ((patch - mean) / (std + 1e-6), mean, std) with population std."""
    p = np.asarray(patch, dtype=np.float64)
    mu = p.mean(axis=-1, keepdims=True)
    sd = p.std(axis=-1, keepdims=True)
    return (p - mu) / (sd + PATCH_EPS), mu[..., 0], sd[..., 0]


def patchify(mel: MelFrames) -> PatchGrid:
    frames = np.asarray(mel.frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != N_MELS:
        raise ValueError(f"expected (time, {N_MELS}) frames, got {frames.shape}")
    n_frames = frames.shape[0]
    padded_len = max(PATCH, -(-n_frames // PATCH) * PATCH)
    if padded_len != n_frames:
        frames = np.concatenate([frames, np.zeros((padded_len - n_frames, N_MELS))])
    t_p = padded_len // PATCH
    # (t, 16, f, 16) -> (t, f, 16, 16): each patch is 16 frames x 16 bands, row-major
    blocks = frames.reshape(t_p, PATCH, F_PATCHES, PATCH).transpose(0, 2, 1, 3)
    flat = blocks.reshape(t_p * F_PATCHES, PATCH * PATCH)
    normed, means, stds = per_patch_normalize(flat)
    return PatchGrid(normed, t_p, F_PATCHES, means, stds, n_frames)


def unpatchify(grid: PatchGrid, patches: np.ndarray | None = None) -> np.ndarray:
    """Invert :func:`patchify` back to the zero-padded (time, 128) matrix."""
    p = grid.patches if patches is None else patches
    raw = p * (grid.stds[:, None] + PATCH_EPS) + grid.means[:, None]
    blocks = raw.reshape(grid.t_patches, grid.f_patches, PATCH, PATCH).transpose(0, 2, 1, 3)
    return blocks.reshape(grid.t_patches * PATCH, grid.f_patches * PATCH)


def clip_to_grid(samples: np.ndarray) -> PatchGrid:
    return patchify(mel_spectrogram(samples))


# ----------------------------------------------------------------------------
# positional embeddings


@lru_cache(maxsize=64)
def _sinusoid_table(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.empty((n, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    table.setflags(write=False)
    return table


def sinusoid_table(n: int, dim: int) -> np.ndarray:
    """Fixed time table: [p, 2i] = sin(p / 10000^(2i/dim)), [p, 2i+1] = cos(...)."""
    if dim % 2:
        raise ValueError("positional dimension must be even")
    return _sinusoid_table(int(n), int(dim))


@dataclass
class PositionalEmbedding:
    time_table: np.ndarray
    freq_table: np.ndarray

    def at(self, t: int, f: int) -> np.ndarray:
        return self.time_table[t] + self.freq_table[f]


def positional_embed(t_patches: int, f_patches: int, dim: int, rng=None) -> PositionalEmbedding:
    """Fixed sinusoidal time rows plus freshly initialised N(0, 0.02^2) frequency rows."""
    time_table = sinusoid_table(t_patches, dim)
    rng = np.random.default_rng(0) if rng is None else rng
    return PositionalEmbedding(time_table, rng.normal(0.0, 0.02, size=(f_patches, dim)))


# ----------------------------------------------------------------------------
# mask / length plans


@dataclass
class MaskPlan:
    kept: list
    masked: list
    padded: list = field(default_factory=list)
    seed: int = 0

    @property
    def n_slots(self) -> int:
        return len(self.kept) + len(self.padded)


def kept_count(n: int, mask_ratio: float) -> int:
    return max(1, int(round(n * (1.0 - mask_ratio))))


def make_mask_plan(n: int, stage: str, target_len: int | None = None, mask_ratio: float = 0.8,
                   seed: int = 0) -> MaskPlan:
    """Kept / masked / padded partition for one clip of ``n`` patches.

    ``stage="mae"``: keep ``round(n * (1 - ratio))`` (>= 1) patches uniformly.
    ``stage="clap"``: sample ``target_len`` patches when ``n > target_len``,
    otherwise keep everything and add ``target_len - n`` pad slots, numbered
    ``n .. target_len - 1``. ``target_len=None`` keeps the whole sequence.
    """
    if n < 1:
        raise ValueError("need at least one patch")
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError("mask_ratio must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    if stage == "mae":
        k = kept_count(n, mask_ratio)
        kept = np.sort(rng.choice(n, size=k, replace=False)) if k < n else np.arange(n)
        masked = np.setdiff1d(np.arange(n), kept)
        return MaskPlan(kept.tolist(), masked.tolist(), [], seed)
    if stage == "clap":
        if target_len is None or n <= target_len:
            pad = 0 if target_len is None else target_len - n
            return MaskPlan(list(range(n)), [], list(range(n, n + pad)), seed)
        kept = np.sort(rng.choice(n, size=target_len, replace=False))
        masked = np.setdiff1d(np.arange(n), kept)
        return MaskPlan(kept.tolist(), masked.tolist(), [], seed)
    raise ValueError(f"unknown stage {stage!r}")
