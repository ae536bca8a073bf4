"""Signal-processing front end.

Pipeline: windowed-sinc resampling to 16 kHz, a 64-channel gammatone
spectrogram (1024-sample Hann window, hop 256, FFT length 2048), log
compression, global z-normalization fit on training data only, and
splitting into fixed-width patches.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

WINDOW = 1024
HOP = 256
FFT_LEN = 2048
N_CHANNELS = 64
LOG_EPS = 1e-10

PATCH_WIDTHS = (32, 64, 96, 128, 160)

_SINC_ZEROS = 32  # kernel half-width in zero crossings of the low-pass


def n_frames(n_samples: int, window: int = WINDOW, hop: int = HOP) -> int:
    """Frame-count law: floor((L - window)/hop) + 1 for L >= window."""
    if n_samples < window:
        raise ParameterError(f"need at least {window} samples, got {n_samples}")
    return (n_samples - window) // hop + 1


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def resample(samples: np.ndarray, src_rate: int, dst_rate: int = 16000) -> np.ndarray:
    """Band-limited windowed-sinc resampling.

    Anti-alias low-pass sits at min(src, dst)/2; the output holds exactly
    round(len * dst / src) samples. Empty input yields empty output.
    """
    if src_rate <= 0 or dst_rate <= 0:
        raise ParameterError("sample rates must be positive")
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    if src_rate == dst_rate:
        return x.copy()

    n_out = int(round(x.size * dst_rate / src_rate))
    ratio = dst_rate / src_rate
    fc = min(1.0, ratio)  # cutoff as a fraction of the input Nyquist
    half = int(np.ceil(_SINC_ZEROS / fc))

    out = np.empty(n_out, dtype=np.float64)
    offsets = np.arange(-half, half + 1)
    block = max(1, int(4e6 / (2 * half + 1)))  # bound the gather matrix size
    for lo in range(0, n_out, block):
        hi = min(lo + block, n_out)
        centers = np.arange(lo, hi, dtype=np.float64) / ratio
        base = np.floor(centers).astype(np.int64)
        idx = base[:, None] + offsets[None, :]
        t = idx - centers[:, None]
        u = t / half
        window = (0.42 + 0.5 * np.cos(np.pi * u) + 0.08 * np.cos(2 * np.pi * u)) * (np.abs(u) <= 1.0)
        kernel = fc * np.sinc(fc * t) * window
        valid = (idx >= 0) & (idx < x.size)
        gathered = x[np.clip(idx, 0, x.size - 1)] * valid
        out[lo:hi] = np.einsum("ij,ij->i", gathered, kernel)
    return out


# ---------------------------------------------------------------------------
# Gammatone filterbank
# ---------------------------------------------------------------------------


def erb_rate(freq_hz):
    """ERB-rate scale value for a frequency in Hz."""
    return 21.4 * np.log10(0.00437 * np.asarray(freq_hz, dtype=np.float64) + 1.0)


def erb_rate_inverse(erb):
    return (np.power(10.0, np.asarray(erb, dtype=np.float64) / 21.4) - 1.0) / 0.00437


def erb_bandwidth(freq_hz):
    """Equivalent rectangular bandwidth (Glasberg & Moore) in Hz."""
    return 24.7 * (0.00437 * np.asarray(freq_hz, dtype=np.float64) + 1.0)


@dataclass
class GammatoneBank:
    """FFT-bin weighting matrix implementing a 4th-order gammatone bank."""

    n_channels: int
    fft_len: int
    sample_rate: int
    f_min: float
    center_freqs: np.ndarray  # (n_channels,), strictly increasing
    weights: np.ndarray  # (n_channels, fft_len//2 + 1), nonnegative


def build_gammatone_bank(
    n_channels: int = N_CHANNELS,
    fft_len: int = FFT_LEN,
    sample_rate: int = 16000,
    f_min: float = 50.0,
) -> GammatoneBank:
    """Construct the bank with ERB-uniform center frequencies.

    Centers are the interior points of an (n+2)-point grid on the ERB-rate
    scale between f_min and Nyquist, so the first lies strictly above f_min
    and the last strictly below Nyquist. Each row is the unit-peak 4th-order
    gammatone magnitude response sampled at the FFT bin frequencies.
    """
    if n_channels < 1:
        raise ParameterError("n_channels must be >= 1")
    nyquist = sample_rate / 2.0
    if f_min >= nyquist:
        raise ParameterError(f"f_min {f_min} must be below Nyquist {nyquist}")

    grid = np.linspace(erb_rate(f_min), erb_rate(nyquist), n_channels + 2)
    centers = erb_rate_inverse(grid[1:-1])

    bin_freqs = np.arange(fft_len // 2 + 1) * (sample_rate / fft_len)
    bw = 1.019 * erb_bandwidth(centers)
    detune = (bin_freqs[None, :] - centers[:, None]) / bw[:, None]
    weights = np.power(1.0 + detune**2, -2.0)
    weights /= weights.max(axis=1, keepdims=True)
    return GammatoneBank(
        n_channels=n_channels,
        fft_len=fft_len,
        sample_rate=sample_rate,
        f_min=f_min,
        center_freqs=centers,
        weights=weights,
    )


# ---------------------------------------------------------------------------
# Spectrograms and patches
# ---------------------------------------------------------------------------


@dataclass
class NormStats:
    """Global mean/std of training-fold log-spectrogram values."""

    mean: float
    std: float


@dataclass
class Spectrogram:
    """Log-compressed (optionally normalized) gammatone spectrogram."""

    values: np.ndarray  # (n_channels, T)
    entity_id: str = ""
    frame_hop: int = HOP
    window: int = WINDOW


@dataclass
class Patch:
    """A fixed-width slice of a spectrogram."""

    values: np.ndarray  # (n_channels, width)
    entity_id: str = ""
    index: int = 0


def gammatone_spectrogram(
    samples: np.ndarray,
    bank: GammatoneBank,
    stats: NormStats | None = None,
    entity_id: str = "",
) -> Spectrogram:
    """Hann-windowed power STFT mapped through the gammatone bank.

    Frames of 1024 samples (hop 256) are zero-padded to the bank's FFT
    length; channel energies are log(x + 1e-10) compressed and, when stats
    are given, normalized to (v - mean)/std.
    """
    x = np.asarray(samples, dtype=np.float64)
    frames = n_frames(x.size)
    strided = np.lib.stride_tricks.sliding_window_view(x, WINDOW)[::HOP][:frames]
    windowed = strided * np.hanning(WINDOW)
    spectrum = np.fft.rfft(windowed, n=bank.fft_len, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    values = np.log(bank.weights @ power.T + LOG_EPS)
    if stats is not None:
        values = (values - stats.mean) / stats.std
    return Spectrogram(values=values, entity_id=entity_id)


def fit_norm_stats(spectrograms) -> NormStats:
    """Global mean/std over all cells of the given spectrograms.

    The std is floored at 1e-6. Fit this on the training fold only.
    """
    arrays = [
        np.asarray(s.values if isinstance(s, Spectrogram) else s, dtype=np.float64)
        for s in spectrograms
    ]
    if not arrays:
        raise ParameterError("fit_norm_stats needs at least one spectrogram")
    total = sum(a.size for a in arrays)
    mean = sum(a.sum() for a in arrays) / total
    var = sum(((a - mean) ** 2).sum() for a in arrays) / total
    return NormStats(mean=float(mean), std=max(float(np.sqrt(var)), 1e-6))


def patchify(spec: Spectrogram | np.ndarray, width: int) -> list[Patch]:
    """Split a spectrogram into `width`-frame patches.

    Non-overlapping windows start at frame 0; a remainder produces one final
    right-aligned patch overlapping its neighbour. Spectrograms shorter than
    `width` yield a single patch tiled cyclically to full width.
    """
    if width < 1:
        raise ParameterError("patch width must be >= 1")
    if isinstance(spec, Spectrogram):
        values, entity_id = spec.values, spec.entity_id
    else:
        values, entity_id = np.asarray(spec), ""
    t = values.shape[1]
    if t < 1:
        raise ParameterError("spectrogram has no frames")

    if t < width:
        tiled = values[:, np.arange(width) % t]
        return [Patch(values=tiled, entity_id=entity_id, index=0)]

    starts = list(range(0, t - width + 1, width))
    if t % width != 0:
        starts.append(t - width)
    return [
        Patch(values=values[:, s : s + width], entity_id=entity_id, index=i)
        for i, s in enumerate(starts)
    ]


# ---------------------------------------------------------------------------
# Feature cache files
# ---------------------------------------------------------------------------

_CACHE_MAGIC = b"GSPC"
_CACHE_VERSION = 1


def write_feature(path, values: np.ndarray) -> None:
    """Write one entity's feature matrix: GSPC header + row-major f32le."""
    a = np.ascontiguousarray(values, dtype="<f4")
    if a.ndim != 2:
        raise ParameterError("feature matrix must be 2-D")
    header = struct.pack("<4sHII", _CACHE_MAGIC, _CACHE_VERSION, a.shape[0], a.shape[1])
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(header + a.tobytes())
    tmp.replace(path)  # atomic publish so concurrent jobs share caches


def read_feature(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 14:
        raise FormatError(f"{path}: truncated feature file")
    magic, version, rows, cols = struct.unpack_from("<4sHII", data, 0)
    if magic != _CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _CACHE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = np.frombuffer(data, dtype="<f4", offset=14)
    if body.size != rows * cols:
        raise FormatError(f"{path}: payload size mismatch")
    return body.reshape(rows, cols).astype(np.float64)


def write_feature_index(path, rows) -> None:
    """Index CSV over cached features: entity_id,path,rows,cols,label."""
    lines = ["entity_id,path,rows,cols,label"]
    lines += [f"{eid},{p},{r},{c},{label}" for eid, p, r, c, label in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_feature_index(path) -> list[tuple[str, str, int, int, int]]:
    out = []
    lines = Path(path).read_text().splitlines()
    for line in lines[1:]:
        if not line.strip():
            continue
        eid, p, r, c, label = line.split(",")
        out.append((eid, p, int(r), int(c), int(label)))
    return out
