"""CSI sample generation, angular-delay preprocessing, and dataset files.

Synthetic channels are built directly in the angular-delay domain as a sum
of sparse path clusters whose delays all fall inside the retained tap
window, then rotated back to the spatial-frequency domain with the inverse
unitary 2-D DFT.  Preprocessing recovers the sparse form, truncates the
delay rows, stacks real and imaginary parts, and min-max normalizes with a
single dataset-wide affine record.

Dataset file format "CSID" (little-endian):
    magic  b"CSID"
    u16    version (1)
    u32    sample count
    u32 x3 extents (2, Nc, Nt)
    f64 x2 normalization record (offset, scale)
    f32[]  payload, row-major [count, 2, Nc, Nt]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

FILE_MAGIC = b"CSID"
FILE_VERSION = 1

# salts for derived per-purpose RNG streams
SALT_SAMPLE = 101
SALT_NOISE = 102


class DataError(ValueError):
    """Base class for dataset file failures."""


class BadFileMagic(DataError):
    pass


class FileVersionMismatch(DataError):
    pass


class TruncatedPayload(DataError):
    pass


@dataclass(frozen=True)
class NormalizationRecord:
    """Affine bijection raw -> [0, 1]: normalized = (raw - offset) / scale."""

    offset: float
    scale: float

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.offset) / self.scale

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.scale + self.offset

    @classmethod
    def identity(cls) -> "NormalizationRecord":
        return cls(0.0, 1.0)


@dataclass
class SpatialFrequencyChannel:
    """Complex channel matrix over subcarriers x transmit antennas."""

    matrix: np.ndarray  # complex, [Nc_tilde, Nt]

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.complex128)
        if self.matrix.ndim != 2:
            raise ValueError("channel matrix must be 2-D")


@dataclass
class AngularDelayChannel:
    """Real 2Nc x Nt matrix (real part stacked atop imaginary), normalized."""

    matrix: np.ndarray
    norm: NormalizationRecord

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)

    @property
    def nc(self) -> int:
        return self.matrix.shape[0] // 2

    @property
    def nt(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class ClusterProfile:
    """Path-cluster statistics for one propagation scenario."""

    name: str
    cluster_range: tuple[int, int]      # inclusive bounds on cluster count
    delay_range: tuple[int, int]        # cluster center delay taps [lo, hi)
    delay_spread: tuple[int, int]       # taps per cluster [lo, hi]
    tap_decay: float                    # per-tap magnitude decay inside a cluster


INDOOR_LIKE = ClusterProfile(
    name="indoor-like", cluster_range=(2, 6), delay_range=(0, 8),
    delay_spread=(1, 2), tap_decay=0.5,
)
OUTDOOR_LIKE = ClusterProfile(
    name="outdoor-like", cluster_range=(6, 14), delay_range=(0, 28),
    delay_spread=(1, 4), tap_decay=0.7,
)

PROFILES = {p.name: p for p in (INDOOR_LIKE, OUTDOOR_LIKE)}


@lru_cache(maxsize=8)
def dft_matrix(n: int) -> np.ndarray:
    """Unitary DFT matrix: F[j, k] = exp(-2i pi j k / n) / sqrt(n)."""
    j, k = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return np.exp(-2j * np.pi * j * k / n) / np.sqrt(n)


def dft_sparsify(channel: SpatialFrequencyChannel) -> np.ndarray:
    """Angular-delay transform: F_d @ H @ F_a^H with unitary DFT matrices."""
    h = channel.matrix
    nc_tilde, nt = h.shape
    return dft_matrix(nc_tilde) @ h @ dft_matrix(nt).conj().T


def inverse_dft_sparsify(hbar: np.ndarray) -> SpatialFrequencyChannel:
    """Inverse of dft_sparsify (both DFT factors are unitary)."""
    nc_tilde, nt = hbar.shape
    h = dft_matrix(nc_tilde).conj().T @ hbar @ dft_matrix(nt)
    return SpatialFrequencyChannel(h)


def _sample_angular_delay(rng: np.random.Generator, profile: ClusterProfile,
                          nc_tilde: int, nc: int, nt: int) -> np.ndarray:
    """Angular-delay matrix with all energy inside the first nc delay rows.

    Each cluster is a plane-wave arrival at a continuous random angle, so
    its angular spectrum is a Dirichlet kernel leaking across bins (as real
    array responses do); delays stay on integer taps < nc, which keeps the
    delay support exact.  The sample is scaled to unit Frobenius norm
    (transmit-power normalization).
    """
    hbar = np.zeros((nc_tilde, nt), dtype=np.complex128)
    f_a = dft_matrix(nt)
    lo, hi = profile.cluster_range
    n_clusters = int(rng.integers(lo, hi + 1)) if hi >= lo else 0
    delay_hi = min(profile.delay_range[1], nc)
    antenna = np.arange(nt)
    for _ in range(n_clusters):
        tap0 = int(rng.integers(profile.delay_range[0], max(delay_hi, 1)))
        n_taps = int(rng.integers(profile.delay_spread[0],
                                  profile.delay_spread[1] + 1))
        freq = rng.uniform(0.0, 1.0)  # spatial frequency of the arrival
        power = float(rng.exponential(1.0))
        steering = np.exp(2j * np.pi * freq * antenna)
        spectrum = f_a @ steering
        for dt in range(n_taps):
            tap = tap0 + dt
            if tap >= nc:
                break
            gain = (rng.standard_normal() + 1j * rng.standard_normal()) / np.sqrt(2)
            hbar[tap] += np.sqrt(power) * (profile.tap_decay ** dt) * gain * spectrum
    energy = np.linalg.norm(hbar)
    if energy > 0:
        hbar /= energy
    return hbar


def generate_synthetic(count: int, profile: ClusterProfile | str, seed: int,
                       nc_tilde: int = 64, nc: int = 32, nt: int = 32,
                       ) -> list[SpatialFrequencyChannel]:
    """Deterministic synthetic channels; samples are independent of order."""
    if count < 1:
        raise ValueError(f"generate_synthetic: count must be >= 1, got {count}")
    if isinstance(profile, str):
        profile = PROFILES[profile]
    if nc > nc_tilde:
        raise ValueError("generate_synthetic: nc must not exceed nc_tilde")
    out = []
    for i in range(count):
        rng = np.random.default_rng((seed, SALT_SAMPLE, i))
        hbar = _sample_angular_delay(rng, profile, nc_tilde, nc, nt)
        out.append(inverse_dft_sparsify(hbar))
    return out


def truncate_and_realify(hbar: np.ndarray, nc: int,
                         norm: NormalizationRecord) -> AngularDelayChannel:
    """Keep the first nc delay rows, stack Re atop Im, normalize to [0, 1]."""
    if nc > hbar.shape[0]:
        raise ValueError(f"truncate: nc={nc} exceeds {hbar.shape[0]} delay rows")
    top = hbar[:nc]
    raw = np.concatenate([top.real, top.imag], axis=0)
    return AngularDelayChannel(norm.normalize(raw).astype(np.float32), norm)


def raw_truncated(hbar: np.ndarray, nc: int) -> np.ndarray:
    """Truncated real-valued matrix before normalization (oracle helper)."""
    top = hbar[:nc]
    return np.concatenate([top.real, top.imag], axis=0)


def fit_normalization(raw_matrices) -> NormalizationRecord:
    """Dataset-wide min-max record mapping every entry into [0, 1]."""
    lo = min(float(np.min(m)) for m in raw_matrices)
    hi = max(float(np.max(m)) for m in raw_matrices)
    scale = hi - lo
    if scale <= 0:
        scale = 1.0
    return NormalizationRecord(offset=lo, scale=scale)


def add_awgn(channel: AngularDelayChannel, snr_db: float,
             rng: np.random.Generator) -> AngularDelayChannel:
    """Input-side AWGN at a per-sample SNR, applied on the de-normalized matrix.

    snr_db = +inf is the "clean" sentinel.  The noisy matrix is re-normalized
    with the same record; entries may then fall slightly outside [0, 1].
    """
    if not np.isfinite(snr_db):
        if snr_db > 0:
            return channel
        raise ValueError("add_awgn: snr_db must be finite or +inf")
    raw = channel.norm.denormalize(channel.matrix.astype(np.float64))
    signal_power = float(np.mean(raw * raw))
    noise_power = signal_power / (10.0 ** (snr_db / 10.0))
    noise = rng.standard_normal(raw.shape) * np.sqrt(noise_power)
    noisy = channel.norm.normalize(raw + noise).astype(np.float32)
    return AngularDelayChannel(noisy, channel.norm)


def add_awgn_batch(batch: np.ndarray, norm: NormalizationRecord, snr_db: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Vectorized AWGN over [n, 2Nc, Nt] normalized samples (per-sample power)."""
    if not np.isfinite(snr_db):
        return batch
    raw = norm.denormalize(batch.astype(np.float64))
    power = np.mean(raw * raw, axis=(1, 2), keepdims=True)
    noise_power = power / (10.0 ** (snr_db / 10.0))
    noise = rng.standard_normal(raw.shape) * np.sqrt(noise_power)
    return norm.normalize(raw + noise).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset files


@dataclass
class DatasetFile:
    """In-memory view of one CSID file: normalized samples plus the record."""

    samples: np.ndarray  # float32, [count, 2, Nc, Nt]
    norm: NormalizationRecord

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 4 or self.samples.shape[1] != 2:
            raise ValueError("samples must have shape [count, 2, Nc, Nt]")

    @property
    def count(self) -> int:
        return self.samples.shape[0]

    @property
    def nc(self) -> int:
        return self.samples.shape[2]

    @property
    def nt(self) -> int:
        return self.samples.shape[3]

    def channel(self, index: int) -> AngularDelayChannel:
        m = self.samples[index].reshape(2 * self.nc, self.nt)
        return AngularDelayChannel(m, self.norm)


def save_dataset(ds: DatasetFile, path) -> None:
    count, two, nc, nt = ds.samples.shape
    header = FILE_MAGIC + struct.pack("<HIIIIdd", FILE_VERSION, count, two, nc, nt,
                                      ds.norm.offset, ds.norm.scale)
    payload = ds.samples.astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_dataset(path) -> DatasetFile:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != FILE_MAGIC:
        raise BadFileMagic(f"{path}: bad magic")
    header_len = 4 + struct.calcsize("<HIIIIdd")
    if len(raw) < header_len:
        raise TruncatedPayload(f"{path}: truncated header")
    version, count, two, nc, nt, offset, scale = struct.unpack_from("<HIIIIdd", raw, 4)
    if version != FILE_VERSION:
        raise FileVersionMismatch(f"{path}: version {version} != {FILE_VERSION}")
    expected = count * two * nc * nt * 4
    payload = raw[header_len:]
    if len(payload) != expected:
        raise TruncatedPayload(f"{path}: payload {len(payload)} bytes, "
                               f"expected {expected}")
    samples = np.frombuffer(payload, dtype="<f4").reshape(count, two, nc, nt).copy()
    return DatasetFile(samples, NormalizationRecord(offset, scale))


def split_counts(total: int) -> tuple[int, int, int]:
    """train/val/test split in the 10:3:2 ratio (exact on multiples of 15)."""
    val = total * 3 // 15
    test = total * 2 // 15
    return total - val - test, val, test


def build_dataset(count: int, profile: ClusterProfile | str, seed: int,
                  nc_tilde: int = 64, nc: int = 32, nt: int = 32,
                  ) -> DatasetFile:
    """Generate, sparsify, truncate, and normalize a full sample set."""
    channels = generate_synthetic(count, profile, seed, nc_tilde, nc, nt)
    raws = [raw_truncated(dft_sparsify(ch), nc) for ch in channels]
    norm = fit_normalization(raws)
    samples = np.stack([norm.normalize(r) for r in raws]).astype(np.float32)
    return DatasetFile(samples.reshape(count, 2, nc, nt), norm)
