"""Factorized-prior rate model and canonical Huffman feedback bitstreams.

The prior is an empirical symbol histogram with one count of Laplace
smoothing per bin, so every symbol keeps strictly positive probability.
Training uses a differentiable rate surrogate (triangular soft binning in
the companded domain); evaluation always uses the hard negative
log-likelihood and real Huffman bits.

Bitstream wire format (little-endian):
    magic  b"CSIB"
    u16    version (1)
    u8     bits per symbol k
    u32    symbol count N
    u8[2^k] canonical code length per symbol (0 = symbol absent)
    u32    payload bit length
    bytes  payload, MSB-first within each byte, zero padded to a byte
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .quantizer import QuantizedLatent, QuantizerConfig, mu_compress_t

SMOOTHING = 1.0
STREAM_MAGIC = b"CSIB"
STREAM_VERSION = 1
_LOG2 = math.log(2.0)


class BitstreamError(ValueError):
    """Base class for feedback bitstream failures."""


class BadStreamMagic(BitstreamError):
    pass


class StreamVersionMismatch(BitstreamError):
    pass


class TruncatedStream(BitstreamError):
    pass


class UnknownSymbol(BitstreamError):
    pass


@dataclass
class SymbolHistogram:
    """Empirical symbol counts with Laplace smoothing (epsilon = 1 per bin)."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.counts.ndim != 1 or self.counts.size < 2:
            raise ValueError("histogram needs a 1-D count vector with >= 2 bins")
        if np.any(self.counts < 0):
            raise ValueError("histogram counts must be non-negative")

    @classmethod
    def uniform(cls, num_symbols: int) -> "SymbolHistogram":
        return cls(np.zeros(num_symbols))

    @property
    def num_symbols(self) -> int:
        return self.counts.size

    @property
    def probabilities(self) -> np.ndarray:
        smoothed = self.counts + SMOOTHING
        return smoothed / smoothed.sum()

    def entropy_bits(self) -> float:
        p = self.probabilities
        return float(-np.sum(p * np.log2(p)))


def fit_histogram(symbols, num_symbols: int) -> SymbolHistogram:
    """Count symbol frequencies over a nonempty stream."""
    symbols = np.asarray(symbols).reshape(-1)
    if symbols.size == 0:
        raise ValueError("fit_histogram: empty symbol stream")
    if symbols.min() < 0 or symbols.max() >= num_symbols:
        raise ValueError("fit_histogram: symbol outside [0, num_symbols)")
    return SymbolHistogram(np.bincount(symbols, minlength=num_symbols))


@dataclass(frozen=True)
class RateEstimate:
    total_bits: float
    per_symbol_bits: float


def estimate_rate(q: QuantizedLatent, hist: SymbolHistogram) -> RateEstimate:
    """Hard rate: sum of -log2 p(symbol_i) under the smoothed prior."""
    symbols = np.asarray(q.symbols).reshape(-1)
    nll = -np.log2(hist.probabilities)
    total = float(nll[symbols].sum())
    return RateEstimate(total, total / symbols.size if symbols.size else 0.0)


def soft_rate(s: Tensor, hist: SymbolHistogram, config: QuantizerConfig) -> Tensor:
    """Differentiable total-bits surrogate for the hard rate.

    Companded values are softly assigned to the two neighbouring level
    centers with triangular kernels of width equal to the grid step, so the
    surrogate equals the hard rate whenever a value sits exactly on a
    center, and is constant (N * k bits) under a uniform prior.
    """
    if hist.num_symbols != config.levels:
        raise ValueError("soft_rate: histogram size does not match 2^k levels")
    y = mu_compress_t(s, config.mu)
    probs = hist.probabilities
    centers = config.centers
    delta = config.step

    yd = y.data.astype(np.float64, copy=False)
    yc = np.clip(yd, centers[0], centers[-1])
    lo = np.clip(((yc - centers[0]) / delta).astype(np.int64), 0, config.levels - 2)
    t = (yc - centers[lo]) / delta
    p_lo = probs[lo]
    p_hi = probs[lo + 1]
    q = (1.0 - t) * p_lo + t * p_hi
    total = np.asarray(-np.log2(q).sum(), dtype=y.data.dtype)

    inside = (yd > centers[0]) & (yd < centers[-1])

    def grad_fn(g):
        dq_dy = np.where(inside, (p_hi - p_lo) / delta, 0.0)
        gy = -g * (dq_dy / (q * _LOG2))
        return (gy.astype(y.data.dtype, copy=False),)

    rate = ad.make_op((y,), total, grad_fn, "soft_rate")
    return rate


# ---------------------------------------------------------------------------
# canonical Huffman


@dataclass(frozen=True)
class HuffmanCodebook:
    """Canonical prefix code, fully determined by per-symbol code lengths."""

    lengths: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lengths",
                           np.asarray(self.lengths, dtype=np.int64))

    @property
    def num_symbols(self) -> int:
        return self.lengths.size

    def kraft_sum(self) -> float:
        active = self.lengths[self.lengths > 0]
        return float(np.sum(np.ldexp(1.0, -active.astype(np.int64))))

    def codewords(self) -> dict[int, tuple[int, int]]:
        """symbol -> (code, length); canonical order (length, then symbol)."""
        items = sorted((int(l), s) for s, l in enumerate(self.lengths) if l > 0)
        codes: dict[int, tuple[int, int]] = {}
        code = 0
        prev_len = 0
        for length, sym in items:
            code <<= length - prev_len
            codes[sym] = (code, length)
            code += 1
            prev_len = length
        return codes

    def mean_length(self, probs: np.ndarray) -> float:
        return float(np.dot(probs, self.lengths))


def huffman_build(weights) -> HuffmanCodebook:
    """Optimal prefix code by pairwise merging of the two lightest nodes.

    Ties break deterministically: lower symbol index first, then the
    earlier-created internal node.  A single-symbol alphabet gets a 1-bit
    code.  Zero-weight symbols receive no code (length 0).
    """
    if isinstance(weights, SymbolHistogram):
        weights = weights.probabilities
    weights = np.asarray(weights, dtype=np.float64)
    n = weights.size
    lengths = np.zeros(n, dtype=np.int64)
    # heap entries: (weight, is_internal, tie_index, node_id)
    heap = [(float(w), 0, s, s) for s, w in enumerate(weights) if w > 0]
    if not heap:
        raise ValueError("huffman_build: need at least one nonzero-weight symbol")
    if len(heap) == 1:
        lengths[heap[0][3]] = 1
        return HuffmanCodebook(lengths)
    heapq.heapify(heap)
    children: dict[int, tuple[int, int]] = {}
    next_id = n
    while len(heap) > 1:
        w1, _, _, a = heapq.heappop(heap)
        w2, _, _, b = heapq.heappop(heap)
        children[next_id] = (a, b)
        heapq.heappush(heap, (w1 + w2, 1, next_id, next_id))
        next_id += 1
    stack = [(heap[0][3], 0)]
    while stack:
        node, depth = stack.pop()
        if node < n:
            lengths[node] = depth
            continue
        a, b = children[node]
        stack.append((a, depth + 1))
        stack.append((b, depth + 1))
    if lengths.max() > 255:
        raise ValueError("huffman_build: code length exceeds one byte")
    return HuffmanCodebook(lengths)


@dataclass
class FeedbackBitstream:
    """Encoded feedback payload plus the header needed to decode it."""

    bits: int
    symbol_count: int
    lengths: np.ndarray
    payload_bits: int
    payload: bytes

    def to_bytes(self) -> bytes:
        k = 2 ** self.bits
        header = STREAM_MAGIC
        header += struct.pack("<HBI", STREAM_VERSION, self.bits, self.symbol_count)
        header += bytes(int(l) for l in self.lengths) if len(self.lengths) == k \
            else bytes(k)
        header += struct.pack("<I", self.payload_bits)
        return header + self.payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FeedbackBitstream":
        if len(raw) < 4 or raw[:4] != STREAM_MAGIC:
            raise BadStreamMagic("feedback stream: bad magic")
        off = 4
        if len(raw) < off + 7:
            raise TruncatedStream("feedback stream: truncated header")
        version, bits, count = struct.unpack_from("<HBI", raw, off)
        off += 7
        if version != STREAM_VERSION:
            raise StreamVersionMismatch(f"feedback stream: version {version}")
        k = 2 ** bits
        if len(raw) < off + k + 4:
            raise TruncatedStream("feedback stream: truncated code-length table")
        lengths = np.frombuffer(raw[off:off + k], dtype=np.uint8).astype(np.int64)
        off += k
        (payload_bits,) = struct.unpack_from("<I", raw, off)
        off += 4
        payload = raw[off:]
        if len(payload) != (payload_bits + 7) // 8:
            raise TruncatedStream("feedback stream: payload length mismatch")
        return cls(bits=bits, symbol_count=count, lengths=lengths,
                   payload_bits=payload_bits, payload=payload)


def huffman_encode(q: QuantizedLatent, codebook: HuffmanCodebook) -> FeedbackBitstream:
    """Pack symbols MSB-first with canonical codewords."""
    symbols = np.asarray(q.symbols).reshape(-1)
    codes = codebook.codewords()
    acc = 0
    nbits = 0
    lengths = codebook.lengths
    code_arr = np.zeros(codebook.num_symbols, dtype=np.int64)
    for sym, (code, _) in codes.items():
        code_arr[sym] = code
    for sym in symbols.tolist():
        if sym < 0 or sym >= codebook.num_symbols or lengths[sym] == 0:
            raise UnknownSymbol(f"huffman_encode: symbol {sym} has no codeword")
        length = int(lengths[sym])
        acc = (acc << length) | int(code_arr[sym])
        nbits += length
    pad = (-nbits) % 8
    payload = ((acc << pad) if nbits else 0).to_bytes((nbits + pad) // 8, "big")
    return FeedbackBitstream(bits=q.bits, symbol_count=symbols.size,
                             lengths=codebook.lengths.copy(),
                             payload_bits=nbits, payload=payload)


def huffman_decode(stream: FeedbackBitstream) -> QuantizedLatent:
    """Inverse of huffman_encode; bit-exact round-trip."""
    codebook = HuffmanCodebook(stream.lengths)
    table: dict[int, dict[int, int]] = {}
    for sym, (code, length) in codebook.codewords().items():
        table.setdefault(length, {})[code] = sym
    out = np.empty(stream.symbol_count, dtype=np.int64)
    big = int.from_bytes(stream.payload, "big") if stream.payload else 0
    total_bits = len(stream.payload) * 8
    pos = 0
    code = 0
    length = 0
    decoded = 0
    while decoded < stream.symbol_count:
        if pos >= stream.payload_bits:
            raise TruncatedStream("feedback stream: ran out of payload bits")
        code = (code << 1) | ((big >> (total_bits - 1 - pos)) & 1)
        length += 1
        pos += 1
        hit = table.get(length)
        if hit is not None and code in hit:
            out[decoded] = hit[code]
            decoded += 1
            code = 0
            length = 0
    if length != 0 or pos != stream.payload_bits:
        raise TruncatedStream("feedback stream: payload bit length mismatch")
    return QuantizedLatent(out, stream.bits)


def bpp(total_bits: float, nc: int, nt: int) -> float:
    """Bits per pixel over the 2 * Nc * Nt real-valued channel entries."""
    pixels = 2 * nc * nt
    if pixels <= 0:
        raise ValueError("bpp: non-positive pixel count")
    return float(total_bits) / pixels


def nominal_bpp(bits: int, latent_len: int, nc: int, nt: int) -> float:
    return bpp(bits * latent_len, nc, nt)
