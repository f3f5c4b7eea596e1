"""Attention/CNN autoencoder for angular-delay CSI matrices.

Encoder: 3x3 conv lift (2 -> d), a stack of transformer blocks, 3x3 conv
back to 2 channels, flatten, dense to the latent length M, tanh.  Decoder:
dense M -> 2048, reshape to 2x32x32, two parallel stems (a transposed-conv
lift followed by transformer blocks, and a transposed-conv lift followed by
multi-resolution conv blocks), elementwise sum, 3x3 conv to 2 channels,
sigmoid.

Each transformer block chains three pre-normed residual sub-blocks:
window-local self-attention, global attention against one summarized token
per window, and a token-wise MLP (hidden 4d, exact GELU).  No positional
encoding is used anywhere.

Checkpoint file format "CSIW" (little-endian):
    magic  b"CSIW"
    u16    version (1)
    u32 x8 config record: nc, nt, embed_dim, window, heads, latent_len,
           stb_count, cr_count
    u32    entry count
    entries: u16 name length, utf-8 name, u8 ndim, u32 per extent,
             f32 payload (row-major)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"CSIW"
CHECKPOINT_VERSION = 1
SALT_INIT = 201

# extra (non-weight) state carried inside checkpoints
ENTRY_HISTOGRAM = "entropy.histogram_counts"
ENTRY_MU = "quantizer.mu"
ENTRY_BITS = "quantizer.bits"
ENTRY_NORM = "data.normalization"
STATE_ENTRIES = (ENTRY_HISTOGRAM, ENTRY_MU, ENTRY_BITS, ENTRY_NORM)


class ConfigError(ValueError):
    """ModelConfig violates a structural constraint."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; every weight shape derives from these."""

    nc: int = 32
    nt: int = 32
    embed_dim: int = 64
    window: int = 8
    heads: int = 4
    latent_len: int = 512
    stb_count: int = 2
    cr_count: int = 2

    def __post_init__(self):
        if self.nc != self.nt:
            raise ConfigError(f"square spatial grid required: nc={self.nc} nt={self.nt}")
        if self.window < 1 or self.side % self.window != 0:
            raise ConfigError(f"window {self.window} must divide side {self.side}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by "
                              f"{self.heads} heads")
        if self.latent_len < 1:
            raise ConfigError("latent_len must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"compression ratio {self.gamma} outside (0, 1]")
        if self.stb_count < 1 or self.cr_count < 1:
            raise ConfigError("stb_count and cr_count must be >= 1")

    @property
    def side(self) -> int:
        return self.nt

    @property
    def partitions(self) -> int:
        return self.side // self.window

    @property
    def input_size(self) -> int:
        return 2 * self.nc * self.nt

    @property
    def gamma(self) -> float:
        return self.latent_len / self.input_size

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


def attention_cost(config: ModelConfig) -> tuple[int, int]:
    """Dominant MAC counts of the two attention stages.

    Local term L^4 / m^4 * d is the score cost of one window; global term
    m^2 * L^2 * d is the total score cost against the summarized tokens.
    Evaluated literally, including the m = L and m = 1 boundaries.
    """
    l = config.side
    m = config.partitions
    d = config.embed_dim
    return (l ** 4 * d) // (m ** 4), m * m * l * l * d


# ---------------------------------------------------------------------------
# parameter table


def param_shapes(config: ModelConfig) -> dict[str, tuple[str, tuple, int]]:
    """name -> (kind, shape, fan_in); kind in {weight, bias, gain}."""
    d = config.embed_dim
    m_latent = config.latent_len
    flat = config.input_size
    shapes: dict[str, tuple[str, tuple, int]] = {}

    def conv(name, co, ci, kh, kw):
        shapes[f"{name}.w"] = ("weight", (co, ci, kh, kw), ci * kh * kw)
        shapes[f"{name}.b"] = ("bias", (co,), 0)

    def lin(name, k, c):
        shapes[f"{name}.w"] = ("weight", (k, c), k)
        shapes[f"{name}.b"] = ("bias", (c,), 0)

    def ln(name):
        shapes[f"{name}.gain"] = ("gain", (d,), 0)
        shapes[f"{name}.bias"] = ("bias", (d,), 0)

    def stb(prefix):
        for i, sub in enumerate(("lsa", "gsa", "mlp")):
            ln(f"{prefix}.ln{i + 1}")
        for proj in ("q", "k", "v", "o"):
            lin(f"{prefix}.lsa.{proj}", d, d)
        conv(f"{prefix}.gsa.summarize", d, d, config.window, config.window)
        for proj in ("q", "k", "v", "o"):
            lin(f"{prefix}.gsa.{proj}", d, d)
        lin(f"{prefix}.mlp.fc1", d, 4 * d)
        lin(f"{prefix}.mlp.fc2", 4 * d, d)

    def cr(prefix, c):
        conv(f"{prefix}.conv3", c, c, 3, 3)
        conv(f"{prefix}.conv1x9", c, c, 1, 9)
        conv(f"{prefix}.conv9x1", c, c, 9, 1)
        conv(f"{prefix}.merge", c, 2 * c, 1, 1)

    conv("enc.conv_in", d, 2, 3, 3)
    for i in range(config.stb_count):
        stb(f"enc.stb{i}")
    conv("enc.conv_out", 2, d, 3, 3)
    lin("enc.fc", flat, m_latent)

    lin("dec.fc", m_latent, flat)
    # transposed-conv lifts: kernel [c_out=2, c_in=d, 3, 3] maps 2 -> d channels
    shapes["dec.stem_attn.lift.w"] = ("weight", (2, d, 3, 3), 2 * 3 * 3)
    shapes["dec.stem_attn.lift.b"] = ("bias", (d,), 0)
    for i in range(config.stb_count):
        stb(f"dec.stem_attn.stb{i}")
    shapes["dec.stem_conv.lift.w"] = ("weight", (2, d, 3, 3), 2 * 3 * 3)
    shapes["dec.stem_conv.lift.b"] = ("bias", (d,), 0)
    for i in range(config.cr_count):
        cr(f"dec.stem_conv.cr{i}", d)
    conv("dec.conv_out", 2, d, 3, 3)
    return shapes


def init_params(config: ModelConfig, seed: int,
                dtype=np.float32) -> dict[str, Tensor]:
    """Fan-in-scaled uniform weights, unit gains, zero biases.

    Draws happen in sorted-name order from one seeded stream, so the
    parameter set is a pure function of (config, seed).
    """
    shapes = param_shapes(config)
    rng = np.random.default_rng((seed, SALT_INIT))
    params: dict[str, Tensor] = {}
    for name in sorted(shapes):
        kind, shape, fan_in = shapes[name]
        if kind == "weight":
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        elif kind == "gain":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return params


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s, _ in param_shapes(config).values())


def param_counts_by_name(config: ModelConfig) -> dict[str, int]:
    return {n: int(np.prod(s)) for n, (_, s, _) in param_shapes(config).items()}


# ---------------------------------------------------------------------------
# blocks


def _ensure_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return ad.reshape(x, (1,) + x.shape), False
    return x, True


def _restore(x: Tensor, batched: bool) -> Tensor:
    return x if batched else ad.reshape(x, x.shape[1:])


def _image_to_tokens(x: Tensor) -> Tensor:
    b, d, l, _ = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 3, 1)), (b, l * l, d))


def _tokens_to_image(x: Tensor, side: int) -> Tensor:
    b, _, d = x.shape
    return ad.transpose(ad.reshape(x, (b, side, side, d)), (0, 3, 1, 2))


def _tokens_to_windows(x: Tensor, side: int, window: int) -> Tensor:
    # [b, L*L, d] -> [b, m*m, W*W, d], row-major windows and tokens
    b, _, d = x.shape
    m = side // window
    y = ad.reshape(x, (b, m, window, m, window, d))
    y = ad.transpose(y, (0, 1, 3, 2, 4, 5))
    return ad.reshape(y, (b, m * m, window * window, d))


def _windows_to_tokens(x: Tensor, side: int, window: int) -> Tensor:
    b, _, _, d = x.shape
    m = side // window
    y = ad.reshape(x, (b, m, m, window, window, d))
    y = ad.transpose(y, (0, 1, 3, 2, 4, 5))
    return ad.reshape(y, (b, side * side, d))


def _ln(x: Tensor, params, name: str) -> Tensor:
    return ad.layer_norm(x, params[f"{name}.gain"], params[f"{name}.bias"], axis=-1)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [b, g, t, d] -> [b, g, heads, t, d/heads]
    b, g, t, d = x.shape
    y = ad.reshape(x, (b, g, t, heads, d // heads))
    return ad.transpose(y, (0, 1, 3, 2, 4))


def _merge_heads(x: Tensor) -> Tensor:
    b, g, h, t, hd = x.shape
    return ad.reshape(ad.transpose(x, (0, 1, 3, 2, 4)), (b, g, t, h * hd))


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention per head over grouped token sets.

    The 1/sqrt(head_dim) scale is folded into the (much smaller) query
    tensor rather than the score matrix.
    """
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    qh = ad.mul_scalar(qh, 1.0 / math.sqrt(qh.shape[-1]))
    scores = ad.bmm(qh, ad.transpose(kh, (0, 1, 2, 4, 3)))
    return _merge_heads(ad.bmm(ad.softmax(scores, axis=-1), vh))


def _proj(x: Tensor, params, name: str) -> Tensor:
    return ad.linear(x, params[f"{name}.w"], params[f"{name}.b"])


def _lsa_tokens(x: Tensor, params, prefix: str, side: int, window: int,
                heads: int) -> Tensor:
    y = _ln(x, params, f"{prefix}.ln1")
    wins = _tokens_to_windows(y, side, window)
    q = _proj(wins, params, f"{prefix}.lsa.q")
    k = _proj(wins, params, f"{prefix}.lsa.k")
    v = _proj(wins, params, f"{prefix}.lsa.v")
    out = _proj(_attend(q, k, v, heads), params, f"{prefix}.lsa.o")
    return ad.add(x, _windows_to_tokens(out, side, window))


def _gsa_tokens(x: Tensor, params, prefix: str, side: int, window: int,
                heads: int) -> Tensor:
    y = _ln(x, params, f"{prefix}.ln2")
    summary = ad.conv2d(_tokens_to_image(y, side),
                        params[f"{prefix}.gsa.summarize.w"], stride=window)
    summary = ad.add_bias(summary, params[f"{prefix}.gsa.summarize.b"], axis=1)
    kv_tokens = _image_to_tokens(summary)
    # single token group so heads can batch: [b, 1, t, d]
    q = _proj(y, params, f"{prefix}.gsa.q")
    k = _proj(kv_tokens, params, f"{prefix}.gsa.k")
    v = _proj(kv_tokens, params, f"{prefix}.gsa.v")
    q = ad.reshape(q, (q.shape[0], 1) + q.shape[1:])
    k = ad.reshape(k, (k.shape[0], 1) + k.shape[1:])
    v = ad.reshape(v, (v.shape[0], 1) + v.shape[1:])
    att = _attend(q, k, v, heads)
    att = ad.reshape(att, (att.shape[0],) + att.shape[2:])
    return ad.add(x, _proj(att, params, f"{prefix}.gsa.o"))


def _mlp_tokens(x: Tensor, params, prefix: str) -> Tensor:
    y = _ln(x, params, f"{prefix}.ln3")
    y = _proj(y, params, f"{prefix}.mlp.fc1")
    y = ad.gelu(y)
    y = _proj(y, params, f"{prefix}.mlp.fc2")
    return ad.add(x, y)


def _stb_tokens(x: Tensor, params, prefix: str, side: int, window: int,
                heads: int) -> Tensor:
    x = _lsa_tokens(x, params, prefix, side, window, heads)
    x = _gsa_tokens(x, params, prefix, side, window, heads)
    return _mlp_tokens(x, params, prefix)


def _image_block(fn):
    """Adapt a token-layout block to the [b?, d, L, L] image surface."""

    def wrapper(x: Tensor, params, prefix: str, window: int, heads: int) -> Tensor:
        x, batched = _ensure_batched(x)
        side = x.shape[-1]
        tokens = _image_to_tokens(x)
        out = fn(tokens, params, prefix, side, window, heads)
        return _restore(_tokens_to_image(out, side), batched)

    return wrapper


@_image_block
def lsa_forward(tokens, params, prefix, side, window, heads):
    """Window-local multi-head self-attention, pre-normed with residual."""
    return _lsa_tokens(tokens, params, prefix, side, window, heads)


@_image_block
def gsa_forward(tokens, params, prefix, side, window, heads):
    """Global attention: every token queries one summarized token per window."""
    return _gsa_tokens(tokens, params, prefix, side, window, heads)


@_image_block
def stb_forward(tokens, params, prefix, side, window, heads):
    """Transformer block: local attention, global attention, token-wise MLP."""
    return _stb_tokens(tokens, params, prefix, side, window, heads)


def _conv_block(x: Tensor, params, name: str, padding) -> Tensor:
    y = ad.conv2d(x, params[f"{name}.w"], stride=1, padding=padding)
    return ad.gelu(ad.add_bias(y, params[f"{name}.b"], axis=1))


def cr_block_forward(x: Tensor, params, prefix: str) -> Tensor:
    """Multi-resolution conv block: 3x3 path plus 1x9 -> 9x1 path, merged."""
    x, batched = _ensure_batched(x)
    p1 = _conv_block(x, params, f"{prefix}.conv3", padding=1)
    p2 = _conv_block(x, params, f"{prefix}.conv1x9", padding=(0, 4))
    p2 = _conv_block(p2, params, f"{prefix}.conv9x1", padding=(4, 0))
    y = _conv_block(ad.concat((p1, p2), axis=1), params, f"{prefix}.merge", padding=0)
    return _restore(ad.add(x, y), batched)


# ---------------------------------------------------------------------------
# encoder / decoder


def encoder_forward(params, config: ModelConfig, x: Tensor) -> Tensor:
    """[b, 2, Nc, Nt] -> latent [b, M] in (-1, 1)."""
    b = x.shape[0]
    side = config.side
    h = ad.conv2d(x, params["enc.conv_in.w"], stride=1, padding=1)
    h = ad.add_bias(h, params["enc.conv_in.b"], axis=1)
    t = _image_to_tokens(h)
    for i in range(config.stb_count):
        t = _stb_tokens(t, params, f"enc.stb{i}", side, config.window, config.heads)
    h = _tokens_to_image(t, side)
    h = ad.conv2d(h, params["enc.conv_out.w"], stride=1, padding=1)
    h = ad.add_bias(h, params["enc.conv_out.b"], axis=1)
    h = ad.reshape(h, (b, config.input_size))
    h = ad.linear(h, params["enc.fc.w"], params["enc.fc.b"])
    return ad.tanh(h)


def _lift(x: Tensor, params, name: str) -> Tensor:
    y = ad.conv_transpose2d(x, params[f"{name}.w"], stride=1, padding=1)
    return ad.add_bias(y, params[f"{name}.b"], axis=1)


def decoder_forward(params, config: ModelConfig, s: Tensor) -> Tensor:
    """Latent [b, M] -> reconstruction [b, 2, Nc, Nt] in [0, 1]."""
    b = s.shape[0]
    t = ad.linear(s, params["dec.fc.w"], params["dec.fc.b"])
    t = ad.reshape(t, (b, 2, config.nc, config.nt))
    side = config.side
    tok = _image_to_tokens(_lift(t, params, "dec.stem_attn.lift"))
    for i in range(config.stb_count):
        tok = _stb_tokens(tok, params, f"dec.stem_attn.stb{i}",
                          side, config.window, config.heads)
    stem_a = _tokens_to_image(tok, side)
    stem_b = _lift(t, params, "dec.stem_conv.lift")
    for i in range(config.cr_count):
        stem_b = cr_block_forward(stem_b, params, f"dec.stem_conv.cr{i}")
    y = ad.add(stem_a, stem_b)
    y = ad.conv2d(y, params["dec.conv_out.w"], stride=1, padding=1)
    y = ad.add_bias(y, params["dec.conv_out.b"], axis=1)
    return ad.sigmoid(y)


def encode(h_matrix, params, config: ModelConfig) -> Tensor:
    """Single-sample wrapper: [2Nc, Nt] matrix -> latent Tensor[M]."""
    arr = h_matrix.matrix if hasattr(h_matrix, "matrix") else np.asarray(h_matrix)
    expected = (2 * config.nc, config.nt)
    if arr.shape != expected:
        raise ad.ShapeError(f"encode: input extents {arr.shape}, expected {expected}")
    x = Tensor(arr.reshape(1, 2, config.nc, config.nt))
    s = encoder_forward(params, config, x)
    return ad.reshape(s, (config.latent_len,))


def decode(s, params, config: ModelConfig) -> Tensor:
    """Single-sample wrapper: latent [M] -> reconstruction [2Nc, Nt]."""
    st = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=np.float32))
    if st.shape != (config.latent_len,):
        raise ad.ShapeError(f"decode: latent length {st.shape}, "
                            f"expected ({config.latent_len},)")
    out = decoder_forward(params, config, ad.reshape(st, (1, config.latent_len)))
    return ad.reshape(out, (2 * config.nc, config.nt))


# ---------------------------------------------------------------------------
# checkpoint io


def save_checkpoint(path, config: ModelConfig, entries: dict[str, np.ndarray]) -> None:
    """Write config plus named float32 tensors; entries sorted by name."""
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<H", CHECKPOINT_VERSION)
    buf += struct.pack("<8I", config.nc, config.nt, config.embed_dim, config.window,
                       config.heads, config.latent_len, config.stb_count,
                       config.cr_count)
    buf += struct.pack("<I", len(entries))
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype="<f4")
        raw_name = name.encode("utf-8")
        buf += struct.pack("<H", len(raw_name)) + raw_name
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{max(arr.ndim, 0)}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CHECKPOINT_MAGIC:
        raise ad.ShapeError(f"{path}: bad checkpoint magic")
    off = 4
    (version,) = struct.unpack_from("<H", raw, off)
    off += 2
    if version != CHECKPOINT_VERSION:
        raise ad.ShapeError(f"{path}: checkpoint version {version}")
    fields = struct.unpack_from("<8I", raw, off)
    off += 32
    config = ModelConfig(nc=fields[0], nt=fields[1], embed_dim=fields[2],
                         window=fields[3], heads=fields[4], latent_len=fields[5],
                         stb_count=fields[6], cr_count=fields[7])
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw[off:off + 4 * n], dtype="<f4")
        if arr.size != n:
            raise ad.ShapeError(f"{path}: truncated entry '{name}'")
        off += 4 * n
        entries[name] = arr.reshape(shape).copy()
    return config, entries


def params_from_entries(config: ModelConfig,
                        entries: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """Extract the weight table from checkpoint entries, validating shapes."""
    shapes = param_shapes(config)
    params: dict[str, Tensor] = {}
    for name, (_, shape, _) in shapes.items():
        if name not in entries:
            raise ad.ShapeError(f"checkpoint missing parameter '{name}'")
        arr = entries[name]
        if arr.shape != shape:
            raise ad.ShapeError(f"checkpoint entry '{name}' has shape {arr.shape}, "
                                f"expected {shape}")
        params[name] = Tensor(arr.astype(np.float32), requires_grad=True)
    return params
