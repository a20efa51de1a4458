"""Cross-attention latent encoder for 1-D physiological signals.

A fixed array of learnable latent vectors (N x d) queries the signal:
samples become Fourier-featurized tokens, one single-head cross-attention
layer projects them to keys/values in model width, and the latents attend
to all of them at once.  Optional self-attention layers mix the latents
after each cross-attention, and a gated feed-forward block follows every
attention module.  Mean-pooling the final latents plus a learned linear
projection yields one embedding per input signal, independent of the
signal's length.

All attention blocks are pre-layer-norm with residual connections;
dropout acts on each attention output and on each FFN's gated hidden
activation (training mode only).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .numerics import Tensor

# The six standard (depth, cross_per_block, self_per_block) layouts, in
# ascending cost order.
STANDARD_GRID = ((1, 1, 0), (2, 1, 0), (1, 1, 1), (1, 1, 2), (2, 1, 1), (2, 1, 2))

EMBED_DIM = 512


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 1
    cross_per_block: int = 1
    self_per_block: int = 0
    n_latents: int = 256
    model_dim: int = 512
    fourier_bands: int = 6
    max_freq_hz: float = 10.0
    ffn_expansion: int = 4
    dropout: float = 0.1
    out_dim: int = EMBED_DIM

    def __post_init__(self):
        if self.depth < 1 or self.cross_per_block < 1 or self.self_per_block < 0:
            raise ValueError(f"need depth >= 1, cross >= 1, self >= 0; "
                             f"got ({self.depth}, {self.cross_per_block}, {self.self_per_block})")
        if min(self.n_latents, self.model_dim, self.fourier_bands, self.ffn_expansion, self.out_dim) < 1:
            raise ValueError("n_latents, model_dim, fourier_bands, ffn_expansion, out_dim must be >= 1")
        if self.max_freq_hz <= 0:
            raise ValueError(f"max_freq_hz must be positive, got {self.max_freq_hz}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must satisfy 0 <= rate < 1, got {self.dropout}")

    @property
    def token_dim(self) -> int:
        """Raw value + K sin + K cos + normalized position."""
        return 1 + 2 * self.fourier_bands + 1

    def layout(self) -> tuple[int, int, int]:
        return (self.depth, self.cross_per_block, self.self_per_block)


# ---------------------------------------------------------------------------
# tokenization

def fourier_encode(x: np.ndarray, n_bands: int, max_freq: float) -> np.ndarray:
    """Signal (T,) -> token matrix (T, 1 + 2*n_bands + 1).

    Columns: raw sample value, sin(pi f_k p) and cos(pi f_k p) for the
    n_bands frequencies f_k geometrically spaced in [1, max_freq], and the
    normalized position p itself.  p runs linearly over [-1, 1]; a single
    sample sits at p = -1.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise nm.ShapeError(f"fourier_encode expects a non-empty vector, got shape {x.shape}")
    t = x.size
    p = np.full(1, -1.0) if t == 1 else np.linspace(-1.0, 1.0, t)
    freqs = np.geomspace(1.0, max_freq, n_bands)
    phase = np.pi * p[:, None] * freqs[None, :]
    return np.concatenate([x[:, None], np.sin(phase), np.cos(phase), p[:, None]], axis=1)


# ---------------------------------------------------------------------------
# parameters

def _uniform_fan_in(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...], dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return nm.parameter(rng.uniform(-bound, bound, shape), dtype=dtype)


def _init_linear(params: dict, prefix: str, fan_in: int, fan_out: int,
                 rng: np.random.Generator, dtype) -> None:
    params[f"{prefix}.w"] = _uniform_fan_in(rng, fan_in, (fan_in, fan_out), dtype)
    params[f"{prefix}.b"] = nm.parameter(np.zeros(fan_out), dtype=dtype)


def _init_norm(params: dict, prefix: str, dim: int, dtype) -> None:
    params[f"{prefix}.g"] = nm.parameter(np.ones(dim), dtype=dtype)
    params[f"{prefix}.b"] = nm.parameter(np.zeros(dim), dtype=dtype)


def _init_attention(params: dict, prefix: str, kv_dim: int, cfg: EncoderConfig,
                    rng: np.random.Generator, dtype) -> None:
    d = cfg.model_dim
    _init_norm(params, f"{prefix}.ln_q", d, dtype)
    _init_norm(params, f"{prefix}.ln_kv", kv_dim, dtype)
    _init_linear(params, f"{prefix}.wq", d, d, rng, dtype)
    _init_linear(params, f"{prefix}.wk", kv_dim, d, rng, dtype)
    _init_linear(params, f"{prefix}.wv", kv_dim, d, rng, dtype)
    _init_linear(params, f"{prefix}.wo", d, d, rng, dtype)


def _init_ffn(params: dict, prefix: str, cfg: EncoderConfig, rng: np.random.Generator, dtype) -> None:
    d, e = cfg.model_dim, cfg.ffn_expansion
    _init_norm(params, f"{prefix}.ln", d, dtype)
    _init_linear(params, f"{prefix}.wu", d, e * d, rng, dtype)
    _init_linear(params, f"{prefix}.wg", d, e * d, rng, dtype)
    _init_linear(params, f"{prefix}.wo", e * d, d, rng, dtype)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator,
                        dtype=nm.DEFAULT_DTYPE) -> dict[str, Tensor]:
    """Fresh parameter dict in a fixed, documented key order.

    Latents draw from N(0, 0.02); linear weights from the fan-in scaled
    uniform U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero and
    norm gains at one.
    """
    params: dict[str, Tensor] = {}
    params["latents"] = nm.parameter(rng.normal(0.0, 0.02, (cfg.n_latents, cfg.model_dim)), dtype=dtype)
    for b in range(cfg.depth):
        for c in range(cfg.cross_per_block):
            base = f"block{b}.cross{c}"
            _init_attention(params, f"{base}.attn", cfg.token_dim, cfg, rng, dtype)
            _init_ffn(params, f"{base}.ffn", cfg, rng, dtype)
            for s in range(cfg.self_per_block):
                _init_attention(params, f"{base}.self{s}.attn", cfg.model_dim, cfg, rng, dtype)
                _init_ffn(params, f"{base}.self{s}.ffn", cfg, rng, dtype)
    _init_linear(params, "proj", cfg.model_dim, cfg.out_dim, rng, dtype)
    return params


def _affine(x: Tensor, params: dict, prefix: str) -> Tensor:
    return nm.add(nm.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def _norm(x: Tensor, params: dict, prefix: str) -> Tensor:
    return nm.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


# ---------------------------------------------------------------------------
# blocks

def attention(latents: Tensor, context: Tensor, params: dict, prefix: str,
              dropout: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Single-head attention of latents over context, residual output.

    Pre-norms both operands, projects Q from the latents and K/V from the
    context, scores QK^T / sqrt(d), row-softmaxes, and projects the
    context mixture back through an output matrix before the residual
    add.  Cross-attention passes the token matrix as context;
    self-attention passes the latents themselves.
    """
    d = latents.shape[1]
    qn = _norm(latents, params, f"{prefix}.ln_q")
    kn = _norm(context, params, f"{prefix}.ln_kv")
    q = _affine(qn, params, f"{prefix}.wq")
    k = _affine(kn, params, f"{prefix}.wk")
    v = _affine(kn, params, f"{prefix}.wv")
    scores = nm.scale(nm.matmul(q, nm.transpose(k)), 1.0 / np.sqrt(d))
    weights = nm.softmax_rows(scores)
    mixed = _affine(nm.matmul(weights, v), params, f"{prefix}.wo")
    mixed = nm.dropout(mixed, dropout, training, rng)
    return nm.add(latents, mixed)


def gated_ffn(x: Tensor, params: dict, prefix: str,
              dropout: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Pre-norm gated feed-forward with residual: x + Wo(u * gelu(g))."""
    h = _norm(x, params, f"{prefix}.ln")
    u = _affine(h, params, f"{prefix}.wu")
    g = _affine(h, params, f"{prefix}.wg")
    hidden = nm.mul(u, nm.gelu(g))
    hidden = nm.dropout(hidden, dropout, training, rng)
    return nm.add(x, _affine(hidden, params, f"{prefix}.wo"))


def encode(signal: np.ndarray, cfg: EncoderConfig, params: dict[str, Tensor],
           training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Signal (T,) -> embedding (out_dim,).

    One signal per call: batching is a caller-side loop, so an embedding
    never depends on what else shares the batch.
    """
    dtype = params["latents"].dtype
    tokens = nm.constant(fourier_encode(signal, cfg.fourier_bands, cfg.max_freq_hz), dtype=dtype)
    lat = params["latents"]
    for b in range(cfg.depth):
        for c in range(cfg.cross_per_block):
            base = f"block{b}.cross{c}"
            lat = attention(lat, tokens, params, f"{base}.attn", cfg.dropout, training, rng)
            lat = gated_ffn(lat, params, f"{base}.ffn", cfg.dropout, training, rng)
            for s in range(cfg.self_per_block):
                lat = attention(lat, lat, params, f"{base}.self{s}.attn", cfg.dropout, training, rng)
                lat = gated_ffn(lat, params, f"{base}.self{s}.ffn", cfg.dropout, training, rng)
    pooled = nm.mean_axis0(lat)
    return _affine(pooled, params, "proj")


# ---------------------------------------------------------------------------
# checkpoint format
#
# Little-endian binary container:
#   magic "RPCK", format version u32
#   encoder config: depth, cross, self, n_latents, model_dim,
#       fourier_bands, ffn_expansion, out_dim as u32; max_freq_hz,
#       dropout as f64
#   extras: u32 count, then per entry name (u16 length + utf8), type tag
#       u8 (0 = int, 1 = float, 2 = str), value (i64 / f64 / u32 len + utf8)
#   tensors: u32 count, then per tensor name (u16 length + utf8), ndim u8,
#       each dim u32, values float32 row-major

CHECKPOINT_MAGIC = b"RPCK"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable or structurally invalid checkpoint file."""


def _write_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"string too long for checkpoint field: {len(raw)} bytes")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def save_checkpoint(path: str | Path, cfg: EncoderConfig, params: dict[str, Tensor],
                    extras: dict[str, int | float | str] | None = None) -> None:
    """Serialize a config plus any named parameter tensors."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<8I", cfg.depth, cfg.cross_per_block, cfg.self_per_block,
                          cfg.n_latents, cfg.model_dim, cfg.fourier_bands,
                          cfg.ffn_expansion, cfg.out_dim))
    buf.write(struct.pack("<2d", cfg.max_freq_hz, cfg.dropout))
    extras = extras or {}
    buf.write(struct.pack("<I", len(extras)))
    for name, value in extras.items():
        _write_str(buf, name)
        if isinstance(value, bool) or isinstance(value, (int, np.integer)):
            buf.write(struct.pack("<Bq", 0, int(value)))
        elif isinstance(value, (float, np.floating)):
            buf.write(struct.pack("<Bd", 1, float(value)))
        elif isinstance(value, str):
            raw = value.encode("utf-8")
            buf.write(struct.pack("<BI", 2, len(raw)))
            buf.write(raw)
        else:
            raise CheckpointError(f"extras[{name!r}] has unsupported type {type(value).__name__}")
    buf.write(struct.pack("<I", len(params)))
    for name, tensor in params.items():
        _write_str(buf, name)
        arr = np.ascontiguousarray(tensor.data, dtype="<f4")
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw, self.off, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint "
                                  f"(wanted {n} bytes at offset {self.off}, have {len(self.raw)})")
        chunk = self.raw[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def read_str(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def load_checkpoint(path: str | Path) -> tuple[EncoderConfig, dict[str, np.ndarray],
                                               dict[str, int | float | str]]:
    """Inverse of save_checkpoint; bit-exact for float32 tensor data."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    r = _Reader(raw, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    depth, cross, self_, n_latents, model_dim, bands, expansion, out_dim = r.unpack("<8I")
    max_freq, dropout = r.unpack("<2d")
    try:
        cfg = EncoderConfig(depth=depth, cross_per_block=cross, self_per_block=self_,
                            n_latents=n_latents, model_dim=model_dim, fourier_bands=bands,
                            max_freq_hz=max_freq, ffn_expansion=expansion,
                            dropout=dropout, out_dim=out_dim)
    except ValueError as e:
        raise CheckpointError(f"{path}: invalid config in header: {e}") from e
    extras: dict[str, int | float | str] = {}
    (n_extras,) = r.unpack("<I")
    for _ in range(n_extras):
        name = r.read_str()
        (tag,) = r.unpack("<B")
        if tag == 0:
            (extras[name],) = r.unpack("<q")
        elif tag == 1:
            (extras[name],) = r.unpack("<d")
        elif tag == 2:
            (n,) = r.unpack("<I")
            extras[name] = r.take(n).decode("utf-8")
        else:
            raise CheckpointError(f"{path}: unknown extras tag {tag} for {name!r}")
    params: dict[str, np.ndarray] = {}
    (n_tensors,) = r.unpack("<I")
    for _ in range(n_tensors):
        name = r.read_str()
        (ndim,) = r.unpack("<B")
        shape = tuple(r.unpack(f"<{ndim}I")) if ndim else ()
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        params[name] = np.ascontiguousarray(data, dtype=np.float32)
    if r.off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.off} trailing bytes after checkpoint payload")
    return cfg, params, extras
