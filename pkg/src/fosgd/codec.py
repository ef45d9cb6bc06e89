"""Encoder/decoder pair around the flattened quantizer, and the wire format.

encode(x) = levels of Q_{lam,K}(H_eps x_padded) scaled by K/lam, i.e. the
integer image of the encoder E_{eps,lam,K}(x) = (K/lam) Q_{lam,K}(H_eps x).
decode applies D_{eps,lam,K}(q) = (lam/K) H_eps^-1 q and truncates back to
the original dimension.  Their composition (without serialization) is the
(lam, K)-transform Z.

Wire layout (little-endian throughout):

    offset  size  field
    0       4     magic "FOSG"
    4       1     version 0x01
    5       4     dim (u32)
    9       4     padded_dim (u32, power of two >= dim)
    13      2     k_reps (u16)
    15      8     lam (f64)
    23      .     epsilon bits: padded_dim bits, LSB-first
    .       .     level bits: padded_dim * ceil(log2(K+1)) bits, LSB-first

Header bytes are bookkeeping and are excluded from the communication-bit
metric; the payload is exactly (ceil(log2(K+1)) + 1) * padded_dim bits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .quantizer import DitherConfig, FormatError, QuantizedVector, quantize, \
    pack_levels, unpack_levels, packed_size
from .transform import DimensionError, RandomizedBasis, apply, apply_inverse

MAGIC = b"FOSG"
VERSION = 1
_HEADER = struct.Struct("<4sBIIHd")
HEADER_SIZE = _HEADER.size


def padded_dim(dim: int) -> int:
    """Smallest power of two >= dim."""
    if dim < 1:
        raise DimensionError(f"dim must be positive, got {dim}")
    return 1 << (dim - 1).bit_length()


def payload_bits(dim: int, config: DitherConfig) -> int:
    """Exact transmitted payload size: level bits plus one epsilon bit per
    padded coordinate.  (ceil(log2(K+1)) + 1) * padded_dim; 2*padded_dim
    when K = 1."""
    return (config.bits_per_level + 1) * padded_dim(dim)


@dataclass(frozen=True)
class EncodedGradient:
    """One transmitted message: quantized levels plus the sign vector."""

    dim: int
    basis: RandomizedBasis
    quantized: QuantizedVector

    def __post_init__(self):
        if self.basis.dim != padded_dim(self.dim):
            raise DimensionError(
                f"basis dim {self.basis.dim} != padded dim {padded_dim(self.dim)}"
            )
        if self.quantized.dim != self.basis.dim:
            raise DimensionError(
                f"levels dim {self.quantized.dim} != basis dim {self.basis.dim}"
            )

    @property
    def config(self) -> DitherConfig:
        return self.quantized.config

    @property
    def payload_bits(self) -> int:
        return payload_bits(self.dim, self.config)


def _pad(x: np.ndarray, target: int) -> np.ndarray:
    if x.shape[-1] == target:
        return np.asarray(x, dtype=np.float64)
    out = np.zeros(target, dtype=np.float64)
    out[: x.shape[-1]] = x
    return out


def encode(
    x: np.ndarray,
    basis: RandomizedBasis,
    config: DitherConfig,
    rng: np.random.Generator,
) -> EncodedGradient:
    """Flatten x with H_eps (zero-padding to basis.dim first) and quantize."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {x.shape}")
    if basis.dim != padded_dim(x.shape[0]):
        raise DimensionError(
            f"basis dim {basis.dim} != padded dim {padded_dim(x.shape[0])} "
            f"of a length-{x.shape[0]} input"
        )
    flat = apply(basis, _pad(x, basis.dim))
    q = quantize(flat, config, rng)
    return EncodedGradient(dim=x.shape[0], basis=basis, quantized=q)


def decode(enc: EncodedGradient) -> np.ndarray:
    """(lam/K) * H_eps^-1(levels), truncated to the original dimension."""
    return apply_inverse(enc.basis, enc.quantized.dequantize())[: enc.dim]


def z_transform(
    x: np.ndarray,
    basis: RandomizedBasis,
    config: DitherConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """decode(encode(x)) without serialization; draws match encode exactly."""
    return decode(encode(x, basis, config, rng))


def serialize(enc: EncodedGradient) -> bytes:
    """Render header + epsilon bits + level bits as the wire byte string."""
    eps_bits = np.packbits(
        (enc.basis.epsilon > 0).astype(np.uint8), bitorder="little"
    ).tobytes()
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        enc.dim,
        enc.basis.dim,
        enc.config.k_reps,
        enc.config.lam,
    )
    return header + eps_bits + pack_levels(enc.quantized)


def serialize_block(
    dim: int,
    eps_matrix: np.ndarray,
    levels_matrix: np.ndarray,
    config: DitherConfig,
) -> list[bytes]:
    """Serialize a cohort of messages sharing (dim, config) in one pass.

    Row i of eps_matrix / levels_matrix is message i; the output byte
    strings are identical to per-message serialize().
    """
    pdim = padded_dim(dim)
    eps_matrix = np.asarray(eps_matrix)
    levels_matrix = np.asarray(levels_matrix)
    if eps_matrix.ndim != 2 or eps_matrix.shape[1] != pdim:
        raise DimensionError(
            f"eps_matrix shape {eps_matrix.shape} != (n, {pdim})"
        )
    if levels_matrix.shape != eps_matrix.shape:
        raise DimensionError(
            f"levels_matrix shape {levels_matrix.shape} != {eps_matrix.shape}"
        )
    if not np.all(np.abs(eps_matrix) == 1):
        raise ValueError("epsilon entries must be +-1")
    k = config.k_reps
    if np.any(np.abs(levels_matrix) > k) or np.any((levels_matrix + k) & 1):
        raise FormatError(f"levels must lie in {{-K, -K+2, ..., K}} for K={k}")
    header = _HEADER.pack(MAGIC, VERSION, dim, pdim, k, config.lam)
    eps_bytes = np.packbits(
        (eps_matrix > 0).astype(np.uint8), axis=1, bitorder="little"
    )
    nbits = config.bits_per_level
    codes = ((levels_matrix.astype(np.int64) + k) >> 1).astype(np.uint16)
    bits = (
        (codes[:, :, None] >> np.arange(nbits, dtype=np.uint16)) & 1
    ).astype(np.uint8)
    lvl_bytes = np.packbits(
        bits.reshape(codes.shape[0], pdim * nbits), axis=1, bitorder="little"
    )
    return [
        header + eps_bytes[i].tobytes() + lvl_bytes[i].tobytes()
        for i in range(codes.shape[0])
    ]


def deserialize_block(
    messages: "list[bytes]",
) -> tuple[int, np.ndarray, np.ndarray, DitherConfig]:
    """Parse a cohort of messages sharing one header in one pass.

    Returns (dim, eps_matrix, levels_matrix, config) with row i holding
    message i, exactly as per-message deserialize() would produce them.
    All messages must agree on the header; a mixed cohort is a format
    error.
    """
    if len(messages) == 0:
        raise FormatError("empty message cohort")
    first = deserialize(messages[0])
    dim, config = first.dim, first.config
    pdim = first.basis.dim
    length = len(messages[0])
    if any(len(m) != length for m in messages):
        raise FormatError("cohort messages have differing lengths")
    buf = np.frombuffer(b"".join(messages), dtype=np.uint8).reshape(
        len(messages), length
    )
    if np.any(buf[:, :HEADER_SIZE] != buf[0, :HEADER_SIZE]):
        raise FormatError("cohort messages have differing headers")
    eps_nbytes = (pdim + 7) // 8
    eps_bits = np.unpackbits(
        buf[:, HEADER_SIZE : HEADER_SIZE + eps_nbytes], axis=1, bitorder="little"
    )
    if np.any(eps_bits[:, pdim:]):
        raise FormatError(f"nonzero epsilon padding bits at offset {HEADER_SIZE}")
    eps_matrix = eps_bits[:, :pdim].astype(np.float64) * 2.0 - 1.0
    nbits = config.bits_per_level
    lvl_bits = np.unpackbits(
        buf[:, HEADER_SIZE + eps_nbytes :], axis=1, bitorder="little"
    )
    if np.any(lvl_bits[:, pdim * nbits :]):
        raise FormatError("nonzero level padding bits")
    weights = (1 << np.arange(nbits)).astype(np.int64)
    codes = lvl_bits[:, : pdim * nbits].reshape(len(messages), pdim, nbits) @ weights
    if np.any(codes > config.k_reps):
        raise FormatError(f"level code exceeds K={config.k_reps}")
    levels_matrix = (2 * codes - config.k_reps).astype(np.int64)
    return dim, eps_matrix, levels_matrix, config


def deserialize(data: bytes) -> EncodedGradient:
    """Parse the wire byte string; format errors name the offending offset."""
    if len(data) < HEADER_SIZE:
        raise FormatError(
            f"truncated header: need {HEADER_SIZE} bytes, got {len(data)} (offset 0)"
        )
    magic, version, dim, pdim, k_reps, lam = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    if dim < 1 or pdim != padded_dim(dim):
        raise FormatError(f"inconsistent dims ({dim}, padded {pdim}) at offset 5")
    try:
        config = DitherConfig(lam=lam, k_reps=k_reps)
    except ValueError as e:
        raise FormatError(f"bad dither config at offset 13: {e}") from e
    eps_nbytes = (pdim + 7) // 8
    lv_nbytes = packed_size(pdim, config)
    expected = HEADER_SIZE + eps_nbytes + lv_nbytes
    if len(data) != expected:
        raise FormatError(
            f"payload length {len(data) - HEADER_SIZE} != expected "
            f"{eps_nbytes + lv_nbytes} (offset {min(len(data), expected)})"
        )
    eps_bits = np.unpackbits(
        np.frombuffer(data, dtype=np.uint8, count=eps_nbytes, offset=HEADER_SIZE),
        count=pdim,
        bitorder="little",
    )
    tail = np.unpackbits(
        np.frombuffer(data, dtype=np.uint8, count=eps_nbytes, offset=HEADER_SIZE),
        bitorder="little",
    )[pdim:]
    if np.any(tail):
        raise FormatError(f"nonzero epsilon padding bits at offset {HEADER_SIZE}")
    epsilon = eps_bits.astype(np.float64) * 2.0 - 1.0
    basis = RandomizedBasis(dim=pdim, epsilon=epsilon)
    q = unpack_levels(data[HEADER_SIZE + eps_nbytes :], pdim, config)
    return EncodedGradient(dim=dim, basis=basis, quantized=q)
