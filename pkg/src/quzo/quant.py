"""Quantization formats, rounding, dequantization and integer matmul.

Codes are signed integers stored in a widened dtype.  For INT formats the code
*is* the grid value; for minifloat formats code ``c`` selects
``sign(c) * magnitudes[|c|]`` where ``magnitudes`` is the sorted set of
non-negative representable values.  Both kinds therefore share the symmetric
code range ``[-lmax, lmax]``.

``scale`` is the real-valued grid step: ``dequantize(code) = scale * value(code)``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Union

import numpy as np

from .errors import ConfigurationError, InputError
from .rng import RngStream, as_stream

CODE_DTYPE = np.int32

# (exponent_bits, mantissa_bits) -> (bias, has NaN at the all-ones pattern)
_FP_LAYOUTS = {
    (4, 3): (7, True),    # E4M3, "fn" variant: no infinities, one NaN mantissa pattern
    (2, 1): (1, False),   # E2M1
}


@dataclass(frozen=True)
class QuantFormat:
    kind: str
    bits: int
    exp_bits: Optional[int] = None
    man_bits: Optional[int] = None
    signed: bool = True

    def __post_init__(self):
        if self.kind not in ("INT", "FP"):
            raise ConfigurationError(f"unknown format kind {self.kind!r}")
        if self.kind == "INT":
            # 2..31 bits; the narrow widths are the ones used in training, wider
            # ones act as an effectively lossless limit in tests.
            if not 2 <= self.bits <= 31:
                raise ConfigurationError(f"unsupported INT width {self.bits}")
            if self.exp_bits is not None or self.man_bits is not None:
                raise ConfigurationError("INT formats carry no fp layout")
        else:
            layout = (self.exp_bits, self.man_bits)
            if layout not in _FP_LAYOUTS or 1 + sum(layout) != self.bits:
                raise ConfigurationError(f"unsupported minifloat layout E{self.exp_bits}M{self.man_bits}")

    @classmethod
    def parse(cls, name: str) -> "QuantFormat":
        """``"INT8"``, ``"INT4"``, ``"FP8"`` (E4M3), ``"FP4"`` (E2M1), ``"E4M3"``, ``"E2M1"``."""
        key = name.strip().upper()
        aliases = {"FP8": (4, 3), "E4M3": (4, 3), "FP4": (2, 1), "E2M1": (2, 1)}
        if key in aliases:
            e, m = aliases[key]
            return cls("FP", 1 + e + m, e, m)
        if key.startswith("INT") and key[3:].isdigit():
            return cls("INT", int(key[3:]))
        raise ConfigurationError(f"cannot parse quantization format {name!r}")

    @property
    def name(self) -> str:
        if self.kind == "INT":
            return f"INT{self.bits}"
        return f"FP{self.bits}"

    def __str__(self):
        return self.name

    @cached_property
    def magnitudes(self) -> np.ndarray:
        """Sorted non-negative grid values; index == |code|."""
        if self.kind == "INT":
            return np.arange(self.lmax + 1, dtype=np.float64)
        vals = _decode_minifloat_patterns(self.exp_bits, self.man_bits)
        pos = np.unique(np.abs(vals[np.isfinite(vals)]))
        return pos

    @property
    def lmax(self) -> int:
        if self.kind == "INT":
            return (1 << (self.bits - 1)) - 1
        return len(self.magnitudes) - 1

    @property
    def lmin(self) -> int:
        return -self.lmax

    @property
    def max_value(self) -> float:
        return float(self.magnitudes[-1])

    def decode(self, codes) -> np.ndarray:
        codes = np.asarray(codes)
        if self.kind == "INT":
            return codes.astype(np.float64)
        mags = self.magnitudes[np.abs(codes).astype(np.intp)]
        return np.where(codes < 0, -mags, mags)


def _decode_minifloat_patterns(exp_bits: int, man_bits: int) -> np.ndarray:
    """Value of every bit pattern of a sign/exponent/mantissa minifloat (NaN where reserved)."""
    bias, has_nan = _FP_LAYOUTS[(exp_bits, man_bits)]
    n = 1 << (1 + exp_bits + man_bits)
    out = np.empty(n)
    emax = (1 << exp_bits) - 1
    mmax = (1 << man_bits) - 1
    for pattern in range(n):
        sign = -1.0 if pattern >> (exp_bits + man_bits) else 1.0
        e = (pattern >> man_bits) & emax
        m = pattern & mmax
        if has_nan and e == emax and m == mmax:
            out[pattern] = np.nan
        elif e == 0:
            out[pattern] = sign * (m / (1 << man_bits)) * 2.0 ** (1 - bias)
        else:
            out[pattern] = sign * (1 + m / (1 << man_bits)) * 2.0 ** (e - bias)
    return out


def enumerate_grid(fmt: QuantFormat) -> np.ndarray:
    """Full sorted, duplicate-free grid of representable values (in units of one scale step)."""
    if fmt.kind == "INT":
        if fmt.bits > 24:
            raise ConfigurationError("refusing to enumerate a grid wider than 24 bits")
        return np.arange(fmt.lmin, fmt.lmax + 1, dtype=np.float64)
    vals = _decode_minifloat_patterns(fmt.exp_bits, fmt.man_bits)
    # np.unique collapses +0 and -0 since they compare equal
    return np.unique(vals[np.isfinite(vals)])


@dataclass(frozen=True)
class QuantScheme:
    format: QuantFormat
    scale: Union[float, np.ndarray] = 1.0
    zero_point: int = 0
    axis: Optional[int] = None
    rounding: str = "nearest"

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=np.float64)
        if self.axis is None:
            if scale.ndim != 0:
                raise ConfigurationError("per-tensor scheme needs a scalar scale")
            object.__setattr__(self, "scale", float(scale))
        else:
            if scale.ndim != 1:
                raise ConfigurationError("per-channel scheme needs a 1-D scale vector")
            object.__setattr__(self, "scale", scale)
        if not np.all(np.isfinite(scale)) or np.any(scale <= 0):
            raise ConfigurationError("scale must be finite and positive")
        if self.rounding not in ("nearest", "stochastic"):
            raise ConfigurationError(f"unknown rounding {self.rounding!r}")
        if int(self.zero_point) != self.zero_point:
            raise ConfigurationError("zero point lives in code space and must be integral")

    @property
    def granularity(self) -> str:
        return "per-tensor" if self.axis is None else "per-channel"

    def scale_for(self, ndim: int) -> Union[float, np.ndarray]:
        """Scale broadcastable against an array of ``ndim`` dimensions."""
        if self.axis is None:
            return self.scale
        shape = [1] * ndim
        shape[self.axis] = -1
        return self.scale.reshape(shape)

    def with_rounding(self, rounding: str) -> "QuantScheme":
        return replace(self, rounding=rounding)

    def to_json(self) -> dict:
        return {
            "format": self.format.name,
            "scale": self.scale if self.axis is None else self.scale.tolist(),
            "zero_point": int(self.zero_point),
            "axis": self.axis,
            "rounding": self.rounding,
        }

    @classmethod
    def from_json(cls, d: dict) -> "QuantScheme":
        scale = d["scale"] if d["axis"] is None else np.asarray(d["scale"], dtype=np.float64)
        return cls(QuantFormat.parse(d["format"]), scale, d["zero_point"], d["axis"], d["rounding"])

    def __eq__(self, other):
        if not isinstance(other, QuantScheme):
            return NotImplemented
        return (self.format == other.format and self.zero_point == other.zero_point
                and self.axis == other.axis and self.rounding == other.rounding
                and np.array_equal(self.scale, other.scale))

    def __hash__(self):
        return hash((self.format, self.zero_point, self.axis, self.rounding))


@dataclass(eq=False)
class QuantTensor:
    codes: np.ndarray
    scheme: QuantScheme
    # Bernoulli parameters of the last stochastic rounding, when requested.
    probs: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=CODE_DTYPE)

    @property
    def shape(self):
        return self.codes.shape

    @property
    def format(self) -> QuantFormat:
        return self.scheme.format

    @property
    def size(self) -> int:
        return self.codes.size

    def clamp_bounds(self):
        z = int(self.scheme.zero_point)
        return self.format.lmin + z, self.format.lmax + z

    def clamped(self) -> "QuantTensor":
        lo, hi = self.clamp_bounds()
        return QuantTensor(np.clip(self.codes, lo, hi), self.scheme)

    def dequantize(self) -> np.ndarray:
        return dequantize(self)

    def copy(self) -> "QuantTensor":
        return QuantTensor(self.codes.copy(), self.scheme)

    @property
    def T(self) -> "QuantTensor":
        if self.codes.ndim != 2:
            raise InputError("transpose only defined for matrices")
        axis = None if self.scheme.axis is None else 1 - self.scheme.axis
        return QuantTensor(self.codes.T, replace(self.scheme, axis=axis))

    def __eq__(self, other):
        if not isinstance(other, QuantTensor):
            return NotImplemented
        return self.scheme == other.scheme and np.array_equal(self.codes, other.codes)

    # --- serialization: magic, u32 header length, JSON header, little-endian int32 codes
    MAGIC = b"QZT1"

    def header(self) -> dict:
        return {"shape": list(self.shape), "dtype": "<i4", "scheme": self.scheme.to_json()}

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True).encode()
        body = np.ascontiguousarray(self.codes, dtype="<i4").tobytes()
        return self.MAGIC + struct.pack("<I", len(head)) + head + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "QuantTensor":
        buf = io.BytesIO(blob)
        if buf.read(4) != cls.MAGIC:
            raise InputError("not a serialized QuantTensor")
        (n,) = struct.unpack("<I", buf.read(4))
        head = json.loads(buf.read(n))
        codes = np.frombuffer(buf.read(), dtype="<i4").reshape(head["shape"])
        return cls(codes.astype(CODE_DTYPE), QuantScheme.from_json(head["scheme"]))


def _check_finite(x: np.ndarray):
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite value in quantizer input")


def _scaled(x: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    return x / scheme.scale_for(x.ndim)


def _nearest_codes(y: np.ndarray, fmt: QuantFormat) -> np.ndarray:
    if fmt.kind == "INT":
        # np.rint rounds half to even
        return np.clip(np.rint(y), fmt.lmin, fmt.lmax)
    mags = fmt.magnitudes
    a = np.minimum(np.abs(y), mags[-1])
    hi = np.clip(np.searchsorted(mags, a, side="left"), 1, len(mags) - 1)
    lo = hi - 1
    d_lo = a - mags[lo]
    d_hi = mags[hi] - a
    # ties go to the even index, i.e. the even mantissa
    pick_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (hi % 2 == 0))
    idx = np.where(pick_hi, hi, lo)
    return np.where(y < 0, -idx, idx)


def quantize_nearest(x, scheme: QuantScheme) -> QuantTensor:
    """Round-to-nearest onto the grid, clamped to the extremes."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    y = _scaled(x, scheme)
    codes = _nearest_codes(y, scheme.format) + scheme.zero_point
    return QuantTensor(codes, scheme)


def stochastic_round_probs(x, scheme: QuantScheme) -> np.ndarray:
    """Probability of rounding *up* for each element (the Bernoulli parameter).

    For INT formats this is ``frac(x / scale)`` before clamping.  Minifloat
    formats interpolate between the two neighbouring grid points.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    y = _scaled(x, scheme)
    return _stochastic_parts(y, scheme.format)[1]


def _stochastic_parts(y: np.ndarray, fmt: QuantFormat):
    """Lower code and up-rounding probability for scaled inputs ``y``."""
    if fmt.kind == "INT":
        lower = np.floor(y)
        return lower, y - lower
    grid = np.concatenate([-fmt.magnitudes[:0:-1], fmt.magnitudes])
    yc = np.clip(y, grid[0], grid[-1])
    idx = np.clip(np.searchsorted(grid, yc, side="right") - 1, 0, len(grid) - 2)
    p = (yc - grid[idx]) / (grid[idx + 1] - grid[idx])
    return (idx - fmt.lmax).astype(np.float64), p


def quantize_stochastic(x, scheme: QuantScheme, rng, return_probs: bool = False) -> QuantTensor:
    """Unbiased stochastic rounding: ``floor(y) + Ber(y - floor(y))``, clamped, then shifted by the zero point.

    Parameters
    ----------
    x : array_like
        Real input.
    scheme : QuantScheme
        Target grid.
    rng : RngStream, int or numpy Generator
        Source of the Bernoulli draws.
    return_probs : bool
        Attach the per-element up-rounding probabilities as ``result.probs``.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    fmt = scheme.format
    lower, p = _stochastic_parts(_scaled(x, scheme), fmt)
    r = _uniforms(rng, x.shape)
    codes = np.clip(lower + (r < p), fmt.lmin, fmt.lmax) + scheme.zero_point
    return QuantTensor(codes, scheme, probs=p if return_probs else None)


def _uniforms(rng, shape) -> np.ndarray:
    if isinstance(rng, np.random.Generator):
        return rng.random(shape)
    return as_stream(rng).generator().random(shape)


def quantize(x, scheme: QuantScheme, rng=None) -> QuantTensor:
    if scheme.rounding == "stochastic":
        if rng is None:
            raise ConfigurationError("stochastic rounding needs an rng stream")
        return quantize_stochastic(x, scheme, rng)
    return quantize_nearest(x, scheme)


def dequantize(q: QuantTensor) -> np.ndarray:
    """``scale * value(code - zero_point)``; out-of-range codes are clamped on read."""
    lo, hi = q.clamp_bounds()
    codes = np.clip(q.codes, lo, hi) - q.scheme.zero_point
    return q.format.decode(codes) * q.scheme.scale_for(codes.ndim)


def fit_scale(x, fmt: QuantFormat, granularity: str = "per-tensor", axis: int = 0,
              rounding: str = "nearest", min_range: Optional[float] = None) -> QuantScheme:
    """Symmetric max-abs calibration.

    ``scale = max|x| / max_grid_value``; an all-zero tensor (or slice) gets
    scale 1.  ``min_range`` puts a floor under ``max|x|`` which is useful for
    zero-initialised parameters that must still be able to move.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise InputError("cannot calibrate an empty tensor")
    _check_finite(x)
    if granularity == "per-tensor":
        amax = np.max(np.abs(x))
        if min_range is not None:
            amax = max(amax, min_range)
        scale = amax / fmt.max_value if amax > 0 else 1.0
        return QuantScheme(fmt, float(scale), 0, None, rounding)
    if granularity != "per-channel":
        raise ConfigurationError(f"unknown granularity {granularity!r}")
    axis = axis % x.ndim
    other = tuple(i for i in range(x.ndim) if i != axis)
    amax = np.max(np.abs(x), axis=other) if other else np.abs(x)
    if min_range is not None:
        amax = np.maximum(amax, min_range)
    scale = np.where(amax > 0, amax / fmt.max_value, 1.0)
    return QuantScheme(fmt, scale, 0, axis, rounding)


def _exact_in_float64(k: int, fa: QuantFormat, fb: QuantFormat, za: int, zb: int) -> bool:
    bound = k * (fa.lmax + abs(za)) * (fb.lmax + abs(zb))
    return bound < 2 ** 53


def qmatmul(a: QuantTensor, b: QuantTensor) -> np.ndarray:
    """Product of two quantized operands.

    INT x INT accumulates code products exactly and rescales once per output
    element by ``scale_a * scale_b``; the operand scales must not vary along
    the contracted axis.  Minifloat operands are dequantized and multiplied.
    """
    if a.codes.ndim < 1 or b.codes.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise InputError(f"qmatmul shape mismatch {a.shape} x {b.shape}")
    sa, sb = a.scheme, b.scheme
    factorable = (sa.axis is None or sa.axis % a.codes.ndim != a.codes.ndim - 1) and \
                 (sb.axis is None or sb.axis == 1)
    if sa.format.kind != "INT" or sb.format.kind != "INT" or not factorable:
        return dequantize(a) @ dequantize(b)
    lo, hi = a.clamp_bounds()
    ca = np.clip(a.codes, lo, hi).astype(np.int64) - sa.zero_point
    lo, hi = b.clamp_bounds()
    cb = np.clip(b.codes, lo, hi).astype(np.int64) - sb.zero_point
    if _exact_in_float64(a.shape[-1], sa.format, sb.format, sa.zero_point, sb.zero_point):
        # every partial sum is an integer below 2**53, so float64 BLAS is exact
        acc = ca.astype(np.float64) @ cb.astype(np.float64)
    else:
        acc = (ca @ cb).astype(np.float64)
    scale_a = sa.scale_for(a.codes.ndim)
    scale_b = sb.scale if sb.axis is None else sb.scale[None, :]
    return acc * scale_a * scale_b
