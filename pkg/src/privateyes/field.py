"""Exact arithmetic in the prime field Z_q and fixed-point encoding of reals.

Model weights are reals; everything that crosses a wire is an element of
Z_q. The codec maps reals onto a 2^-f_bits grid, with negative values in
the upper half of the field (two's-complement style) and a centered
representative on the way back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_MODULUS = 2**127 - 1  # Mersenne prime, fast reduction, ~2^127
DEFAULT_FRACTIONAL_BITS = 16
ELEMENT_BYTES = 16
MAGNITUDE_BITS = 40  # encodable reals satisfy |x| < 2^40

# Deterministic Miller-Rabin witnesses, valid for all n < 3.3 * 10^24.
_MR_WITNESSES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


class FieldError(ValueError):
    """Base class for field and codec errors."""


class ParameterMismatchError(FieldError):
    """Operands belong to fields with different parameters."""


class EncodingRangeError(FieldError):
    """Real value outside the encodable range."""


class DecodeOverflowError(FieldError):
    """Centered representative too large; signals aggregation wraparound."""


def is_prime(n: int) -> bool:
    if n < 2:
        return False
    for p in _MR_WITNESSES:
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_WITNESSES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class FieldParams:
    """Modulus and fixed-point precision shared by all parties."""

    q: int = DEFAULT_MODULUS
    f_bits: int = DEFAULT_FRACTIONAL_BITS

    def __post_init__(self):
        if self.q < 2 or not is_prime(self.q):
            raise FieldError(f"modulus {self.q} is not prime")
        if self.q >= 2 ** (8 * ELEMENT_BYTES):
            raise FieldError("modulus does not fit the 16-byte wire encoding")
        if self.f_bits < 0:
            raise FieldError("f_bits must be non-negative")

    def element(self, value: int) -> "FieldElement":
        return FieldElement(value % self.q, self)


@dataclass(frozen=True)
class FieldElement:
    """A value in [0, q) with modular operators."""

    value: int
    params: FieldParams

    def __post_init__(self):
        if not 0 <= self.value < self.params.q:
            raise FieldError(f"value {self.value} outside [0, {self.params.q})")

    def _check(self, other: "FieldElement") -> None:
        if not isinstance(other, FieldElement):
            raise TypeError(f"expected FieldElement, got {type(other).__name__}")
        if other.params != self.params:
            raise ParameterMismatchError("operands use different field parameters")

    def __add__(self, other: "FieldElement") -> "FieldElement":
        self._check(other)
        return FieldElement((self.value + other.value) % self.params.q, self.params)

    def __sub__(self, other: "FieldElement") -> "FieldElement":
        self._check(other)
        return FieldElement((self.value - other.value) % self.params.q, self.params)

    def __mul__(self, other: "FieldElement") -> "FieldElement":
        self._check(other)
        return FieldElement((self.value * other.value) % self.params.q, self.params)

    def __neg__(self) -> "FieldElement":
        return FieldElement(-self.value % self.params.q, self.params)

    def centered(self) -> int:
        """Representative in (-q/2, q/2]."""
        return self.value if self.value <= self.params.q // 2 else self.value - self.params.q


def fe_add(a: FieldElement, b: FieldElement) -> FieldElement:
    return a + b


def fe_mul(a: FieldElement, b: FieldElement) -> FieldElement:
    return a * b


@dataclass(frozen=True)
class FixedPointCodec:
    """Real <-> field bridge at resolution 2^-f_bits.

    ``signed=False`` gives plain unsigned residue semantics (integer mode,
    used by the worked small-field examples); the default signed mode maps
    negatives to the upper half of Z_q and decodes the centered
    representative.
    """

    params: FieldParams = FieldParams()
    signed: bool = True

    def __post_init__(self):
        # Headroom: sums of up to 2^24 encoded values must never wrap.
        if self.signed and 2 ** (self.params.f_bits + MAGNITUDE_BITS) >= self.params.q // 2:
            raise FieldError("modulus too small for the fixed-point headroom")

    @property
    def scale(self) -> int:
        return 2**self.params.f_bits

    def encode(self, x: float) -> int:
        if not np.isfinite(x) or abs(x) >= 2**MAGNITUDE_BITS:
            raise EncodingRangeError(f"value {x!r} outside encodable range")
        if not self.signed and x < 0:
            raise EncodingRangeError("unsigned codec cannot encode negatives")
        return round(x * self.scale) % self.params.q

    def decode(self, e: int) -> float:
        e %= self.params.q
        if not self.signed:
            return e / self.scale
        centered = e if e <= self.params.q // 2 else e - self.params.q
        if abs(centered) >= 2 ** (self.params.f_bits + MAGNITUDE_BITS):
            raise DecodeOverflowError(f"centered magnitude {centered} too large")
        return centered / self.scale

    def encode_vector(self, xs) -> list[int]:
        return [self.encode(float(x)) for x in xs]

    def decode_vector(self, es) -> np.ndarray:
        return np.array([self.decode(e) for e in es], dtype=np.float64)

    def quantize(self, xs) -> np.ndarray:
        """Snap a real vector onto the codec grid (encode then decode)."""
        return self.decode_vector(self.encode_vector(xs))


def encode_fixed(x: float, codec: FixedPointCodec) -> int:
    return codec.encode(x)


def decode_fixed(e: int, codec: FixedPointCodec) -> float:
    return codec.decode(e)


def element_to_bytes(value: int) -> bytes:
    return int(value).to_bytes(ELEMENT_BYTES, "little")


def element_from_bytes(data: bytes) -> int:
    if len(data) != ELEMENT_BYTES:
        raise FieldError(f"expected {ELEMENT_BYTES} bytes, got {len(data)}")
    return int.from_bytes(data, "little")


def vector_to_bytes(values) -> bytes:
    return b"".join(int(v).to_bytes(ELEMENT_BYTES, "little") for v in values)


def vector_from_bytes(data: bytes) -> list[int]:
    if len(data) % ELEMENT_BYTES != 0:
        raise FieldError("payload length is not a multiple of the element size")
    return [
        int.from_bytes(data[i : i + ELEMENT_BYTES], "little")
        for i in range(0, len(data), ELEMENT_BYTES)
    ]
