"""Prime-field arithmetic, additive secret sharing and fixed-point codes.

Field elements are plain Python ints or numpy ``uint64`` arrays holding
values in ``[0, p)``.  A share set is an array whose leading axis indexes the
parties, so ``shares[i]`` is party ``i``'s piece (scalar or vector).

All functions accept either scalars or arrays; array inputs are processed
elementwise, which is how the summation protocol shares a whole minibatch of
messages at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidPartyCount, RangeOverflow

MERSENNE_61 = 2**61 - 1
SMALL_PRIME = 257
PRECISION = 5

# Per-value magnitude bound for anything routed through the default field.
M_MAX = 1e10

FIELD_DTYPE = np.dtype("<u8")


@dataclass(frozen=True)
class PrimeField:
    """The finite field Z_p for a prime ``p`` below 2**62."""

    p: int = MERSENNE_61

    def __post_init__(self):
        if not 2 < self.p < 2**62:
            raise ValueError(f"modulus {self.p} outside supported range")

    @property
    def half(self) -> int:
        # c <= p/2 for odd p is the same test as c <= (p-1)//2
        return self.p // 2

    def element(self, value) -> np.ndarray:
        arr = np.asarray(value)
        if arr.dtype.kind == "i" and np.any(arr < 0):
            raise ValueError("field elements are non-negative")
        arr = arr.astype(np.uint64)
        if np.any(arr >= self.p):
            raise ValueError("field element not reduced modulo p")
        return arr

    def add(self, a, b):
        """``(a + b) mod p``."""
        out = (np.asarray(a, dtype=np.uint64) + np.asarray(b, dtype=np.uint64)) % np.uint64(self.p)
        return _unwrap(out, a, b)

    def sum(self, values, axis=0):
        """Reduce ``values`` along ``axis`` with modular addition.

        Reduction happens one term at a time so intermediates never exceed
        ``2p``, which keeps 64-bit arithmetic exact.
        """
        arr = np.asarray(values, dtype=np.uint64)
        if axis != 0:
            arr = np.moveaxis(arr, axis, 0)
        p = np.uint64(self.p)
        if len(arr) == 0:
            return np.zeros(arr.shape[1:], dtype=np.uint64)
        acc = arr[0] % p
        for row in arr[1:]:
            acc = (acc + row) % p
        return acc

    def random(self, rng: np.random.Generator, size=None):
        """Uniform draws from Z_p.

        ``Generator.integers`` uses rejection on a bounded range, so there is
        no modulo bias.
        """
        return rng.integers(0, self.p, size=size, dtype=np.uint64)

    def share(self, secret, n: int, rng: np.random.Generator) -> np.ndarray:
        """Split ``secret`` into ``n`` additive shares.

        The first ``n - 1`` shares are drawn before the secret is read; the
        last one is ``(p - (sum(r) mod p) + s) mod p``.
        """
        if n < 2:
            raise InvalidPartyCount(f"need at least 2 parties, got {n}")
        shape = np.shape(secret)
        masks = self.random(rng, size=(n - 1,) + shape)
        s = self.element(secret)
        p = np.uint64(self.p)
        last = (p - self.sum(masks) + s) % p
        return np.concatenate([masks, last[np.newaxis]], axis=0)

    def reconstruct(self, shares):
        """``(sum of shares) mod p`` over the party axis."""
        out = self.sum(shares, axis=0)
        if out.ndim == 0:
            return int(out)
        return out

    def encode(self, x, precision: int = PRECISION):
        """Fixed-point code ``int(10**precision * x) mod p``.

        ``int`` truncates toward zero; negative reals land in the upper half
        of the field.
        """
        arr = np.asarray(x, dtype=np.float64)
        limit = self.p / (2 * 10**precision)
        if not np.all(np.isfinite(arr)) or np.any(np.abs(arr) >= limit):
            raise RangeOverflow(f"|x| must be below {limit:.6g}")
        scaled = _exact_trunc_product(arr, float(10**precision))
        code = np.mod(scaled, np.int64(self.p)).astype(np.uint64)
        if code.ndim == 0:
            return int(code)
        return code

    def decode(self, code, precision: int = PRECISION):
        """Inverse of :meth:`encode` up to truncation error."""
        c = np.asarray(code, dtype=np.uint64)
        signed = c.astype(np.int64)
        signed = np.where(c > np.uint64(self.half), signed - np.int64(self.p), signed)
        out = signed / float(10**precision)
        if out.ndim == 0:
            return float(out)
        return out


def _split(a):
    c = 134217729.0 * a  # 2**27 + 1
    hi = c - (c - a)
    return hi, a - hi


def _exact_trunc_product(x: np.ndarray, scale: float) -> np.ndarray:
    """``trunc(x * scale)`` of the exact real product, as int64.

    The float product can round onto an integer from the wrong side; the
    Dekker two-product error term tells which side the exact value lies on.
    """
    prod = x * scale
    xh, xl = _split(x)
    sh, sl = _split(scale)
    err = ((xh * sh - prod) + xh * sl + xl * sh) + xl * sl
    t = np.trunc(prod)
    integral = t == prod
    t = np.where(integral & (prod > 0) & (err < 0), t - 1.0, t)
    t = np.where(integral & (prod < 0) & (err > 0), t + 1.0, t)
    return t.astype(np.int64)


def _unwrap(out, *inputs):
    if out.ndim == 0 and all(np.ndim(v) == 0 for v in inputs):
        return int(out)
    return out


DEFAULT_FIELD = PrimeField(MERSENNE_61)
TEST_FIELD = PrimeField(SMALL_PRIME)


def to_bytes(elements) -> bytes:
    """Serialize field elements as 8-byte little-endian words."""
    return np.asarray(elements, dtype=np.uint64).astype(FIELD_DTYPE, copy=False).tobytes()


def from_bytes(data: bytes) -> np.ndarray:
    if len(data) % 8:
        raise ValueError("field payload length is not a multiple of 8")
    return np.frombuffer(data, dtype=FIELD_DTYPE).astype(np.uint64)


# module-level conveniences bound to the default field
field_add = DEFAULT_FIELD.add
share = DEFAULT_FIELD.share
reconstruct = DEFAULT_FIELD.reconstruct
encode = DEFAULT_FIELD.encode
decode = DEFAULT_FIELD.decode
