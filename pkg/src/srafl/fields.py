"""Prime-field arithmetic, the commitment group, and the real<->field bridge.

Field elements are plain Python ints (or int64 numpy arrays) in [0, q).
q is kept below 2^32 so that a single product of two reduced elements fits
in int64; anything wider (group arithmetic mod lam ~ 2^63) runs on Python
ints, which are exact at any width.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

# Constraint for the 16-bit limb tricks below: inner_dim * q * 2^16 < 2^63.
_MAX_INNER_DIM = 32_000


class DomainError(ValueError):
    """Raised when a value to quantize falls outside the open unit interval."""


class ParamError(ValueError):
    """Raised when configured parameters violate a structural invariant."""


@dataclass(frozen=True)
class FieldParams:
    """Prime field F_q, quantization amplifier p, and the order-q commitment group.

    g generates the order-q subgroup of the integers mod lam, where lam is a
    prime with q | lam-1.  n_users enters only through the wraparound bound
    2*p*n*p < q (sums of n quantized values, squared circuit terms).
    """

    q: int
    p: int
    lam: int
    g: int

    def __post_init__(self):
        if self.q < 3 or self.lam < 3:
            raise ParamError("q and lam must be odd primes")
        if (self.lam - 1) % self.q != 0:
            raise ParamError("q must divide lam - 1")
        if self.q >= 1 << 32:
            raise ParamError("q must stay below 2^32 for int64-exact products")
        if not (1 < self.g < self.lam):
            raise ParamError("g out of range")
        if pow(self.g, self.q, self.lam) != 1 or self.g == 1:
            raise ParamError("g does not have order q in the group")
        if not 1 <= self.p < self.q:
            raise ParamError("amplifier p must lie in [1, q)")

    def check_wraparound(self, n_users: int):
        if 2 * self.p * n_users * self.p >= self.q:
            raise ParamError(
                f"wraparound bound violated: 2*p*N*p = {2 * self.p * n_users * self.p} >= q = {self.q}"
            )

    # -- scalar field ops ---------------------------------------------------

    def add(self, a: int, b: int) -> int:
        return (a + b) % self.q

    def sub(self, a: int, b: int) -> int:
        return (a - b) % self.q

    def mul(self, a: int, b: int) -> int:
        return (a * b) % self.q

    def neg(self, a: int) -> int:
        return (-a) % self.q

    def inv(self, a: int) -> int:
        if a % self.q == 0:
            raise ZeroDivisionError("zero has no inverse")
        return pow(a, self.q - 2, self.q)

    def pow(self, a: int, e: int) -> int:
        return pow(a, e, self.q)

    # -- group ops (mod lam, Python ints) -----------------------------------

    def group_mul(self, a: int, b: int) -> int:
        return (a * b) % self.lam

    def group_exp(self, base: int, e: int) -> int:
        return pow(base, int(e) % self.q, self.lam)

    # -- centered representatives -------------------------------------------

    def centered(self, v):
        """Map [0, q) to the symmetric representative in (-q/2, q/2]."""
        v = np.asarray(v, dtype=np.int64)
        half = (self.q - 1) // 2
        return np.where(v > half, v - self.q, v)


# Default parameters: q is a 31-bit-class prime, lam = q*c + 1 a 63-bit prime,
# g = 2^((lam-1)/q) mod lam.  Verified prime/order by the test suite.
DEFAULT_Q = 2_147_483_659
DEFAULT_LAMBDA = DEFAULT_Q * 2_147_483_674 + 1
DEFAULT_G = pow(2, (DEFAULT_LAMBDA - 1) // DEFAULT_Q, DEFAULT_LAMBDA)
DEFAULT_P = 1000

# Small families for statistical and exhaustive tests.
TINY_Q17 = dict(q=17, lam=103, g=64)
SMALL_Q10007 = dict(q=10007, lam=240_169, g=205_555)


def default_field(p: int = DEFAULT_P) -> FieldParams:
    return FieldParams(q=DEFAULT_Q, p=p, lam=DEFAULT_LAMBDA, g=DEFAULT_G)


def tiny_field(p: int = 2) -> FieldParams:
    return FieldParams(p=p, **TINY_Q17)


def small_field(p: int = 10) -> FieldParams:
    return FieldParams(p=p, **SMALL_Q10007)


# -- vectorized helpers -----------------------------------------------------


def as_vec(values, q: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.int64) % q
    return v


def mul_mod(a, b, q: int) -> np.ndarray:
    """Elementwise (a*b) mod q on int64 arrays; exact because q < 2^32."""
    return (np.asarray(a, dtype=np.int64) * np.asarray(b, dtype=np.int64)) % q


def mat_mul_mod(a, b, q: int) -> np.ndarray:
    """Exact (a @ b) mod q via 16-bit limb splitting of b.

    a: (..., k), b: (k, m), entries reduced mod q.  Sums of k products of a
    31-bit value by a 16-bit limb stay under 2^63 for k <= 32000.
    """
    a = np.asarray(a, dtype=np.int64) % q
    b = np.asarray(b, dtype=np.int64) % q
    k = b.shape[0]
    if k > _MAX_INNER_DIM:
        raise ParamError(f"inner dimension {k} too large for exact matmul")
    hi, lo = b >> 16, b & 0xFFFF
    return (((a @ hi) % q << 16) + a @ lo) % q


def dot_mod(a, b, q: int) -> np.ndarray:
    """Exact sum(a*b, axis=-1) mod q; same limb trick as mat_mul_mod."""
    a = np.asarray(a, dtype=np.int64) % q
    b = np.asarray(b, dtype=np.int64) % q
    if a.shape[-1] > _MAX_INNER_DIM:
        raise ParamError("inner dimension too large for exact dot")
    hi, lo = b >> 16, b & 0xFFFF
    return (((a * hi).sum(axis=-1) % q << 16) + (a * lo).sum(axis=-1)) % q


def inv_vec(values, q: int) -> np.ndarray:
    return np.array([pow(int(v), q - 2, q) for v in np.atleast_1d(np.asarray(values))],
                    dtype=np.int64)


def powers_mod(x: int, n: int, q: int) -> np.ndarray:
    """[1, x, x^2, ..., x^(n-1)] mod q."""
    out = np.empty(n, dtype=np.int64)
    acc = 1
    for i in range(n):
        out[i] = acc
        acc = (acc * x) % q
    return out


def multi_exp(bases, exps, mod: int, window: int = 0) -> int:
    """prod_i bases[i]^exps[i] mod `mod` via the bucket (Pippenger) method.

    One squaring chain plus one multiply per nonzero digit beats independent
    pow() calls by ~5x at commitment sizes.  The window grows with the input
    count so the 2^w bucket sweep never dominates small products.
    """
    evec = np.asarray(exps, dtype=np.int64)
    keep = evec != 0
    if not np.any(keep):
        return 1
    evec = evec[keep]
    blist = [int(b) for b, k in zip(bases, keep) if k]
    if len(blist) < 4:
        acc = 1
        for b, e in zip(blist, evec.tolist()):
            acc = acc * pow(b, int(e), mod) % mod
        return acc
    if not window:
        window = max(2, min(8, len(blist).bit_length()))
    max_bits = int(evec.max()).bit_length()
    nwin = (max_bits + window - 1) // window
    mask = (1 << window) - 1
    acc = 1
    for w in range(nwin - 1, -1, -1):
        if acc != 1:
            for _ in range(window):
                acc = acc * acc % mod
        digits = (evec >> (w * window)) & mask
        buckets = [1] * (mask + 1)
        for b, digit in zip(blist, digits.tolist()):
            if digit:
                buckets[digit] = buckets[digit] * b % mod
        running, total = 1, 1
        for d in range(mask, 0, -1):
            bd = buckets[d]
            if bd != 1:
                running = running * bd % mod
            total = total * running % mod
        acc = acc * total % mod
    return acc


# -- polynomial helpers (coefficient lists, lowest degree first) -------------


def _pack_slots(arr: np.ndarray, sb: int) -> bytes:
    as_bytes = arr.astype("<u8").view(np.uint8).reshape(len(arr), 8)
    if sb == 8:
        return as_bytes.tobytes()
    buf = np.zeros((len(arr), sb), dtype=np.uint8)
    buf[:, : min(sb, 8)] = as_bytes[:, : min(sb, 8)]
    return buf.tobytes()


def poly_mul_mod(a, b, q: int) -> np.ndarray:
    """Exact polynomial product mod q via Kronecker substitution.

    Coefficients (< 2^32) are packed into byte-aligned slots of one big
    integer each; a single big-int multiply carries the whole convolution,
    keeping the cost subquadratic for proof-sized products.  Slot width
    covers min(la,lb)*(q-1)^2, so slots never overflow into neighbours.
    """
    a = np.asarray(a, dtype=np.int64) % q
    b = np.asarray(b, dtype=np.int64) % q
    la, lb = len(a), len(b)
    if la == 0 or lb == 0:
        return np.zeros(0, dtype=np.int64)
    bound = min(la, lb) * (q - 1) * (q - 1)
    slot = (bound.bit_length() + 8) // 8 * 8
    sb = slot // 8
    if sb > 14:
        raise ParamError("polynomial too long for exact slot extraction")
    prod = (int.from_bytes(_pack_slots(a, sb), "little")
            * int.from_bytes(_pack_slots(b, sb), "little"))
    n = la + lb - 1
    raw = np.frombuffer(prod.to_bytes((n + 1) * sb, "little"),
                        dtype=np.uint8)[: n * sb].reshape(n, sb)
    lo8 = np.zeros((n, 8), dtype=np.uint8)
    lo8[:, : min(sb, 8)] = raw[:, : min(sb, 8)]
    lo = lo8.view("<u8").reshape(n)
    out = (lo % np.uint64(q)).astype(np.int64)
    if sb > 8:
        hi = np.zeros((n, 8), dtype=np.uint8)
        hi[:, : sb - 8] = raw[:, 8:]
        hi64 = hi.view("<u8").reshape(n).astype(np.int64)
        shift = pow(1 << 64, 1, q)
        out = (out + hi64 % q * shift) % q
    return out


def poly_mul_many(rows, kernel, q: int) -> np.ndarray:
    """Convolve every row of (B, n) with one kernel (m,), all mod q.

    All rows ride in a single Kronecker product: row i occupies slot window
    [i*(n+m-1), (i+1)*(n+m-1)), so one big-int multiply carries B convolutions.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.int64)) % q
    kernel = np.asarray(kernel, dtype=np.int64) % q
    b, n = rows.shape
    m = len(kernel)
    out_len = n + m - 1
    bound = min(n, m) * (q - 1) * (q - 1)
    slot = (bound.bit_length() + 8) // 8 * 8
    sb = slot // 8
    if sb > 14:
        raise ParamError("polynomial too long for exact slot extraction")
    buf = np.zeros((b, out_len, sb), dtype=np.uint8)
    as_bytes = rows.astype("<u8").view(np.uint8).reshape(b, n, 8)
    buf[:, :n, : min(sb, 8)] = as_bytes[:, :, : min(sb, 8)]
    big = (int.from_bytes(buf.tobytes(), "little")
           * int.from_bytes(_pack_slots(kernel, sb), "little"))
    raw = np.frombuffer(big.to_bytes(b * out_len * sb + sb, "little"),
                        dtype=np.uint8)[: b * out_len * sb].reshape(b, out_len, sb)
    lo8 = np.zeros((b, out_len, 8), dtype=np.uint8)
    lo8[:, :, : min(sb, 8)] = raw[:, :, : min(sb, 8)]
    out = (lo8.reshape(b * out_len, 8).view("<u8").reshape(b, out_len)
           % np.uint64(q)).astype(np.int64)
    if sb > 8:
        hi = np.zeros((b, out_len, 8), dtype=np.uint8)
        hi[:, :, : sb - 8] = raw[:, :, 8:]
        hi64 = hi.reshape(b * out_len, 8).view("<u8").reshape(b, out_len).astype(np.int64)
        out = (out + hi64 % q * pow(1 << 64, 1, q)) % q
    return out


def poly_eval_mod(coeffs, x, q: int):
    """Horner evaluation; x may be a scalar or an array of points."""
    coeffs = np.asarray(coeffs, dtype=np.int64)
    x = np.asarray(x, dtype=np.int64) % q
    acc = np.zeros_like(x)
    for c in coeffs[::-1]:
        acc = (acc * x + int(c)) % q
    return acc


def poly_divmod_mod(num, den, q: int):
    """Polynomial division with remainder mod q (lists, lowest degree first)."""
    num = [int(c) % q for c in num]
    den = [int(c) % q for c in den]
    while den and den[-1] == 0:
        den.pop()
    if not den:
        raise ZeroDivisionError("division by zero polynomial")
    out = list(num)
    lead_inv = pow(den[-1], q - 2, q)
    dd = len(den) - 1
    quot = [0] * max(1, len(num) - dd)
    for i in range(len(num) - 1, dd - 1, -1):
        c = out[i] % q
        if c:
            factor = (c * lead_inv) % q
            quot[i - dd] = factor
            for j, dc in enumerate(den):
                out[i - dd + j] = (out[i - dd + j] - factor * dc) % q
    rem = out[:dd]
    while rem and rem[-1] == 0:
        rem.pop()
    return quot, rem


def poly_deg(coeffs) -> int:
    """Degree of a coefficient list; -1 for the zero polynomial."""
    for i in range(len(coeffs) - 1, -1, -1):
        if int(coeffs[i]) != 0:
            return i
    return -1


def lagrange_interp_coeffs(points, values, q: int) -> np.ndarray:
    """Coefficients of the unique degree-(n-1) polynomial through the points."""
    m = interp_to_coeff_matrix(points, q)
    return mat_mul_mod(m, np.asarray(values, dtype=np.int64).reshape(-1, 1), q)[:, 0]


def interp_to_coeff_matrix(points, q: int) -> np.ndarray:
    """Matrix M with coeffs = values @ M.T for interpolation at fixed points.

    M[c, j] is the c-th coefficient of the j-th Lagrange basis polynomial.
    """
    points = [int(x) % q for x in points]
    n = len(points)
    full = np.zeros(1, dtype=np.int64)
    full[0] = 1
    for x in points:
        nxt = np.zeros(len(full) + 1, dtype=np.int64)
        nxt[1:] = full
        nxt[:-1] = (nxt[:-1] - x * full) % q
        full = nxt
    m = np.zeros((n, n), dtype=np.int64)
    for j, x in enumerate(points):
        quot, rem = poly_divmod_mod(full, [(-x) % q, 1], q)
        assert not rem
        quot = np.asarray(quot[:n], dtype=np.int64)
        denom = int(poly_eval_mod(quot, x, q))
        m[:, j] = mul_mod(quot, pow(denom, q - 2, q), q)
    return m


@lru_cache(maxsize=None)
def _factorial_tables(n: int, q: int):
    """(i!, (i!)^-1) for i < n, both mod q."""
    fact = np.empty(n, dtype=np.int64)
    acc = 1
    for i in range(n):
        fact[i] = acc
        acc = acc * (i + 1) % q
    inv = np.empty(n, dtype=np.int64)
    cur = pow(int(fact[n - 1]), q - 2, q)
    for i in range(n - 1, -1, -1):
        inv[i] = cur
        cur = cur * i % q
    return fact, inv


def interp_consecutive_batch(values, q: int, start: int = 1) -> np.ndarray:
    """Monomial coefficients of the polynomials through (start+i, values[..., i]).

    Row-batched and quasi-linear: Newton's forward differences come from one
    convolution per row, the Newton-to-monomial conversion is a Horner chain
    vectorized across rows, and a final Taylor shift moves the nodes from
    0..n-1 to start..start+n-1.  Requires n < q (factorials must invert).
    """
    values = np.atleast_2d(np.asarray(values, dtype=np.int64)) % q
    b, n = values.shape
    if n >= q:
        raise ParamError("consecutive interpolation needs n < q")
    if n == 1:
        return values.copy()
    fact, invf = _factorial_tables(n, q)
    signs = np.where(np.arange(n) % 2 == 0, 1, q - 1).astype(np.int64)
    kernel = mul_mod(invf, signs, q)
    scaled = mul_mod(values, invf, q)
    newton = poly_mul_many(scaled, kernel, q)[:, :n]
    # Horner chain g_k = a_k + (s - k) g_{k+1} over nodes s = 0..n-1:
    # shift the old coefficients up one slot and add -k times them in place
    res = np.zeros((b, n), dtype=np.int64)
    res[:, 0] = newton[:, n - 1]
    deg = 0
    old = np.empty((b, n), dtype=np.int64)
    scratch = np.empty((b, n), dtype=np.int64)
    for k in range(n - 2, -1, -1):
        old_head = old[:, : deg + 1]
        np.copyto(old_head, res[:, : deg + 1])
        res[:, 1: deg + 2] = old_head
        res[:, 0] = newton[:, k]
        if k:
            sh = scratch[:, : deg + 1]
            np.multiply(old_head, q - k % q, out=sh)
            res[:, : deg + 1] += sh
            res[:, : deg + 2] %= q
        else:
            res[:, 0] %= q
        deg += 1
    if start % q == 0:
        return res
    # Taylor shift: f(t) = g(t - start)
    c = (-start) % q
    cpows = mul_mod(powers_mod(c, n, q), invf, q)
    scaled_rev = mul_mod(res, fact, q)[:, ::-1]
    w = poly_mul_many(scaled_rev, cpows, q)[:, :n]
    return mul_mod(w[:, ::-1], invf, q)


def lagrange_eval_weights(points, at: int, q: int) -> np.ndarray:
    """w_j with f(at) = sum_j w_j f(points[j]) for degree < len(points)."""
    points = [int(x) % q for x in points]
    at = int(at) % q
    n = len(points)
    out = np.empty(n, dtype=np.int64)
    for j in range(n):
        num, den = 1, 1
        for m_, x in enumerate(points):
            if m_ == j:
                continue
            num = num * ((at - x) % q) % q
            den = den * ((points[j] - x) % q) % q
        out[j] = num * pow(den, q - 2, q) % q
    return out


# -- quantization bridge ------------------------------------------------------

CLIP_EPS = 1e-6


def clip_updates(x: np.ndarray, eps: float = CLIP_EPS):
    """Clip into (-1+eps, 1-eps); returns (clipped, how many entries moved)."""
    x = np.asarray(x, dtype=np.float64)
    clipped = np.clip(x, -1.0 + eps, 1.0 - eps)
    return clipped, int(np.sum(clipped != x))


def encode_scaled(x, fp: FieldParams, rng: np.random.Generator) -> np.ndarray:
    """Stochastically round p*x to an integer and map negatives to q+value.

    floor(p*x) with probability 1-frac, floor(p*x)+1 with probability frac,
    where frac = p*x - floor(p*x).  No domain restriction: used for update
    entries (|x|<1) and for witness scalars like norms and inverse norms.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    scaled = fp.p * x
    low = np.floor(scaled)
    frac = scaled - low
    bump = rng.random(x.shape) < frac
    ints = low.astype(np.int64) + bump
    return ints % fp.q


def quantize(x, fp: FieldParams, rng: np.random.Generator) -> np.ndarray:
    """Unbiased stochastic quantization of a vector in (-1, 1)^d into F_q."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if np.any(np.abs(x) >= 1.0):
        raise DomainError("quantize input must lie in (-1, 1); clip first")
    return encode_scaled(x, fp, rng)


def dequantize(v, fp: FieldParams, power: int = 1) -> np.ndarray:
    """Centered representative divided by p^power (power>1 for product terms)."""
    return fp.centered(v) / float(fp.p) ** power


# -- deterministic rng tree ---------------------------------------------------


def _label_words(parts) -> tuple[int, ...]:
    words = []
    for part in parts:
        if isinstance(part, (int, np.integer)):
            words.append(int(part) & 0xFFFFFFFF)
        else:
            digest = hashlib.blake2s(str(part).encode()).digest()
            words.append(int.from_bytes(digest[:4], "little"))
    return tuple(words)


def substream(root_seed: int, *parts) -> np.random.Generator:
    """Independent, reproducible generator for a labelled branch of the run."""
    seq = np.random.SeedSequence(entropy=int(root_seed), spawn_key=_label_words(parts))
    return np.random.Generator(np.random.Philox(seq))
