"""Plaintext robust aggregation (sign-voting and inverse-norm weighting) and
the arithmetic circuits through which provers attest their statistics.

Sign voting: each user contributes e = sign(x) per coordinate (1 for >= 0,
0 for negative); the vote margin decides a +-1 mask applied to the summed
update.  Inverse-norm weighting: each user contributes omega = 1/||x||_2 and
omega*x; the server outputs the weighted mean, one smoothed step toward the
geometric median.

Circuits operate on quantized field values.  The sign circuit, repeated per
coordinate, checks booleanity of the claimed sign bit and of a binary
decomposition of |x|, plus the consistency (2e-1)*x = sum 2^j b_j.  The norm
circuit splits into a repeated squaring part (per-block sums of squares) and
a scalar tail over witnesses (omega, n, s) with residuals r1 = n^2 - s and
r2 = omega*n - p^2 that vanish up to quantization noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .fields import FieldParams, as_vec, mul_mod
from .snip import IN, Circuit, CircuitBuilder


class NormError(ValueError):
    """An update with (near-)zero norm cannot be inverse-norm weighted."""


RLR_MODE_PAPER = "paper"
RLR_MODE_ORIG = "rlr-orig"


def sign_bits(values, fp: FieldParams) -> np.ndarray:
    """1 for centered representative >= 0 (zero counts as positive), else 0."""
    return (fp.centered(values) >= 0).astype(np.int64)


def rlr_mask(sign_sums, n_users: int, threshold_t: int, mode: str = RLR_MODE_ORIG) -> np.ndarray:
    """+-1 mask from per-coordinate counts of positive signs; theta = T+1.

    mode 'paper': +1 iff max(S, N-S) >= theta (all-ones whenever N >= 2 theta).
    mode 'rlr-orig': +1 iff |2S - N| >= theta (a real vote margin).
    """
    s = np.asarray(sign_sums, dtype=np.int64)
    theta = threshold_t + 1
    if mode == RLR_MODE_PAPER:
        keep = np.maximum(s, n_users - s) >= theta
    elif mode == RLR_MODE_ORIG:
        keep = np.abs(2 * s - n_users) >= theta
    else:
        raise ValueError(f"unknown rlr mode {mode!r}")
    return np.where(keep, 1, -1).astype(np.int64)


def rlr_aggregate(summed, mask, fp: FieldParams) -> np.ndarray:
    """Elementwise mask application in the field (+1 -> 1, -1 -> q-1)."""
    lifted = np.where(np.asarray(mask) == 1, 1, fp.q - 1).astype(np.int64)
    return mul_mod(as_vec(summed, fp.q), lifted, fp.q)


def rfa_weights(updates, eps_norm: float = 1e-8) -> np.ndarray:
    norms = np.linalg.norm(np.asarray(updates, dtype=np.float64), axis=-1)
    if np.any(norms <= eps_norm):
        raise NormError("update norm at or below eps_norm")
    return 1.0 / norms


def rfa_aggregate(updates, eps_norm: float = 1e-8) -> np.ndarray:
    """Inverse-norm weighted mean: (sum w_i x_i) / (sum w_i), w_i = 1/||x_i||."""
    updates = np.asarray(updates, dtype=np.float64)
    w = rfa_weights(updates, eps_norm)
    return (w[:, None] * updates).sum(axis=0) / w.sum()


# -- sign instantiation -------------------------------------------------------------


def bit_width(p: int) -> int:
    """Bits to hold |quantized entry| <= p."""
    return max(1, int(np.ceil(np.log2(p + 1))))


@lru_cache(maxsize=None)
def build_sign_circuit(p: int, positions: int) -> Circuit:
    """Block circuit checking e = sign(x) for `positions` coordinates.

    Inputs, per-vector layout: x[0..m), e[m..2m), then bit j of coordinate p
    at (2+j)*m + p.  Outputs: e_p for each position, then three residuals
    (sign booleanity, bit booleanity, decomposition consistency), all zero
    for honest witnesses.
    """
    bw = bit_width(p)
    m = positions
    b = CircuitBuilder(m * (2 + bw))
    e_gates, bit_gates, cons_terms = [], [], []
    for pos in range(m):
        x_ref = (IN, pos)
        e_ref = (IN, m + pos)
        e_gates.append(b.mul(b.lin(e_ref), b.lin(e_ref, const=-1)))
        bit_refs = [(IN, (2 + j) * m + pos) for j in range(bw)]
        for ref in bit_refs:
            bit_gates.append(b.mul(b.lin(ref), b.lin(ref, const=-1)))
        # (2e-1)*x must equal the bit decomposition of |x|
        g = b.mul(b.affine(const=-1, terms=((e_ref, 2),)), b.lin(x_ref))
        cons_terms.append((g, 1))
        cons_terms.extend((ref, -(1 << j)) for j, ref in enumerate(bit_refs))
    for pos in range(m):
        b.output(b.lin((IN, m + pos)))
    b.output(b.affine(terms=tuple((g, 1) for g in e_gates)))
    b.output(b.affine(terms=tuple((g, 1) for g in bit_gates)))
    b.output(b.affine(terms=tuple(cons_terms)))
    return b.build()


def sign_witnesses(x_field, fp: FieldParams):
    """(e, bits) for quantized values: e = sign, bits decompose |x|.

    bits come back as (bw, d): row j holds bit j of every coordinate.
    """
    x_field = as_vec(x_field, fp.q)
    centered = fp.centered(x_field)
    e = (centered >= 0).astype(np.int64)
    mag = np.abs(centered)
    if np.any(mag > fp.p):
        raise ValueError("quantized magnitude exceeds amplifier bound")
    bw = bit_width(fp.p)
    bits = (mag[None, :] >> np.arange(bw)[:, None]) & 1
    return e, bits.astype(np.int64)


def sign_circuit_inputs(x_blocks, e_blocks, bit_blocks, q: int) -> np.ndarray:
    """Assemble (..., m*(2+bw)) circuit inputs from per-vector blocks.

    x_blocks, e_blocks: (..., m); bit_blocks: (bw, ..., m).
    """
    parts = [as_vec(x_blocks, q), as_vec(e_blocks, q)]
    parts += [as_vec(bit_blocks[j], q) for j in range(bit_blocks.shape[0])]
    return np.concatenate(parts, axis=-1)


def plaintext_rlr(quantized_updates, threshold_t: int, fp: FieldParams,
                  mode: str = RLR_MODE_ORIG):
    """Reference pipeline on quantized field updates: (mask, field aggregate)."""
    x = as_vec(quantized_updates, fp.q)
    n = x.shape[0]
    sums = np.stack([sign_bits(row, fp) for row in x]).sum(axis=0)
    mask = rlr_mask(sums, n, threshold_t, mode)
    total = x.sum(axis=0) % fp.q
    return mask, rlr_aggregate(total, mask, fp)


# -- inverse-norm instantiation -------------------------------------------------------


@dataclass(frozen=True)
class RfaCircuits:
    """Two-part proof for the norm statistic.

    square_block: repeated per block, outputs the block's sum of squares.
    tail: scalar circuit over (omega, n, s) outputting (r1^2, r2^2, s);
    range_bits > 0 appends bit-decomposition range checks on the residual
    squares (two extra consistency outputs, inputs extended with the bits).
    """

    square_block: Circuit
    tail: Circuit
    range_bits: int


@lru_cache(maxsize=None)
def build_rfa_circuit(p: int, positions: int, range_bits: int = 0) -> RfaCircuits:
    sq = CircuitBuilder(positions)
    gates = [sq.mul(sq.lin((IN, i)), sq.lin((IN, i))) for i in range(positions)]
    sq.output(sq.affine(terms=tuple((g, 1) for g in gates)))

    tail = CircuitBuilder(3 + 2 * range_bits)
    omega, n_ref, s_ref = (IN, 0), (IN, 1), (IN, 2)
    n_sq = tail.mul(tail.lin(n_ref), tail.lin(n_ref))
    om_n = tail.mul(tail.lin(omega), tail.lin(n_ref))
    r1 = tail.affine(terms=((n_sq, 1), (s_ref, -1)))
    r2 = tail.affine(const=-p * p, terms=((om_n, 1),))
    r1_sq = tail.mul(r1, r1)
    r2_sq = tail.mul(r2, r2)
    tail.output(tail.lin(r1_sq))
    tail.output(tail.lin(r2_sq))
    tail.output(tail.lin(s_ref))
    for which, res_gate in enumerate((r1_sq, r2_sq)):
        if not range_bits:
            break
        refs = [(IN, 3 + which * range_bits + j) for j in range(range_bits)]
        for ref in refs:
            tail.mul(tail.lin(ref), tail.lin(ref, const=-1))
        terms = ((res_gate, 1),) + tuple((ref, -(1 << j)) for j, ref in enumerate(refs))
        tail.output(tail.affine(terms=terms))
    return RfaCircuits(square_block=sq.build(), tail=tail.build(), range_bits=range_bits)


def rfa_witnesses(x_field, fp: FieldParams, rng: np.random.Generator,
                  eps_norm: float = 1e-8):
    """(omega, n, s) field witnesses for a quantized update.

    omega and n are stochastic p-scalings of 1/||x|| and ||x|| over the
    dequantized values; s is the exact field sum of squares.
    """
    from .fields import dequantize, encode_scaled

    x_field = as_vec(x_field, fp.q)
    real = dequantize(x_field, fp)
    norm = float(np.linalg.norm(real))
    if norm <= eps_norm:
        raise NormError("quantized update has (near-)zero norm")
    omega = int(encode_scaled([1.0 / norm], fp, rng)[0])
    n_val = int(encode_scaled([norm], fp, rng)[0])
    s = int((mul_mod(x_field, x_field, fp.q)).sum() % fp.q)
    return omega, n_val, s


def rfa_residual_tolerance(n_users: int, max_norm: float, p: int) -> float:
    return 4.0 * n_users * (max_norm + 2.0) / p


def normalized_residual(field_val, fp: FieldParams) -> float:
    """Residuals r1 = n^2 - s and r2 = omega*n - p^2 carry p^2 units."""
    return float(fp.centered(field_val)) / float(fp.p) ** 2


def normalized_residual_square(field_val, fp: FieldParams) -> float:
    """Squared residuals carry p^4 units.

    Meaningful only while values stay below q; with the default 31-bit q and
    p = 10^3 a wrapped cheat can slip past this aggregate check, which is why
    the range_check sub-circuit exists.
    """
    return float(fp.centered(field_val)) / float(fp.p) ** 4


def plaintext_rfa_from_quantized(quantized_updates, fp: FieldParams,
                                 eps_norm: float = 1e-8) -> np.ndarray:
    """Reference: run the real-domain weighted mean on dequantized updates."""
    from .fields import dequantize

    reals = dequantize(as_vec(quantized_updates, fp.q), fp)
    return rfa_aggregate(reals, eps_norm)
