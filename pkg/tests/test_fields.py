import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from srafl import fields
from srafl.fields import (
    DomainError,
    FieldParams,
    ParamError,
    default_field,
    dequantize,
    encode_scaled,
    lagrange_eval_weights,
    lagrange_interp_coeffs,
    mat_mul_mod,
    poly_divmod_mod,
    poly_eval_mod,
    poly_mul_mod,
    quantize,
    substream,
)


def test_default_params_are_sound():
    fp = default_field()
    assert sympy.isprime(fp.q)
    assert sympy.isprime(fp.lam)
    assert (fp.lam - 1) % fp.q == 0
    assert pow(fp.g, fp.q, fp.lam) == 1 and fp.g != 1
    # order is exactly q (q prime, g != 1)
    fp.check_wraparound(10)


def test_small_families_are_sound():
    for fp in (fields.tiny_field(), fields.small_field()):
        assert sympy.isprime(fp.q) and sympy.isprime(fp.lam)
        assert (fp.lam - 1) % fp.q == 0
        assert pow(fp.g, fp.q, fp.lam) == 1 and fp.g != 1


def test_param_validation_rejects_bad_group():
    with pytest.raises(ParamError):
        FieldParams(q=17, p=2, lam=101, g=5)  # 17 does not divide 100
    with pytest.raises(ParamError):
        FieldParams(q=17, p=2, lam=103, g=1)
    with pytest.raises(ParamError):
        FieldParams(q=17, p=2, lam=103, g=5)  # order of 5 mod 103 is not 17


def test_wraparound_bound():
    fp = fields.tiny_field()
    with pytest.raises(ParamError):
        fp.check_wraparound(3)  # 2*2*3*2 = 24 >= 17


# -- quantize / dequantize ----------------------------------------------------


def test_quantize_exact_multiple_is_deterministic(default_fp):
    fp = FieldParams(q=default_fp.q, p=100, lam=default_fp.lam, g=default_fp.g)
    for seed in range(5):
        out = quantize([0.5], fp, substream(seed))
        assert out.tolist() == [50]


def test_quantize_negative_exact(default_fp):
    fp = FieldParams(q=default_fp.q, p=4, lam=default_fp.lam, g=default_fp.g)
    out = quantize([-0.25], fp, substream(0))
    assert out.tolist() == [fp.q - 1]


def test_quantize_rounding_frequencies(default_fp):
    # p*x = 12.34 rounds down w.p. 0.66 and up w.p. 0.34
    fp = FieldParams(q=default_fp.q, p=100, lam=default_fp.lam, g=default_fp.g)
    n = 100_000
    rng = substream(7, "freq")
    out = quantize(np.full(n, 0.1234), fp, rng)
    frac_up = np.mean(out == 13)
    frac_down = np.mean(out == 12)
    assert abs(frac_up - 0.34) < 0.01
    assert abs(frac_down - 0.66) < 0.01


def test_quantize_rejects_out_of_range(default_fp):
    with pytest.raises(DomainError):
        quantize([1.0], default_fp, substream(0))


def test_dequantize_examples(default_fp):
    fp100 = FieldParams(q=default_fp.q, p=100, lam=default_fp.lam, g=default_fp.g)
    assert dequantize([50], fp100).tolist() == [0.5]
    fp4 = FieldParams(q=default_fp.q, p=4, lam=default_fp.lam, g=default_fp.g)
    assert dequantize([fp4.q - 1], fp4).tolist() == [-0.25]
    assert dequantize([0], fp4).tolist() == [0.0]


def test_quantize_dequantize_unbiased(default_fp):
    n = 100_000
    x = 0.31337
    rng = substream(11, "bias")
    out = quantize(np.full(n, x), default_fp, rng)
    err = dequantize(out, default_fp) - x
    assert abs(err.mean()) <= 3 / (default_fp.p * np.sqrt(n))


def test_encode_scaled_handles_values_above_one(default_fp):
    rng = substream(3)
    out = encode_scaled([2.5], default_fp, rng)
    assert out[0] == 2500


def test_clip_updates_counts():
    clipped, n = fields.clip_updates(np.array([0.5, 1.2, -3.0]))
    assert n == 2
    assert np.all(np.abs(clipped) < 1)


# -- group ops ----------------------------------------------------------------


def test_group_exp_identity_and_order(default_fp):
    assert default_fp.group_exp(default_fp.g, 0) == 1
    assert default_fp.group_exp(default_fp.g, default_fp.q) == 1


def test_group_exp_hand_example():
    fp = FieldParams(q=11, p=2, lam=23, g=4)
    assert fp.group_exp(4, 2) == 16


def test_group_exp_homomorphism(default_fp, rng):
    for _ in range(20):
        a = int(rng.integers(0, default_fp.q))
        b = int(rng.integers(0, default_fp.q))
        lhs = default_fp.group_mul(
            default_fp.group_exp(default_fp.g, a), default_fp.group_exp(default_fp.g, b)
        )
        rhs = default_fp.group_exp(default_fp.g, (a + b) % default_fp.q)
        assert lhs == rhs


# -- field axioms ---------------------------------------------------------------


def test_field_axioms_bulk(default_fp, rng):
    q = default_fp.q
    n = 10_000
    a = rng.integers(0, q, n)
    b = rng.integers(0, q, n)
    c = rng.integers(0, q, n)
    assert np.array_equal(((a + b) % q + c) % q, (a + (b + c) % q) % q)
    assert np.array_equal(
        fields.mul_mod(fields.mul_mod(a, b, q), c, q),
        fields.mul_mod(a, fields.mul_mod(b, c, q), q),
    )
    nz = a[a != 0][:1000]
    inv = fields.inv_vec(nz, q)
    assert np.all(fields.mul_mod(nz, inv, q) == 1)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 16), st.integers(0, 16), st.integers(0, 16))
def test_field_axioms_hypothesis(a, b, c):
    fp = fields.tiny_field()
    assert fp.add(fp.add(a, b), c) == fp.add(a, fp.add(b, c))
    assert fp.mul(fp.mul(a, b), c) == fp.mul(a, fp.mul(b, c))
    assert fp.mul(a, fp.add(b, c)) == fp.add(fp.mul(a, b), fp.mul(a, c))
    if a != 0:
        assert fp.mul(a, fp.inv(a)) == 1


# -- polynomial helpers ---------------------------------------------------------


def test_poly_mul_matches_naive(rng):
    q = 10007
    for _ in range(20):
        la = int(rng.integers(1, 40))
        lb = int(rng.integers(1, 40))
        a = rng.integers(0, q, la)
        b = rng.integers(0, q, lb)
        naive = np.zeros(la + lb - 1, dtype=object)
        for i in range(la):
            for j in range(lb):
                naive[i + j] += int(a[i]) * int(b[j])
        naive = np.array([int(v) % q for v in naive], dtype=np.int64)
        assert np.array_equal(poly_mul_mod(a, b, q), naive)


def test_poly_divmod_roundtrip(rng):
    q = 10007
    for _ in range(20):
        a = rng.integers(0, q, int(rng.integers(1, 20)))
        b = rng.integers(1, q, int(rng.integers(1, 10)))
        prod = poly_mul_mod(a, b, q)
        quot, rem = poly_divmod_mod(prod, b, q)
        assert not rem
        assert np.array_equal(poly_mul_mod(quot, b, q)[: len(prod)], prod)


def test_interpolation_and_weights(rng):
    q = 10007
    pts = [1, 5, 9, 11]
    vals = rng.integers(0, q, 4)
    coeffs = lagrange_interp_coeffs(pts, vals, q)
    assert np.array_equal(poly_eval_mod(coeffs, np.array(pts), q), vals % q)
    w = lagrange_eval_weights(pts, 77, q)
    direct = int(poly_eval_mod(coeffs, 77, q))
    via_weights = int(fields.dot_mod(w, vals, q))
    assert direct == via_weights


def test_mat_mul_mod_exactness(rng):
    q = fields.DEFAULT_Q
    a = rng.integers(0, q, (7, 30))
    b = rng.integers(0, q, (30, 5))
    expect = np.zeros((7, 5), dtype=object)
    for i in range(7):
        for j in range(5):
            expect[i, j] = sum(int(a[i, k]) * int(b[k, j]) for k in range(30)) % q
    assert np.array_equal(mat_mul_mod(a, b, q), expect.astype(np.int64))


def test_substreams_independent_and_reproducible():
    a1 = substream(5, "user", 1).integers(0, 1 << 30, 4)
    a2 = substream(5, "user", 1).integers(0, 1 << 30, 4)
    b = substream(5, "user", 2).integers(0, 1 << 30, 4)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)
