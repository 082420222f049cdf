import numpy as np
import pytest

from srafl import fields, lcc, snip
from srafl.fields import poly_eval_mod, substream
from srafl.lcc import make_lcc_params, scalar_params
from srafl.snip import (
    CircuitBuilder,
    SnipProof,
    deal_sigma_triple,
    draw_test_point,
    eval_gates,
    sigma_check,
    sigma_polynomial,
    snip_prove,
    snip_recon,
    snip_share_proof,
)


def square_circuit():
    b = CircuitBuilder(1)
    g = b.mul(b.lin(b.inp(0)), b.lin(b.inp(0)))
    b.output(b.lin(g))
    return b.build()


def boolean_circuit():
    b = CircuitBuilder(1)
    g = b.mul(b.lin(b.inp(0)), b.lin(b.inp(0), const=-1))
    b.output(b.lin(g))
    return b.build()


def random_chain_circuit(n_gates=3, n_inputs=2):
    # multiply a mix of inputs and previous gate outputs through affine wires
    b = CircuitBuilder(n_inputs)
    prev = None
    for i in range(n_gates):
        left = b.lin(b.inp(i % n_inputs), coeff=2 + i, const=1)
        right = b.lin(prev) if prev is not None else b.lin(b.inp((i + 1) % n_inputs))
        prev = b.mul(left, right)
    b.output(b.lin(prev))
    b.output(b.affine(const=0, terms=((prev, 3), ((snip.IN, 0), 1))))
    return b.build()


def share_inputs(x, params, rng):
    q = params.fp.q
    noise = rng.integers(0, q, (params.threshold, params.block_len(len(x))), dtype=np.int64)
    return lcc.share_with_noise(x, noise, params)


# -- prover ---------------------------------------------------------------------


def test_single_gate_square(small_fp):
    h = snip_prove(square_circuit(), np.array([3]), small_fp.q)
    assert h.tolist() == [9]
    assert poly_eval_mod(h, 1, small_fp.q) == 9


def test_booleanity_gate(small_fp):
    h = snip_prove(boolean_circuit(), np.array([1]), small_fp.q)
    assert h.tolist() == [0]


def test_h_matches_gate_products(small_fp, rng):
    circuit = random_chain_circuit()
    q = small_fp.q
    for _ in range(10):
        x = rng.integers(0, q, 2)
        _, _, w, _ = eval_gates(circuit, x, q)
        h = snip_prove(circuit, x, q)
        at_gates = snip.eval_h_at_gates(h[None, :], circuit.n_gates, q)[0]
        assert np.array_equal(at_gates, w)


def test_prove_batches_over_leading_dims(small_fp, rng):
    circuit = random_chain_circuit()
    q = small_fp.q
    xs = rng.integers(0, q, (4, 2))
    batched = snip_prove(circuit, xs, q)
    for i in range(4):
        assert np.array_equal(batched[i], snip_prove(circuit, xs[i], q))


# -- proof sharing ----------------------------------------------------------------


def test_share_proof_roundtrip(small_fp, rng):
    circuit = random_chain_circuit()
    params = scalar_params(make_lcc_params(small_fp, 6, 2, 2))
    h = snip_prove(circuit, rng.integers(0, small_fp.q, 2), small_fp.q)
    mat, _ = snip_share_proof(SnipProof(h_blocks=h[None, :]), params, substream(0))
    got = lcc.recon_matrix_form(mat, range(6), params, out_len=len(h))
    assert np.array_equal(got, h)


def test_share_proof_repeated_blocks(small_fp, rng):
    # K=2 identical one-gate circuits; reconstructed block k equals block k's h
    circuit = square_circuit()
    params = make_lcc_params(small_fp, 6, 2, 2)
    x = rng.integers(0, small_fp.q, (2, 1))
    h_blocks = snip_prove(circuit, x, small_fp.q)
    mat, _ = snip_share_proof(SnipProof(h_blocks=h_blocks), params, substream(1))
    got = lcc.recon_matrix_form(mat, range(6), params)
    assert np.array_equal(got.reshape(2, 1), h_blocks)


def test_zero_inputs_zero_h(small_fp):
    circuit = square_circuit()
    params = make_lcc_params(small_fp, 6, 2, 2)
    h_blocks = snip_prove(circuit, np.zeros((2, 1), dtype=np.int64), small_fp.q)
    assert not np.any(h_blocks)
    mat, noise = snip_share_proof(SnipProof(h_blocks=h_blocks), params, substream(2))
    assert np.any(mat)  # noise keeps shares nonzero
    assert np.array_equal(lcc.recon_matrix_form(mat, range(6), params),
                          np.zeros(2, dtype=np.int64))


# -- verification -------------------------------------------------------------------


def run_plain_sigma(circuit, x, small_fp, seed, tamper=None, r=None):
    q = small_fp.q
    params = scalar_params(make_lcc_params(small_fp, 7, 2, 3))
    rng = substream(seed, "plain")
    x_sh = share_inputs(x, params, rng)
    h = snip_prove(circuit, x, q)
    if tamper is not None:
        h = h.copy()
        h[tamper[0]] = (h[tamper[0]] + tamper[1]) % q
    h_sh, _ = snip_share_proof(SnipProof(h_blocks=h[None, :]), params, rng)
    triple = deal_sigma_triple(params, rng)
    if r is None:
        r = draw_test_point(q, circuit.n_gates, rng)
    sig, outs = snip_recon(circuit, x_sh, h_sh, r, triple, params)
    return sig, outs, params


def test_honest_prover_sigma_zero(small_fp, rng):
    circuit = random_chain_circuit()
    for seed in range(20):
        x = rng.integers(0, small_fp.q, 2)
        sig, _, params = run_plain_sigma(circuit, x, small_fp, seed)
        verdict, blocks = sigma_check(sig, range(7), params)
        assert verdict == "honest"


def test_sigma_shares_keep_lcc_degree(small_fp, rng):
    # interpolation through K+T shares must reproduce all N exactly
    circuit = random_chain_circuit()
    x = rng.integers(0, small_fp.q, 2)
    sig, _, params = run_plain_sigma(circuit, x, small_fp, 99)
    lcc.recon_matrix_form(sig[:, None], range(7), params, check=True)


def test_perturbed_h_detected_at_schwartz_zippel_rate(small_fp, rng):
    circuit = random_chain_circuit(n_gates=5)
    q = small_fp.q
    trials = 400
    detected = 0
    for seed in range(trials):
        x = rng.integers(0, q, 2)
        coeff = int(rng.integers(0, circuit.h_len))
        delta = int(rng.integers(1, q))
        sig, _, params = run_plain_sigma(circuit, x, small_fp, 1000 + seed,
                                         tamper=(coeff, delta))
        verdict, _ = sigma_check(sig, range(7), params)
        if verdict == "cheat":
            detected += 1
    bound = 1 - (2 * circuit.n_gates - 2) / q
    stderr = np.sqrt(bound * (1 - bound) / trials)
    assert detected / trials >= bound - 3 * stderr - 1e-9


def test_wrong_claimed_output_reconstructs_true_value(small_fp, rng):
    # consistent h: the replayed output shares decode to the real circuit
    # output no matter what the prover claims out of band
    circuit = random_chain_circuit()
    q = small_fp.q
    x = rng.integers(0, q, 2)
    _, _, _, true_outs = eval_gates(circuit, x, q)
    sig, outs, params = run_plain_sigma(circuit, x, small_fp, 7)
    decoded = lcc.recon_matrix_form(outs[:, 0][:, None], range(7), params)
    assert decoded[0] == true_outs[0]
    decoded2 = lcc.recon_matrix_form(outs[:, 1][:, None], range(7), params)
    assert decoded2[0] == true_outs[1]


def test_sigma_exhaustive_soundness_sweep(small_fp, rng):
    # every single-coefficient perturbation passes for at most 2P-2 test points
    circuit = random_chain_circuit(n_gates=5)
    q = small_fp.q
    x = rng.integers(0, q, 2)
    h = snip_prove(circuit, x, q)
    all_r = np.arange(q)
    mask = (all_r < 1) | (all_r > circuit.n_gates)
    for coeff in range(0, circuit.h_len, 3):
        bad = h.copy()
        bad[coeff] = (bad[coeff] + 1 + coeff) % q
        sig_poly = sigma_polynomial(circuit, x, bad, q)
        assert np.any(sig_poly), "perturbation must break the identity"
        zeros = int(np.sum(poly_eval_mod(sig_poly, all_r[mask], q) == 0))
        assert zeros <= 2 * circuit.n_gates - 2


def test_honest_sigma_polynomial_identically_zero(small_fp, rng):
    circuit = random_chain_circuit(n_gates=4)
    x = rng.integers(0, small_fp.q, 2)
    h = snip_prove(circuit, x, small_fp.q)
    assert not np.any(sigma_polynomial(circuit, x, h, small_fp.q))


def test_sigma_check_verdicts(small_fp, rng):
    circuit = random_chain_circuit()
    x = rng.integers(0, small_fp.q, 2)
    sig, _, params = run_plain_sigma(circuit, x, small_fp, 31)
    assert sigma_check(sig, range(7), params)[0] == "honest"
    sig_cheat, _, _ = run_plain_sigma(circuit, x, small_fp, 32, tamper=(1, 5))
    assert sigma_check(sig_cheat, range(7), params)[0] == "cheat"
    garbage = sig.copy()
    garbage[3] = (garbage[3] + 17) % small_fp.q
    assert sigma_check(garbage, range(7), params)[0] == "undecodable"


def test_garbage_verifier_share_survives_gao_with_slack(small_fp, rng):
    # N=7, K=1, T=2: degree 2, slack allows correcting (7-3)/2 = 2 errors
    circuit = random_chain_circuit()
    x = rng.integers(0, small_fp.q, 2)
    sig, _, params = run_plain_sigma(circuit, x, small_fp, 55)
    sig = sig.copy()
    sig[2] = int(rng.integers(0, small_fp.q))
    verdict, blocks = sigma_check(sig, range(7), params, mode="gao")
    assert verdict == "honest"


# -- repeated-pattern mode -------------------------------------------------------


def run_repeated_sigma(circuit, blocks_x, small_fp, seed, tamper_block=None):
    q = small_fp.q
    params = make_lcc_params(small_fp, 7, 2, blocks_x.shape[0])
    rng = substream(seed, "rep")
    x_sh = share_inputs(blocks_x.reshape(-1), params, rng)
    h_blocks = snip_prove(circuit, blocks_x, q)
    if tamper_block is not None:
        h_blocks = h_blocks.copy()
        h_blocks[tamper_block, 0] = (h_blocks[tamper_block, 0] + 1) % q
    h_sh, _ = snip_share_proof(SnipProof(h_blocks=h_blocks), params, rng)
    triple = deal_sigma_triple(params, rng)
    r = draw_test_point(q, circuit.n_gates, rng)
    sig, outs = snip_recon(circuit, x_sh, h_sh, r, triple, params)
    return sig, params


def test_repeated_mode_honest_all_zero(small_fp, rng):
    circuit = square_circuit()
    x = rng.integers(0, small_fp.q, (2, 1))
    sig, params = run_repeated_sigma(circuit, x, small_fp, 0)
    verdict, blocks = sigma_check(sig, range(7), params)
    assert verdict == "honest"
    assert np.array_equal(blocks, np.zeros(2, dtype=np.int64))


def test_repeated_mode_flags_bad_block(small_fp, rng):
    circuit = square_circuit()
    x = rng.integers(0, small_fp.q, (2, 1))
    sig, params = run_repeated_sigma(circuit, x, small_fp, 1, tamper_block=1)
    verdict, blocks = sigma_check(sig, range(7), params)
    assert verdict == "cheat"
    assert blocks[0] == 0 and blocks[1] != 0


def test_repeated_matches_conjunction_of_plain_runs(small_fp, rng):
    # 200 random instances: repeated verdict == AND of per-block verdicts
    circuit = boolean_circuit()
    q = small_fp.q
    for trial in range(200):
        x = rng.integers(0, 2, (2, 1)).astype(np.int64)
        cheat_blocks = [k for k in range(2) if rng.random() < 0.3]
        sig, params = run_repeated_sigma(circuit, x, small_fp, 4000 + trial,
                                         tamper_block=cheat_blocks[0] if cheat_blocks else None)
        verdict, blocks = sigma_check(sig, range(7), params)
        plain_ok = []
        for k in range(2):
            tam = (0, 1) if k in cheat_blocks[:1] else None
            psig, _, pparams = run_plain_sigma(circuit, x[k], small_fp, 8000 + 2 * trial + k,
                                               tamper=tam)
            plain_ok.append(sigma_check(psig, range(7), pparams)[0] == "honest")
        assert (verdict == "honest") == all(plain_ok)


def test_draw_test_point_avoids_gate_indices(small_fp):
    rng = substream(0, "draw")
    for _ in range(200):
        r = draw_test_point(small_fp.q, 5, rng)
        assert not 1 <= r <= 5
