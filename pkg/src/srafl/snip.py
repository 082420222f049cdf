"""Secret-shared proofs that an arithmetic circuit was evaluated faithfully.

The prover interpolates the left/right input wires of its P multiplication
gates into degree-(P-1) polynomials f_u, f_v and publishes (as shares) the
2P-1 coefficients of f_h = f_u * f_v.  Verifiers replay the circuit on their
shares, reading every gate output off f_h, and jointly evaluate the identity
sigma = f_u(r)*f_v(r) - f_h(r) at a random point fixed after the proof: an
honest execution reconstructs to zero, a lie survives with probability at
most (2P-2)/q.

Repeated-pattern mode runs K structurally identical block circuits at once:
their h vectors become the K data blocks of one packed sharing and the
reconstruction of sigma must be the all-zero K-vector.

The one multiplication in the test (and the omega*x products of the norm
instantiation) uses dealer triples.  For packed sharings the triple carries,
besides (a, b, ab), fresh sharings of each mask restricted to a single block
(a*delta_k, b*delta_k); with those, shares of public*shared block products
are local linear combinations and the result stays at degree K+T-1.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import lcc
from .fields import (
    as_vec,
    lagrange_eval_weights,
    mat_mul_mod,
    mul_mod,
    poly_mul_mod,
    powers_mod,
)

IN = "in"
GATE = "gate"


@dataclass(frozen=True)
class Affine:
    """const + sum coeff * wire, wires being inputs or earlier gate outputs."""

    const: int
    terms: tuple  # ((kind, index), coeff)


@dataclass(frozen=True)
class Gate:
    left: Affine
    right: Affine


@dataclass(frozen=True)
class Circuit:
    n_inputs: int
    gates: tuple
    outputs: tuple

    @property
    def n_gates(self) -> int:
        return len(self.gates)

    @property
    def h_len(self) -> int:
        return 2 * len(self.gates) - 1

    def canonical_text(self) -> str:
        """Stable text form, hashed into run manifests."""
        def aff(a):
            terms = " ".join(f"{kind}[{idx}]*{c}" for (kind, idx), c in a.terms)
            return f"{a.const} {terms}".strip()

        lines = [f"inputs {self.n_inputs}"]
        lines += [f"gate {i}: ({aff(g.left)}) * ({aff(g.right)})"
                  for i, g in enumerate(self.gates)]
        lines += [f"out {i}: {aff(o)}" for i, o in enumerate(self.outputs)]
        return "\n".join(lines)


class CircuitBuilder:
    def __init__(self, n_inputs: int):
        self.n_inputs = n_inputs
        self._gates = []
        self._outputs = []

    def inp(self, i: int):
        return (IN, i)

    def affine(self, const: int = 0, terms=()):
        return Affine(const=int(const), terms=tuple(((k, i), int(c)) for (k, i), c in terms))

    def lin(self, ref, coeff: int = 1, const: int = 0):
        return Affine(const=int(const), terms=((ref, int(coeff)),))

    def mul(self, left: Affine, right: Affine):
        self._gates.append(Gate(left=left, right=right))
        return (GATE, len(self._gates) - 1)

    def output(self, affine: Affine):
        self._outputs.append(affine)

    def build(self) -> Circuit:
        return Circuit(n_inputs=self.n_inputs, gates=tuple(self._gates),
                       outputs=tuple(self._outputs))


# -- evaluation -----------------------------------------------------------------


def _eval_affine(affine: Affine, inputs, gate_vals, q: int):
    acc = np.full(inputs.shape[:-1], affine.const % q, dtype=np.int64)
    for (kind, idx), coeff in affine.terms:
        src = inputs[..., idx] if kind == IN else gate_vals[idx]
        acc = (acc + (coeff % q) * src) % q
    return acc


def eval_gates(circuit: Circuit, inputs, q: int):
    """Honest evaluation; inputs (..., n_inputs).  Returns (u, v, w, outputs)."""
    inputs = as_vec(inputs, q)
    gate_vals = []
    us, vs = [], []
    for gate in circuit.gates:
        u = _eval_affine(gate.left, inputs, gate_vals, q)
        v = _eval_affine(gate.right, inputs, gate_vals, q)
        gate_vals.append(mul_mod(u, v, q))
        us.append(u)
        vs.append(v)
    outs = [_eval_affine(o, inputs, gate_vals, q) for o in circuit.outputs]
    stack = lambda xs: np.stack(xs, axis=-1) if xs else np.zeros(inputs.shape[:-1] + (0,), dtype=np.int64)
    return stack(us), stack(vs), stack(gate_vals), stack(outs)


def replay_wires(circuit: Circuit, input_shares, gate_out_shares, q: int):
    """Replay on shares with gate outputs supplied (read off f_h)."""
    inputs = as_vec(input_shares, q)
    gate_vals = [gate_out_shares[..., p] for p in range(circuit.n_gates)]
    us, vs = [], []
    for gate in circuit.gates:
        us.append(_eval_affine(gate.left, inputs, gate_vals, q))
        vs.append(_eval_affine(gate.right, inputs, gate_vals, q))
    outs = [_eval_affine(o, inputs, gate_vals, q) for o in circuit.outputs]
    stack = lambda xs: np.stack(xs, axis=-1) if xs else np.zeros(inputs.shape[:-1] + (0,), dtype=np.int64)
    return stack(us), stack(vs), stack(outs)


@lru_cache(maxsize=None)
def _gate_vandermonde(n_gates: int, q: int) -> np.ndarray:
    """V[p, c] = (p+1)^c for evaluating the 2P-1 h coefficients at gates."""
    cols = 2 * n_gates - 1
    return np.stack([powers_mod(t, cols, q) for t in range(1, n_gates + 1)])


def eval_h_at_gates(h_shares, n_gates: int, q: int, chunk: int = 512) -> np.ndarray:
    """(..., 2P-1) h coefficients -> (..., P) gate-output values."""
    h_shares = as_vec(h_shares, q)
    vg = _gate_vandermonde(n_gates, q)
    out = np.empty(h_shares.shape[:-1] + (n_gates,), dtype=np.int64)
    for lo in range(0, n_gates, chunk):
        hi = min(lo + chunk, n_gates)
        out[..., lo:hi] = mat_mul_mod(h_shares, vg[lo:hi].T, q)
    return out


def snip_prove(circuit: Circuit, inputs, q: int) -> np.ndarray:
    """Product-polynomial coefficients, batched over leading input dims.

    Returns (..., 2P-1); an honest h satisfies f_h(p) = u_p * v_p at every gate.
    """
    from .fields import interp_consecutive_batch

    u, v, _, _ = eval_gates(circuit, inputs, q)
    p_gates = circuit.n_gates
    if p_gates == 1:
        return mul_mod(u, v, q)
    stacked = np.concatenate([u.reshape(-1, p_gates), v.reshape(-1, p_gates)])
    coeffs = interp_consecutive_batch(stacked, q, start=1)
    rows = stacked.shape[0] // 2
    out = np.empty((rows, 2 * p_gates - 1), dtype=np.int64)
    for i in range(rows):
        out[i] = poly_mul_mod(coeffs[i], coeffs[rows + i], q)
    return out.reshape(u.shape[:-1] + (2 * p_gates - 1,))


def sigma_polynomial(circuit: Circuit, inputs, h, q: int) -> np.ndarray:
    """Plaintext sigma(t) = f_u'(t) f_v'(t) - f_h(t) with wires replayed from h.

    The coefficient vector (length 2P-1) is identically zero iff h is
    consistent with some faithful execution on these inputs.
    """
    from .fields import interp_consecutive_batch

    h = as_vec(h, q)
    p_gates = circuit.n_gates
    w = eval_h_at_gates(h[None, :], p_gates, q)
    u, v, _ = replay_wires(circuit, as_vec(inputs, q)[None, :], w, q)
    if p_gates == 1:
        prod = mul_mod(u[0], v[0], q)
    else:
        cu = interp_consecutive_batch(u, q, start=1)[0]
        cv = interp_consecutive_batch(v, q, start=1)[0]
        prod = poly_mul_mod(cu, cv, q)
    return (np.pad(prod, (0, len(h) - len(prod))) - h) % q


# -- proof sharing -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SnipProof:
    """h blocks (K, 2P-1); K=1 in plain mode.  beaver set when self-dealt."""

    h_blocks: np.ndarray
    beaver: object = None


def snip_share_proof(proof: SnipProof, params: lcc.LccParams, rng: np.random.Generator):
    """LCC-share the (possibly K-block) h material; returns (matrix (N, 2P-1), noise)."""
    blocks = np.atleast_2d(as_vec(proof.h_blocks, params.fp.q))
    if blocks.shape[0] != params.partitions:
        raise lcc.ParamError(
            f"proof has {blocks.shape[0]} blocks, sharing expects {params.partitions}")
    noise = rng.integers(0, params.fp.q, size=(params.threshold, blocks.shape[1]),
                         dtype=np.int64)
    mat = lcc.share_with_noise(blocks.reshape(-1), noise, params)
    return mat, noise


# -- packed Beaver triples -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PackedTriple:
    """Dealer material for one product under packed sharing.

    a_sh, b_sh, c_sh: (N, payload) share matrices with c = a (.) b blockwise.
    a_blk[k], b_blk[k]: fresh sharings of the mask restricted to block k,
    enabling local shares of public (.) shared products.
    """

    a_sh: np.ndarray
    b_sh: np.ndarray
    c_sh: np.ndarray
    a_blk: np.ndarray  # (K, N, payload of a)
    b_blk: object = None  # (K, N, payload) or None when unused


def _share_blocks(block_values, params, rng):
    """Share a (K, m) anchor array under params (payload m)."""
    m = block_values.shape[1]
    noise = rng.integers(0, params.fp.q, size=(params.threshold, m), dtype=np.int64)
    return lcc.share_with_noise(block_values.reshape(-1), noise, params)


def deal_sigma_triple(params: lcc.LccParams, rng: np.random.Generator) -> PackedTriple:
    """Triple for multiplying two packed scalars (payload 1, K blocks)."""
    q = params.fp.q
    k = params.partitions
    a = rng.integers(0, q, size=(k, 1), dtype=np.int64)
    b = rng.integers(0, q, size=(k, 1), dtype=np.int64)
    c = mul_mod(a, b, q)
    a_blk = np.stack([_share_blocks(_restrict(a, i), params, rng) for i in range(k)])
    b_blk = np.stack([_share_blocks(_restrict(b, i), params, rng) for i in range(k)])
    return PackedTriple(a_sh=_share_blocks(a, params, rng),
                        b_sh=_share_blocks(b, params, rng),
                        c_sh=_share_blocks(c, params, rng),
                        a_blk=a_blk, b_blk=b_blk)


def deal_scalar_vector_triple(sparams: lcc.LccParams, vparams: lcc.LccParams,
                              payload: int, rng: np.random.Generator) -> PackedTriple:
    """Triple for scalar (K=1 sharing) times packed vector (payload entries)."""
    q = vparams.fp.q
    k = vparams.partitions
    a = int(rng.integers(0, q))
    b = rng.integers(0, q, size=(k, payload), dtype=np.int64)
    c = mul_mod(a, b, q)
    a_rest = np.full((k, 1), 0, dtype=np.int64)
    a_blk = []
    for i in range(k):
        blocks = a_rest.copy()
        blocks[i, 0] = a
        a_blk.append(_share_blocks(blocks, vparams, rng))
    return PackedTriple(a_sh=_share_blocks(np.array([[a]]), sparams, rng),
                        b_sh=_share_blocks(b, vparams, rng),
                        c_sh=_share_blocks(c, vparams, rng),
                        a_blk=np.stack(a_blk), b_blk=None)


def _restrict(blocks, k):
    out = np.zeros_like(blocks)
    out[k] = blocks[k]
    return out


def encode_public_blocks(values, params: lcc.LccParams) -> np.ndarray:
    """Deterministic packed sharing of public per-block values (noise anchors 0)."""
    values = np.atleast_2d(as_vec(values, params.fp.q))
    anchors = np.concatenate(
        [values, np.zeros((params.threshold, values.shape[1]), dtype=np.int64)])
    return mat_mul_mod(lcc.encode_matrix(params), anchors, params.fp.q)


def packed_product_shares(d_blocks, e_blocks, triple: PackedTriple,
                          params: lcc.LccParams) -> np.ndarray:
    """Shares of the blockwise product u (.) v given public d = u-a, e = v-b.

    All terms are degree <= K+T-1: Enc(d e) + sum_k d_k [b delta_k]
    + sum_k e_k [a delta_k] + [c].
    """
    q = params.fp.q
    d = as_vec(d_blocks, q).reshape(params.partitions, -1)
    e = as_vec(e_blocks, q).reshape(params.partitions, -1)
    acc = (encode_public_blocks(mul_mod(d, e, q), params) + triple.c_sh) % q
    for k in range(params.partitions):
        acc = (acc + d[k] * triple.b_blk[k]) % q
        acc = (acc + e[k] * triple.a_blk[k]) % q
    return acc


def scalar_vector_product_shares(d_scalar: int, e_blocks, triple: PackedTriple,
                                 vparams: lcc.LccParams) -> np.ndarray:
    """Shares of (scalar u) * (packed vector v) given public d = u-a, E = v-b."""
    q = vparams.fp.q
    d = int(d_scalar) % q
    e = as_vec(e_blocks, q).reshape(vparams.partitions, -1)
    acc = (encode_public_blocks(mul_mod(d, e, q), vparams) + triple.c_sh) % q
    acc = (acc + d * triple.b_sh) % q
    for k in range(vparams.partitions):
        acc = (acc + e[k] * triple.a_blk[k]) % q
    return acc


# -- verifier side ------------------------------------------------------------------


def replay_shares(circuit: Circuit, input_shares, h_shares, r: int, q: int):
    """Per-holder wire evaluations at the test point.

    input_shares (..., n_inputs) and h_shares (..., 2P-1) may carry leading
    (prover, holder) batch dims.  Returns (u_r, v_r, fh_r, output_shares).
    """
    from .fields import dot_mod

    p_gates = circuit.n_gates
    h_shares = as_vec(h_shares, q)
    w = eval_h_at_gates(h_shares, p_gates, q)
    u, v, outs = replay_wires(circuit, input_shares, w, q)
    lam_w = lagrange_eval_weights(tuple(range(1, p_gates + 1)), r, q)
    u_r = dot_mod(u, lam_w, q) if p_gates > 1 else u[..., 0]
    v_r = dot_mod(v, lam_w, q) if p_gates > 1 else v[..., 0]
    fh_r = dot_mod(h_shares, powers_mod(r, h_shares.shape[-1], q), q)
    return u_r, v_r, fh_r, outs


def beaver_opening_shares(u_r_sh, v_r_sh, triple: PackedTriple, q: int):
    """Per-holder shares of d = f_u(r) - a and e = f_v(r) - b."""
    return (u_r_sh - triple.a_sh[:, 0]) % q, (v_r_sh - triple.b_sh[:, 0]) % q


def sigma_from_openings(d_blocks, e_blocks, fh_r_sh, triple: PackedTriple,
                        params: lcc.LccParams) -> np.ndarray:
    """Per-holder sigma shares once the maskings d, e have been opened."""
    prod = packed_product_shares(d_blocks, e_blocks, triple, params)[:, 0]
    return (prod - fh_r_sh) % params.fp.q


def snip_recon(circuit: Circuit, input_shares, h_shares, r: int,
               triple: PackedTriple, params: lcc.LccParams):
    """All-holder sigma and output shares (openings decoded internally).

    input_shares (N, n_inputs), h_shares (N, 2P-1).  The protocol drives the
    same math with explicit opening messages; this form serves direct use.
    """
    q = params.fp.q
    u_r, v_r, fh_r, outs = replay_shares(circuit, input_shares, h_shares, r, q)
    d_sh, e_sh = beaver_opening_shares(u_r, v_r, triple, q)
    holders = tuple(range(params.n_users))
    d_blocks = lcc.recon_matrix_form(d_sh[:, None], holders, params)
    e_blocks = lcc.recon_matrix_form(e_sh[:, None], holders, params)
    sig = sigma_from_openings(d_blocks, e_blocks, fh_r, triple, params)
    return sig, outs


def sigma_check(sigma_shares, holders, params: lcc.LccParams, mode: str = "exact"):
    """Decode one prover's sigma shares and classify.

    Returns (verdict, blocks): verdict 'honest' iff the decoded K-vector is
    zero, 'cheat' for a consistent nonzero decoding, 'undecodable' when the
    shares do not fit a degree-(K+T-1) polynomial (or Gao fails in 'gao' mode).
    """
    holders = tuple(int(h) for h in holders)
    sigma_shares = as_vec(sigma_shares, params.fp.q).reshape(-1, 1)
    need = params.partitions + params.threshold
    if len(holders) < need:
        return "undecodable", None
    try:
        if mode == "gao":
            pts = [params.alphas[j] for j in holders]
            coeffs = lcc.gao_decode(pts, sigma_shares[:, 0].tolist(), need, params.fp.q)
            from .fields import poly_eval_mod

            blocks = poly_eval_mod(coeffs, np.asarray(params.betas[: params.partitions]),
                                   params.fp.q)
        else:
            blocks = lcc.recon_matrix_form(sigma_shares, holders, params, check=True)
    except lcc.DecodeFailure:
        return "undecodable", None
    verdict = "honest" if not np.any(blocks) else "cheat"
    return verdict, blocks


def draw_test_point(q: int, max_gates: int, rng: np.random.Generator) -> int:
    """Uniform over F_q minus the gate indices 1..P."""
    while True:
        r = int(rng.integers(0, q))
        if not 1 <= r <= max_gates:
            return r
