"""Lagrange-coded secret sharing with verifiable constant-size commitments.

A length-d secret is zero-padded and split into K blocks of m = ceil(d/K)
entries; T uniform noise blocks are appended.  The unique degree-(K+T-1)
vector polynomial f through (beta_k -> block_k) is evaluated at alpha_j to
produce user j's share.  Any K+T shares reconstruct; with extra shares the
code is a Reed-Solomon code and Gao's decoder corrects up to
floor((n - K - T)/2) corrupted shares.

Commitments bind the whole polynomial with K+T group elements: one
multi-exponentiation of the public vector B = [g^(gamma^0), g^(gamma^1), ...]
per anchor block, verifiable per share through exponent-side Lagrange
interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .fields import (
    FieldParams,
    ParamError,
    as_vec,
    lagrange_eval_weights,
    mat_mul_mod,
    poly_deg,
    poly_divmod_mod,
    poly_eval_mod,
)


class InsufficientShares(ValueError):
    """Fewer shares than the K+T needed to pin the encoding polynomial."""


class DecodeFailure(ValueError):
    """Shares are inconsistent with any codeword within decoding distance."""


@dataclass(frozen=True)
class LccParams:
    """Evaluation geometry: N holder points, K data anchors, T noise anchors."""

    n_users: int
    threshold: int  # T: tolerated colluding/malicious users
    partitions: int  # K: data blocks per secret
    alphas: tuple
    betas: tuple
    fp: FieldParams

    def __post_init__(self):
        n, t, k = self.n_users, self.threshold, self.partitions
        if k < 1 or t < 0:
            raise ParamError("need partitions >= 1 and threshold >= 0")
        if k + t >= n:
            raise ParamError(f"K+T = {k + t} must be < N = {n}")
        if len(self.alphas) != n or len(self.betas) != k + t:
            raise ParamError("alphas/betas lengths must be N and K+T")
        pts = list(self.alphas) + list(self.betas)
        if len(set(p % self.fp.q for p in pts)) != len(pts):
            raise ParamError("evaluation points must be pairwise distinct mod q")

    @property
    def degree(self) -> int:
        return self.partitions + self.threshold - 1

    def block_len(self, true_len: int) -> int:
        return -(-true_len // self.partitions)


def make_lcc_params(fp: FieldParams, n_users: int, threshold: int, partitions: int,
                    alphas=None, betas=None) -> LccParams:
    """Default geometry: alphas = 1..N, betas = N+1..N+K+T."""
    if alphas is None:
        alphas = tuple(range(1, n_users + 1))
    if betas is None:
        betas = tuple(range(n_users + 1, n_users + 1 + partitions + threshold))
    return LccParams(n_users=n_users, threshold=threshold, partitions=partitions,
                     alphas=tuple(int(a) for a in alphas),
                     betas=tuple(int(b) for b in betas), fp=fp)


def scalar_params(params: LccParams) -> LccParams:
    """The K=1 variant sharing scalars under the same points and threshold."""
    return LccParams(n_users=params.n_users, threshold=params.threshold, partitions=1,
                     alphas=params.alphas, betas=params.betas[: 1 + params.threshold],
                     fp=params.fp)


@dataclass(frozen=True, eq=False)
class Share:
    owner: int
    holder: int
    payload: np.ndarray  # length ceil(d/K)


@dataclass(frozen=True)
class CommitmentVector:
    owner: int
    elements: tuple  # K+T group elements


# -- Lagrange coefficient matrices (cached per geometry) ----------------------


@lru_cache(maxsize=None)
def encode_matrix(params: LccParams) -> np.ndarray:
    """U[j, k] = L_k(alpha_j) over the beta anchors; shares = U @ anchors."""
    q = params.fp.q
    rows = [lagrange_eval_weights(params.betas, a, q) for a in params.alphas]
    return np.stack(rows)


@lru_cache(maxsize=None)
def decode_matrix(params: LccParams, holders: tuple) -> np.ndarray:
    """R[k, j] = L_j(beta_k) over the chosen holder points; anchors = R @ shares."""
    q = params.fp.q
    pts = [params.alphas[j] for j in holders]
    rows = [lagrange_eval_weights(pts, b, q) for b in params.betas]
    return np.stack(rows)


@lru_cache(maxsize=None)
def extension_matrix(params: LccParams, holders: tuple, targets: tuple) -> np.ndarray:
    """Predict share values at target alphas from the holder subset."""
    q = params.fp.q
    pts = [params.alphas[j] for j in holders]
    rows = [lagrange_eval_weights(pts, params.alphas[j], q) for j in targets]
    return np.stack(rows)


# -- share / reconstruct -------------------------------------------------------


def pad_blocks(secret, params: LccParams) -> np.ndarray:
    """Zero-pad to K*ceil(d/K) and reshape to (K, m)."""
    secret = as_vec(np.atleast_1d(secret), params.fp.q)
    m = params.block_len(len(secret))
    padded = np.zeros(params.partitions * m, dtype=np.int64)
    padded[: len(secret)] = secret
    return padded.reshape(params.partitions, m)


def share_with_noise(secret, noise_blocks, params: LccParams) -> np.ndarray:
    """Share matrix (N x m) for given noise; row j is f(alpha_j)."""
    blocks = pad_blocks(secret, params)
    noise = as_vec(noise_blocks, params.fp.q).reshape(params.threshold, -1)
    if noise.shape[1] != blocks.shape[1]:
        raise ParamError("noise block length must equal ceil(d/K)")
    anchors = np.concatenate([blocks, noise], axis=0)
    return mat_mul_mod(encode_matrix(params), anchors, params.fp.q)


def lcc_share(secret, params: LccParams, rng: np.random.Generator):
    """Share a secret vector; returns (list of N Shares, the T noise blocks)."""
    secret = np.atleast_1d(np.asarray(secret))
    m = params.block_len(len(secret))
    noise = rng.integers(0, params.fp.q, size=(params.threshold, m), dtype=np.int64)
    mat = share_with_noise(secret, noise, params)
    owner = -1
    shares = [Share(owner=owner, holder=j, payload=mat[j]) for j in range(params.n_users)]
    return shares, noise


def recon_matrix_form(share_matrix, holders, params: LccParams, out_len=None,
                      check: bool = False) -> np.ndarray:
    """Erasure reconstruction from rows of a share matrix.

    Uses the first K+T holders; with check=True the remaining shares must lie
    on the interpolated polynomial or DecodeFailure is raised.
    """
    holders = tuple(int(h) for h in holders)
    share_matrix = np.atleast_2d(as_vec(share_matrix, params.fp.q))
    need = params.partitions + params.threshold
    if len(holders) < need:
        raise InsufficientShares(f"{len(holders)} shares < K+T = {need}")
    used, rest = holders[:need], holders[need:]
    anchors = mat_mul_mod(decode_matrix(params, used), share_matrix[:need], params.fp.q)
    if check and rest:
        pred = mat_mul_mod(extension_matrix(params, used, rest), share_matrix[:need],
                           params.fp.q)
        if not np.array_equal(pred, share_matrix[need:]):
            raise DecodeFailure("extra shares are off the interpolated polynomial")
    out = anchors[: params.partitions].reshape(-1)
    return out[:out_len] if out_len is not None else out


def lcc_recon(shares, params: LccParams, out_len=None, mode: str = "erasure",
              check: bool = False) -> np.ndarray:
    """Reconstruct the secret from Share objects.

    mode='erasure': plain interpolation through K+T provided points.
    mode='error': Gao decoding over all provided points; corrects up to
    floor((n-K-T)/2) corrupted payloads, raising DecodeFailure beyond that.
    """
    shares = sorted(shares, key=lambda s: s.holder)
    holders = tuple(s.holder for s in shares)
    mat = np.stack([as_vec(s.payload, params.fp.q) for s in shares])
    if mode == "erasure":
        return recon_matrix_form(mat, holders, params, out_len=out_len, check=check)
    if mode != "error":
        raise ValueError(f"unknown mode {mode!r}")
    pts = [params.alphas[j] for j in holders]
    need = params.partitions + params.threshold
    if len(holders) < need:
        raise InsufficientShares(f"{len(holders)} shares < K+T = {need}")
    q = params.fp.q
    cols = []
    for c in range(mat.shape[1]):
        coeffs = gao_decode(pts, mat[:, c].tolist(), need, q)
        cols.append(poly_eval_mod(coeffs, np.asarray(params.betas[: params.partitions]), q))
    # cols[c][k] is block k, entry c; secrets flatten block-major
    out = np.stack(cols, axis=0).T.reshape(-1)
    return out[:out_len] if out_len is not None else out


# -- Gao decoder ----------------------------------------------------------------


def _poly_sub(a, b, q):
    out = [0] * max(len(a), len(b))
    for i, c in enumerate(a):
        out[i] = c % q
    for i, c in enumerate(b):
        out[i] = (out[i] - c) % q
    while out and out[-1] == 0:
        out.pop()
    return out


def _poly_mul_small(a, b, q):
    if not a or not b:
        return []
    out = [0] * (len(a) + len(b) - 1)
    for i, ca in enumerate(a):
        if ca:
            for j, cb in enumerate(b):
                out[i + j] = (out[i + j] + ca * cb) % q
    while out and out[-1] == 0:
        out.pop()
    return out


def gao_decode(points, values, deg_bound: int, q: int) -> np.ndarray:
    """Reed-Solomon decode: message polynomial of degree < deg_bound.

    Partial extended Euclid on (prod(X - x_i), interpolant), stopping at the
    first remainder of degree < (n + deg_bound)/2; the message is the exact
    quotient by the accumulated multiplier, else DecodeFailure.
    """
    n = len(points)
    points = [int(x) % q for x in points]
    g0 = [1]
    for x in points:
        g0 = _poly_mul_small(g0, [(-x) % q, 1], q)
    g1 = [int(c) for c in
          np.asarray(_interp_list(points, values, q), dtype=np.int64)]
    while g1 and g1[-1] == 0:
        g1.pop()
    stop = (n + deg_bound) / 2
    r_prev, r_cur = g0, g1
    v_prev, v_cur = [], [1]
    while r_cur and poly_deg(r_cur) >= stop:
        quot, rem = poly_divmod_mod(r_prev, r_cur, q)
        r_prev, r_cur = r_cur, rem
        v_prev, v_cur = v_cur, _poly_sub(v_prev, _poly_mul_small(quot, v_cur, q), q)
    if not r_cur:
        raise DecodeFailure("degenerate remainder in decoding")
    f1, rem = poly_divmod_mod(r_cur, v_cur, q)
    if rem or poly_deg(f1) >= deg_bound:
        raise DecodeFailure("too many corrupted shares")
    out = np.zeros(deg_bound, dtype=np.int64)
    out[: len(f1)] = f1
    return out


def _interp_list(points, values, q):
    from .fields import lagrange_interp_coeffs

    return lagrange_interp_coeffs(points, values, q)


# -- constant-size commitments ----------------------------------------------------


@dataclass(frozen=True)
class CommitSetup:
    """Public side of the trusted setup: B[p] = g^(gamma^(p-1)); gamma destroyed."""

    fp: FieldParams
    b_vec: tuple


def make_commit_setup(fp: FieldParams, max_payload: int, rng: np.random.Generator,
                      _expose_gamma: bool = False):
    """Generate B for payloads up to max_payload entries.

    The trapdoor gamma exists only inside this call; _expose_gamma is for
    tests that need the hand-computable value.
    """
    gamma = int(rng.integers(1, fp.q))
    b, e = [], 1
    for _ in range(max_payload):
        b.append(pow(fp.g, e, fp.lam))
        e = (e * gamma) % fp.q
    setup = CommitSetup(fp=fp, b_vec=tuple(b))
    return (setup, gamma) if _expose_gamma else setup


def commit_payload(payload, setup: CommitSetup) -> int:
    """Multi-exponentiation prod_p B[p]^payload[p] in the commitment group."""
    from .fields import multi_exp

    return multi_exp(setup.b_vec, payload, setup.fp.lam)


def lcc_commit(secret, noise_blocks, params: LccParams, setup: CommitSetup,
               owner: int = -1) -> CommitmentVector:
    """One commitment element per anchor block (K data + T noise)."""
    blocks = pad_blocks(secret, params)
    noise = as_vec(noise_blocks, params.fp.q).reshape(params.threshold, -1)
    anchors = np.concatenate([blocks, noise], axis=0)
    if anchors.shape[1] > len(setup.b_vec):
        raise ParamError("commitment basis shorter than payload")
    return CommitmentVector(owner=owner,
                            elements=tuple(commit_payload(row, setup) for row in anchors))


def lcc_verify(share: Share, commitment: CommitmentVector, params: LccParams,
               setup: CommitSetup) -> bool:
    """Check prod_p B[p]^share[p] == prod_k c_k^(L_k(alpha_holder))."""
    from .fields import multi_exp

    if len(commitment.elements) != params.partitions + params.threshold:
        return False
    lhs = commit_payload(share.payload, setup)
    rhs = multi_exp(commitment.elements, encode_matrix(params)[share.holder],
                    params.fp.lam)
    return lhs == rhs
