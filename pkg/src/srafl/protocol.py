"""Three-round secure-and-robust aggregation over Lagrange-coded shares.

Round 1: each user quantizes its update, shares it (and the instantiation's
witnesses) under the packed code, commits to every sharing, proves its
statistic circuit, and sends each holder an authenticated-encrypted bundle
of share rows while broadcasting the commitments.

Round 2: holders verify every received share against the broadcast
commitments (failures feed the local malicious set m1), replay the circuits
on shares, exchange Beaver openings through the server, and submit m1-m4:
local tags, sigma shares of the polynomial identity test, summed output
shares, and summed update shares (or omega/omega*x sums for the norm
instantiation).

Round 3: the server builds the global malicious set from the tag matrix
(tagged by more than T, or tagging more than T), classifies every prover's
sigma (consistent-zero, consistent-nonzero, or misfit, the last triggering
holder localization), and either finishes, re-runs round 2 without the
excluded users, or aborts when more than T users are implicated.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, replace
from functools import lru_cache
from itertools import combinations

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import lcc, robust, snip, wire
from .fields import FieldParams, ParamError, as_vec, dequantize, quantize, substream
from .fields import clip_updates, default_field
from .lcc import LccParams, make_lcc_params, scalar_params
from .robust import RLR_MODE_ORIG, bit_width

RLR = "rlr"
RFA = "rfa"


# -- key agreement and authenticated encryption -----------------------------------


def ka_gen(fp: FieldParams, rng: np.random.Generator):
    """Public/secret key pair in the order-q commitment group."""
    sk = int(rng.integers(1, fp.q))
    return pow(fp.g, sk, fp.lam), sk


def ka_agree(fp: FieldParams, pk_other: int, sk_self: int) -> bytes:
    shared = pow(pk_other, sk_self, fp.lam)
    return hashlib.sha256(b"srafl-ka-v1" + shared.to_bytes(16, "little")).digest()


def _nonce(iteration: int, sender: int, recipient: int, purpose: str) -> bytes:
    blob = f"{iteration}|{sender}|{recipient}|{purpose}".encode()
    return hashlib.blake2s(blob, digest_size=12).digest()


def ae_enc(key: bytes, nonce: bytes, plaintext: bytes) -> bytes:
    return AESGCM(key).encrypt(nonce, plaintext, None)


def ae_dec(key: bytes, nonce: bytes, ciphertext: bytes):
    """Plaintext, or None when authentication fails."""
    try:
        return AESGCM(key).decrypt(nonce, ciphertext, None)
    except InvalidTag:
        return None


# -- configuration ------------------------------------------------------------------


def default_thresholds(n_users: int):
    """T = ceil(0.3N), K = floor(0.7N) - 1: the efficiency-maximal choice."""
    t = -(-3 * n_users // 10)
    k = (7 * n_users) // 10 - 1
    return max(1, t), max(1, k)


@dataclass(frozen=True)
class ProtocolConfig:
    n_users: int
    dim: int
    threshold: int
    partitions: int
    fp: FieldParams
    robust_alg: str = RLR
    rlr_mode: str = RLR_MODE_ORIG
    beaver: str = "dealer"
    range_check: bool = False
    range_bits: int = 28
    sz_multiplicity: int = 1
    tau_rfa: float = None
    eps_norm: float = 1e-8
    min_norm: float = 0.05
    allow_rerun: bool = True

    def __post_init__(self):
        if self.robust_alg not in (RLR, RFA):
            raise ParamError(f"unknown robust_alg {self.robust_alg!r}")
        if self.beaver not in ("dealer", "self"):
            raise ParamError(f"unknown beaver mode {self.beaver!r}")
        self.fp.check_wraparound(self.n_users)
        make_lcc_params(self.fp, self.n_users, self.threshold, self.partitions)

    @property
    def tau(self) -> float:
        if self.tau_rfa is not None:
            return self.tau_rfa
        return robust.rfa_residual_tolerance(self.n_users, np.sqrt(self.dim), self.fp.p)


def make_config(n_users: int, dim: int, fp: FieldParams = None, threshold=None,
                partitions=None, **kw) -> ProtocolConfig:
    fp = fp or default_field()
    t_def, k_def = default_thresholds(n_users)
    return ProtocolConfig(n_users=n_users, dim=dim, fp=fp,
                          threshold=t_def if threshold is None else threshold,
                          partitions=k_def if partitions is None else partitions, **kw)


@lru_cache(maxsize=None)
def vector_params(cfg: ProtocolConfig) -> LccParams:
    return make_lcc_params(cfg.fp, cfg.n_users, cfg.threshold, cfg.partitions)


@lru_cache(maxsize=None)
def scalar_params_of(cfg: ProtocolConfig) -> LccParams:
    return scalar_params(vector_params(cfg))


def block_positions(cfg: ProtocolConfig) -> int:
    return vector_params(cfg).block_len(cfg.dim)


@lru_cache(maxsize=None)
def circuits_for(cfg: ProtocolConfig):
    m = block_positions(cfg)
    if cfg.robust_alg == RLR:
        return robust.build_sign_circuit(cfg.fp.p, m)
    return robust.build_rfa_circuit(cfg.fp.p, m,
                                    cfg.range_bits if cfg.range_check else 0)


def max_gate_count(cfg: ProtocolConfig) -> int:
    c = circuits_for(cfg)
    if cfg.robust_alg == RLR:
        return c.n_gates
    return max(c.square_block.n_gates, c.tail.n_gates)


def sharing_names(cfg: ProtocolConfig):
    """name -> LccParams for every sharing a prover distributes."""
    vp, sp = vector_params(cfg), scalar_params_of(cfg)
    if cfg.robust_alg == RLR:
        names = {"x": vp, "e": vp, "h": vp}
        for j in range(bit_width(cfg.fp.p)):
            names[f"b{j}"] = vp
        return names
    return {"x": vp, "tail": sp, "h_sq": vp, "h_tail": sp}


def commit_basis_len(cfg: ProtocolConfig) -> int:
    m = block_positions(cfg)
    if cfg.robust_alg == RLR:
        circuit = circuits_for(cfg)
        return max(m, circuit.h_len)
    circuits = circuits_for(cfg)
    return max(m, circuits.square_block.h_len, circuits.tail.h_len,
               3 + 2 * (cfg.range_bits if cfg.range_check else 0))


# -- trusted setup -------------------------------------------------------------------


@dataclass(frozen=True)
class Setup:
    cfg: ProtocolConfig
    commit_setup: lcc.CommitSetup
    pks: tuple
    sks: tuple  # held by the simulation, one per user

    def session_key(self, i: int, j: int) -> bytes:
        return ka_agree(self.cfg.fp, self.pks[j], self.sks[i])


def make_setup(cfg: ProtocolConfig, seed: int) -> Setup:
    commit_setup = make_commit_setup_for(cfg, seed)
    pks, sks = [], []
    for i in range(cfg.n_users):
        pk, sk = ka_gen(cfg.fp, substream(seed, "ka", i))
        pks.append(pk)
        sks.append(sk)
    return Setup(cfg=cfg, commit_setup=commit_setup, pks=tuple(pks), sks=tuple(sks))


def make_commit_setup_for(cfg: ProtocolConfig, seed: int) -> lcc.CommitSetup:
    return lcc.make_commit_setup(cfg.fp, commit_basis_len(cfg), substream(seed, "gamma"))


# -- Beaver dealing ------------------------------------------------------------------


def sigma_tests_for(cfg: ProtocolConfig):
    """(test name, LccParams) for every polynomial-identity test per prover."""
    if cfg.robust_alg == RLR:
        return (("sigma", vector_params(cfg)),)
    return (("sigma_sq", vector_params(cfg)), ("sigma_tail", scalar_params_of(cfg)))


def deal_triples(cfg: ProtocolConfig, seed: int, iteration: int, prover: int,
                 rng=None) -> dict:
    """All triple material one prover's tests (and products) consume."""
    out = {}
    for name, params in sigma_tests_for(cfg):
        out[name] = tuple(
            snip.deal_sigma_triple(
                params,
                rng or substream(seed, "beaver", iteration, prover, name, t))
            for t in range(cfg.sz_multiplicity))
    if cfg.robust_alg == RFA:
        out["m4"] = snip.deal_scalar_vector_triple(
            scalar_params_of(cfg), vector_params(cfg), block_positions(cfg),
            rng or substream(seed, "beaver", iteration, prover, "m4"))
    return out


# -- adversarial behavior hooks ---------------------------------------------------------


@dataclass(frozen=True)
class Behavior:
    """Protocol-level deviations a corrupted user executes."""

    drop_round: int = 0  # 0 = never
    bad_share_victim: int = -1
    bad_commit: bool = False
    cheat_circuit: bool = False
    false_tags: tuple = ()
    bad_sigma: bool = False


HONEST = Behavior()


# -- round 1 -----------------------------------------------------------------------------


@dataclass(eq=False)
class Round1Product:
    prover: int
    quantized: np.ndarray
    share_mats: dict  # name -> (N, payload)
    commitments: dict  # name -> CommitmentVector
    ciphertexts: dict  # recipient -> bytes
    clip_count: int
    triples: dict = None  # beaver='self' material


def _prove_rlr(cfg, x_field, rng):
    m = block_positions(cfg)
    vp = vector_params(cfg)
    e, bits = robust.sign_witnesses(x_field, cfg.fp)
    blocks = {"x": lcc.pad_blocks(x_field, vp), "e": lcc.pad_blocks(e, vp)}
    for j in range(bits.shape[0]):
        blocks[f"b{j}"] = lcc.pad_blocks(bits[j], vp)
    circuit = circuits_for(cfg)
    inputs = robust.sign_circuit_inputs(
        blocks["x"], blocks["e"],
        np.stack([blocks[f"b{j}"] for j in range(bits.shape[0])]), cfg.fp.q)
    h_blocks = snip.snip_prove(circuit, inputs, cfg.fp.q)
    return blocks, {"h": h_blocks}


def _prove_rfa(cfg, x_field, rng):
    vp = vector_params(cfg)
    circuits = circuits_for(cfg)
    omega, n_val, s = robust.rfa_witnesses(x_field, cfg.fp, rng, cfg.eps_norm)
    x_blocks = lcc.pad_blocks(x_field, vp)
    tail_inputs = [omega, n_val, s]
    if cfg.range_check:
        q = cfg.fp.q
        r1sq = int((n_val * n_val - s) % q)
        r1sq = (r1sq * r1sq) % q
        r2sq = int((omega * n_val - cfg.fp.p ** 2) % q)
        r2sq = (r2sq * r2sq) % q
        for val in (r1sq, r2sq):
            tail_inputs += [(val >> j) & 1 for j in range(cfg.range_bits)]
    tail_vec = np.asarray(tail_inputs, dtype=np.int64)
    h_sq = snip.snip_prove(circuits.square_block, x_blocks, cfg.fp.q)
    h_tail = snip.snip_prove(circuits.tail, tail_vec[None, :], cfg.fp.q)
    return ({"x": x_blocks, "tail": tail_vec[None, :]},
            {"h_sq": h_sq, "h_tail": h_tail})


def user_round1(cfg: ProtocolConfig, setup: Setup, iteration: int, i: int,
                update_real, rng, behavior: Behavior = HONEST):
    """Quantize, share, commit, prove, encrypt.  None when the user drops."""
    if behavior.drop_round == 1:
        return None
    q = cfg.fp.q
    clipped, n_clip = clip_updates(np.asarray(update_real, dtype=np.float64))
    x_field = quantize(clipped, cfg.fp, rng)
    if cfg.robust_alg == RLR:
        blocks, proofs = _prove_rlr(cfg, x_field, rng)
    else:
        blocks, proofs = _prove_rfa(cfg, x_field, rng)
    if behavior.cheat_circuit:
        name = "h" if cfg.robust_alg == RLR else "h_sq"
        tampered = proofs[name].copy()
        tampered[0, 0] = (tampered[0, 0] + 1) % q
        proofs[name] = tampered

    params_by_name = sharing_names(cfg)
    share_mats, noises, commitments = {}, {}, {}
    for name, params in params_by_name.items():
        secret = (blocks[name].reshape(-1) if name in blocks
                  else proofs[name].reshape(-1))
        payload = params.block_len(len(secret))
        noise = rng.integers(0, q, size=(params.threshold, payload), dtype=np.int64)
        share_mats[name] = lcc.share_with_noise(secret, noise, params)
        noises[name] = noise
        commit_secret = secret
        if behavior.bad_commit and name == "x":
            commit_secret = (secret + 1) % q
        commitments[name] = lcc.lcc_commit(commit_secret, noise, params,
                                           setup.commit_setup, owner=i)
    if behavior.bad_share_victim >= 0:
        mat = share_mats["x"].copy()
        mat[behavior.bad_share_victim, 0] = (mat[behavior.bad_share_victim, 0] + 1) % q
        share_mats["x"] = mat

    triples = None
    if cfg.beaver == "self":
        triples = deal_triples(cfg, 0, iteration, i, rng=rng)

    ciphertexts = {}
    for j in range(cfg.n_users):
        bundle = {name: share_mats[name][j] for name in share_mats}
        if triples is not None:
            bundle.update(_triple_rows(cfg, triples, j))
        key = setup.session_key(i, j)
        pt = wire.pack_named_vectors(bundle)
        ciphertexts[j] = ae_enc(key, _nonce(iteration, i, j, "r1"), pt)
    return Round1Product(prover=i, quantized=x_field, share_mats=share_mats,
                         commitments=commitments, ciphertexts=ciphertexts,
                         clip_count=n_clip, triples=triples)


def _triple_rows(cfg, triples, holder):
    rows = {}
    for name, entry in triples.items():
        tlist = entry if isinstance(entry, tuple) else (entry,)
        for t, triple in enumerate(tlist):
            base = f"bt.{name}.{t}"
            rows[f"{base}.a"] = triple.a_sh[holder]
            rows[f"{base}.b"] = triple.b_sh[holder]
            rows[f"{base}.c"] = triple.c_sh[holder]
            rows[f"{base}.ab"] = triple.a_blk[:, holder]
            if triple.b_blk is not None:
                rows[f"{base}.bb"] = triple.b_blk[:, holder]
    return rows


def _triples_from_rows(cfg, bundles, prover):
    """Rebuild per-prover PackedTriples from mailbox rows across holders."""
    n = cfg.n_users
    out = {}
    names = [name for name, _ in sigma_tests_for(cfg)]
    if cfg.robust_alg == RFA:
        names.append("m4")
    for name in names:
        per_test = []
        for t in range(cfg.sz_multiplicity if name != "m4" else 1):
            base = f"bt.{name}.{t}"
            some = next(b for b in bundles.values() if b is not None)
            a = np.stack([_row(bundles, i, f"{base}.a") for i in range(n)])
            b = np.stack([_row(bundles, i, f"{base}.b") for i in range(n)])
            c = np.stack([_row(bundles, i, f"{base}.c") for i in range(n)])
            ab = np.stack([_row(bundles, i, f"{base}.ab") for i in range(n)], axis=1)
            bb = None
            if f"{base}.bb" in some:
                bb = np.stack([_row(bundles, i, f"{base}.bb") for i in range(n)], axis=1)
            per_test.append(snip.PackedTriple(a_sh=a, b_sh=b, c_sh=c,
                                              a_blk=ab[..., None] if ab.ndim == 2 else ab,
                                              b_blk=bb[..., None] if bb is not None and bb.ndim == 2 else bb))
        out[name] = tuple(per_test) if name != "m4" else per_test[0]
    return out


def _row(bundles, holder, key):
    b = bundles.get(holder)
    if b is None or key not in b:
        return None
    v = b[key]
    return v


# -- round 2 ------------------------------------------------------------------------------


@dataclass(eq=False)
class RoundMessages:
    sender: int
    m1: tuple  # locally tagged users
    m2: dict  # (prover, test name, test idx) -> sigma share
    m3: dict  # name -> summed output share vector
    m4: dict  # name -> summed update/product share vector

    def to_wire(self) -> bytes:
        named = {"m1": np.asarray(sorted(self.m1), dtype=np.int64)}
        for (j, name, t), v in self.m2.items():
            named[f"m2.{j}.{name}.{t}"] = np.asarray([v], dtype=np.int64)
        for name, v in self.m3.items():
            named[f"m3.{name}"] = v
        for name, v in self.m4.items():
            named[f"m4.{name}"] = v
        return wire.pack_named_vectors(named)

    @classmethod
    def from_wire(cls, sender: int, blob: bytes):
        named = wire.unpack_named_vectors(blob)
        m1 = tuple(int(v) for v in named.pop("m1"))
        m2, m3, m4 = {}, {}, {}
        for key, v in named.items():
            kind, rest = key.split(".", 1)
            if kind == "m2":
                j, name, t = rest.split(".")
                m2[(int(j), name, int(t))] = int(v[0])
            elif kind == "m3":
                m3[rest] = v
            elif kind == "m4":
                m4[rest] = v
        return cls(sender=sender, m1=m1, m2=m2, m3=m3, m4=m4)


@dataclass(eq=False)
class HolderView:
    """What one holder decrypted, verified, and tagged after round 1."""

    holder: int
    tags: set
    bundles: dict  # prover -> named vectors (None if undecryptable/missing)


def holder_verify(cfg: ProtocolConfig, setup: Setup, iteration: int, i: int,
                  products: dict, commitments: dict, live_provers) -> HolderView:
    """Decrypt every prover's bundle and verify each share against commitments."""
    tags, bundles = set(), {}
    params_by_name = sharing_names(cfg)
    for j in live_provers:
        prod = products.get(j)
        ct = prod.ciphertexts.get(i) if prod is not None else None
        if ct is None:
            tags.add(j)
            bundles[j] = None
            continue
        pt = ae_dec(setup.session_key(i, j), _nonce(iteration, j, i, "r1"), ct)
        if pt is None:
            tags.add(j)
            bundles[j] = None
            continue
        named = wire.unpack_named_vectors(pt)
        bundles[j] = named
        coms = commitments.get(j)
        ok = coms is not None
        if ok:
            for name, params in params_by_name.items():
                share = lcc.Share(owner=j, holder=i, payload=named[name])
                if not lcc.lcc_verify(share, coms[name], params, setup.commit_setup):
                    ok = False
                    break
        if not ok:
            tags.add(j)
    return HolderView(holder=i, tags=tags, bundles=bundles)


def _share_tensor(views, provers, holders, name, n_users, payload):
    """(n_provers, n_users, payload) from mailbox rows; missing rows zero."""
    out = np.zeros((len(provers), n_users, payload), dtype=np.int64)
    for a, j in enumerate(provers):
        for i in holders:
            b = views[i].bundles.get(j)
            if b is not None and name in b:
                out[a, i] = b[name]
    return out


@dataclass(eq=False)
class Round2State:
    """Shared intermediates for phase A/B of round 2 (all holders batched)."""

    provers: tuple
    holders: tuple
    tensors: dict
    replays: dict  # test name -> (u_r, v_r, fh_r, outs) arrays (n_prov, N, ...)
    triples: dict  # prover -> triple dict
    opening_shares: dict  # (prover, kind, t) -> per-holder share array
    contributors: dict = None  # prover -> holders that verified its bundle
    openings: dict = None  # (prover, kind, t) -> decoded public blocks


def _assemble_inputs(cfg, tensors):
    """Per-test circuit input tensors (n_prov, N, n_inputs)."""
    if cfg.robust_alg == RLR:
        bw = bit_width(cfg.fp.p)
        bits = np.stack([tensors[f"b{j}"] for j in range(bw)])
        inputs = robust.sign_circuit_inputs(tensors["x"], tensors["e"], bits, cfg.fp.q)
        return {"sigma": (circuits_for(cfg), inputs, tensors["h"])}
    circuits = circuits_for(cfg)
    return {
        "sigma_sq": (circuits.square_block, tensors["x"], tensors["h_sq"]),
        "sigma_tail": (circuits.tail, tensors["tail"], tensors["h_tail"]),
    }


def round2_phase_a(cfg: ProtocolConfig, setup: Setup, iteration: int, products: dict,
                   commitments: dict, live_users, excluded, seed: int,
                   behaviors: dict, r_list) -> tuple:
    """Verification, tags, replays, and the Beaver opening shares.

    Returns (views, state) where state.opening_shares maps
    (prover, test/m4, index) to the per-holder share vectors sent upward.
    """
    live_provers = [j for j in live_users if j not in excluded]
    holders = [i for i in live_users if i not in excluded]
    views = {}
    for i in holders:
        view = holder_verify(cfg, setup, iteration, i, products, commitments,
                             live_provers)
        beh = behaviors.get(i, HONEST)
        for v in beh.false_tags:
            if v != i:
                view.tags.add(v)
        views[i] = view

    params_by_name = sharing_names(cfg)
    n = cfg.n_users
    provers = tuple(live_provers)
    tensors = {}
    for name, params in params_by_name.items():
        payload = None
        for i in holders:
            for j in provers:
                b = views[i].bundles.get(j)
                if b is not None and name in b:
                    payload = len(b[name])
                    break
            if payload is not None:
                break
        tensors[name] = _share_tensor(views, provers, holders, name, n, payload or 1)

    if cfg.beaver == "self":
        triples = {j: _triples_from_rows(cfg, {i: views[i].bundles.get(j) for i in holders}, j)
                   for j in provers}
    else:
        triples = {j: deal_triples(cfg, seed, iteration, j) for j in provers}

    replays = {}
    opening_shares = {}
    q = cfg.fp.q
    for t_idx, r in enumerate(r_list):
        for test, (circuit, inputs, h_tensor) in _assemble_inputs(cfg, tensors).items():
            u_r, v_r, fh_r, outs = snip.replay_shares(circuit, inputs, h_tensor, r, q)
            replays[(test, t_idx)] = (u_r, v_r, fh_r, outs)
            for a, j in enumerate(provers):
                triple = triples[j][test][t_idx]
                d_sh, e_sh = snip.beaver_opening_shares(u_r[a], v_r[a], triple, q)
                opening_shares[(j, test, t_idx)] = np.stack([d_sh, e_sh])
    if cfg.robust_alg == RFA:
        for a, j in enumerate(provers):
            triple = triples[j]["m4"]
            d_sh = (tensors["tail"][a, :, 0] - triple.a_sh[:, 0]) % q
            e_sh = (tensors["x"][a] - triple.b_sh) % q
            opening_shares[(j, "m4", 0)] = (d_sh, e_sh)

    contributors = {j: tuple(i for i in holders if j not in views[i].tags)
                    for j in provers}
    state = Round2State(provers=provers, holders=tuple(holders), tensors=tensors,
                        replays=replays, triples=triples,
                        opening_shares=opening_shares, contributors=contributors)
    return views, state


def server_decode_openings(cfg: ProtocolConfig, state: Round2State,
                           senders=None) -> dict:
    """Decode every d/e opening from holders that verified the prover's bundle.

    A holder that tagged prover j has no trustworthy share of j's inputs and
    contributes nothing to j's openings; the interpolation runs on the rest.
    Too few contributors leaves the opening (and hence j's sigma) undecided.
    """
    vp, sp = vector_params(cfg), scalar_params_of(cfg)
    params_for = dict(sigma_tests_for(cfg))
    openings = {}
    sender_set = set(senders) if senders is not None else set(state.holders)
    for (j, kind, t), shares in state.opening_shares.items():
        rows = tuple(i for i in state.contributors.get(j, state.holders)
                     if i in sender_set)
        try:
            if kind == "m4":
                d_sh, e_sh = shares
                d = lcc.recon_matrix_form(d_sh[list(rows), None], rows, sp)[0]
                e_blocks = lcc.recon_matrix_form(e_sh[list(rows)], rows, vp)
                openings[(j, kind, t)] = (int(d), e_blocks.reshape(vp.partitions, -1))
            else:
                params = params_for[kind]
                d = lcc.recon_matrix_form(shares[0][list(rows), None], rows, params)
                e = lcc.recon_matrix_form(shares[1][list(rows), None], rows, params)
                openings[(j, kind, t)] = (d, e)
        except lcc.InsufficientShares:
            openings[(j, kind, t)] = None
    state.openings = openings
    return openings


def round2_phase_b(cfg: ProtocolConfig, state: Round2State, views: dict,
                   excluded, behaviors: dict, seed: int, iteration: int) -> dict:
    """Assemble every live holder's m1-m4 after the openings broadcast."""
    q = cfg.fp.q
    provers = state.provers
    n = cfg.n_users
    sigma_mats = {}
    for t_idx in range(cfg.sz_multiplicity):
        for test, params in sigma_tests_for(cfg):
            _, _, fh_r, _ = state.replays[(test, t_idx)]
            for a, j in enumerate(provers):
                opening = state.openings[(j, test, t_idx)]
                if opening is None:
                    continue  # untestable; server sees no sigma for j
                d, e = opening
                triple = state.triples[j][test][t_idx]
                sigma_mats[(j, test, t_idx)] = snip.sigma_from_openings(
                    d, e, fh_r[a], triple, params)
    prod_mats = {}
    if cfg.robust_alg == RFA:
        for a, j in enumerate(provers):
            opening = state.openings[(j, "m4", 0)]
            if opening is None:
                prod_mats[j] = None  # only fatal if some holder must include j
                continue
            d, e_blocks = opening
            prod_mats[j] = snip.scalar_vector_product_shares(
                d, e_blocks, state.triples[j]["m4"], vector_params(cfg))

    messages = {}
    for i in state.holders:
        beh = behaviors.get(i, HONEST)
        if beh.drop_round == 2:
            continue
        view = views[i]
        include = [j for j in provers if j not in view.tags and j not in excluded]
        idx = {j: a for a, j in enumerate(provers)}
        m2 = {}
        for (j, test, t_idx), mat in sigma_mats.items():
            if j in view.tags or j in excluded:
                continue
            val = int(mat[i])
            if beh.bad_sigma:
                val = int(substream(seed, "badsig", iteration, i, j, test, t_idx)
                          .integers(0, q))
            m2[(j, test, t_idx)] = val
        m3, m4 = {}, {}
        if cfg.robust_alg == RLR:
            outs = state.replays[("sigma", 0)][3]
            m3["sign"] = outs[[idx[j] for j in include], i].sum(axis=0) % q if include else \
                np.zeros(outs.shape[-1], dtype=np.int64)
            m4["x"] = state.tensors["x"][[idx[j] for j in include], i].sum(axis=0) % q if include else \
                np.zeros(state.tensors["x"].shape[-1], dtype=np.int64)
        else:
            outs_sq = state.replays[("sigma_sq", 0)][3]
            outs_tail = state.replays[("sigma_tail", 0)][3]
            rows = [idx[j] for j in include]
            m3["sq"] = outs_sq[rows, i].sum(axis=0) % q if rows else \
                np.zeros(outs_sq.shape[-1], dtype=np.int64)
            m3["tail"] = outs_tail[rows, i].sum(axis=0) % q if rows else \
                np.zeros(outs_tail.shape[-1], dtype=np.int64)
            missing = [j for j in include if prod_mats[j] is None]
            if missing:
                raise lcc.InsufficientShares(
                    f"omega*x opening for included prover {missing[0]} undecodable")
            m4["wx"] = (sum(prod_mats[j][i] for j in include) % q) if include else \
                np.zeros(block_positions(cfg), dtype=np.int64)
            m4["w"] = np.asarray(
                [sum(int(state.tensors["tail"][idx[j], i, 0]) for j in include) % q],
                dtype=np.int64)
        messages[i] = RoundMessages(sender=i, m1=tuple(sorted(view.tags)), m2=m2,
                                    m3=m3, m4=m4)
    return messages


# -- round 3 -------------------------------------------------------------------------------


@dataclass
class MaliciousSet:
    members: set = field(default_factory=set)
    reasons: dict = field(default_factory=dict)

    def add(self, user: int, reason: str):
        self.members.add(user)
        reasons = self.reasons.setdefault(user, [])
        if not reasons:
            reasons.append(reason)


def _tag_rules(cfg: ProtocolConfig, messages: dict, ua: MaliciousSet):
    tagged_by = {j: 0 for j in range(cfg.n_users)}
    for i, msg in messages.items():
        for j in msg.m1:
            tagged_by[j] += 1
    for j, count in tagged_by.items():
        if count > cfg.threshold:
            ua.add(j, f"tagged by {count} > T users")
    for i, msg in messages.items():
        if len(msg.m1) > cfg.threshold:
            ua.add(i, f"tags {len(msg.m1)} > T users")


def _sigma_values(messages, provers, holders, test, t_idx):
    vals = {}
    for j in provers:
        row = {}
        for i in holders:
            msg = messages.get(i)
            if msg is not None and (j, test, t_idx) in msg.m2:
                row[i] = msg.m2[(j, test, t_idx)]
        vals[j] = row
    return vals


def _decode_sigma(values: dict, holders, params) -> tuple:
    """(verdict, blocks) for one prover from holder -> share values."""
    hs = [i for i in holders if i in values]
    if len(hs) < params.partitions + params.threshold:
        return "undecodable", None
    arr = np.asarray([values[i] for i in hs], dtype=np.int64)
    return snip.sigma_check(arr, hs, params)


def analyze_sigma(cfg: ProtocolConfig, messages: dict, holders, provers,
                  ua: MaliciousSet):
    """Per-prover sigma verdicts with holder localization on misfits.

    Consistent nonzero decodings tag the prover.  Misfits (or more than T
    nonzero provers, impossible with <= T cheating provers) point at corrupted
    sigma shares: search holder subsets whose exclusion makes every remaining
    prover decode to zero; a unique such subset is tagged instead.
    """
    holders = [i for i in holders if i not in ua.members]
    provers = [j for j in provers if j not in ua.members]
    suspects = set()
    mass_failure = False
    verdict_map = {j: [] for j in provers}
    for t_idx in range(cfg.sz_multiplicity):
        for test, params in sigma_tests_for(cfg):
            values = _sigma_values(messages, provers, holders, test, t_idx)
            verdicts = {j: _decode_sigma(values[j], holders, params) for j in provers}
            n_cheat = sum(1 for v, _ in verdicts.values() if v == "cheat")
            misfit = any(v == "undecodable" for v, _ in verdicts.values())
            if not misfit and n_cheat <= cfg.threshold:
                for j, (v, _) in verdicts.items():
                    verdict_map[j].append(v)
                continue
            # misfits, or more cheats than the threat model allows for
            # provers: corrupted sigma shares are in play somewhere
            located = _localize_bad_holders(cfg, values, holders, provers, params)
            if located is not None:
                suspects.update(located)
                kept = [i for i in holders if i not in located]
                for j in provers:
                    v, _ = _decode_sigma(values[j], kept, params)
                    verdict_map[j].append(v)
            elif not misfit and n_cheat > cfg.threshold:
                # consistent decodings implicate > T provers and no holder
                # subset explains them: the iteration is beyond salvage
                mass_failure = True
                for j in provers:
                    verdict_map[j].append("inconclusive")
            else:
                # misfit but not attributable; tags nobody
                for j in provers:
                    verdict_map[j].append("inconclusive")
    for i in suspects:
        ua.add(i, "sigma shares off-codeword (localized)")
    for j, verdicts in verdict_map.items():
        if any(v == "cheat" for v in verdicts):
            ua.add(j, "sigma test nonzero")
    return verdict_map, mass_failure


def _localize_bad_holders(cfg: ProtocolConfig, values, holders, provers, params):
    need = params.partitions + params.threshold
    budget = min(cfg.threshold, len(holders) - need)
    n_provers = len(provers)
    for size in range(1, budget + 1):
        candidates = []
        for drop in combinations(holders, size):
            kept = [i for i in holders if i not in drop]
            zeros = 0
            for j in provers:
                v, _ = _decode_sigma(values[j], kept, params)
                if v == "honest":
                    zeros += 1
            candidates.append((zeros, drop))
        best_zeros = max(z for z, _ in candidates)
        top = [drop for z, drop in candidates if z == best_zeros]
        if best_zeros >= n_provers - cfg.threshold and len(top) == 1:
            return set(top[0])
    return None


class ResidualFailure(Exception):
    """Aggregate residual checks failed with no attributable offender."""


def _decode_aggregates(cfg: ProtocolConfig, messages: dict, included_provers: set,
                       ua: MaliciousSet, base_exclusions: set):
    """Decode m3/m4 from holders whose inclusion set matches the target."""
    vp, sp = vector_params(cfg), scalar_params_of(cfg)
    target = set(range(cfg.n_users)) - set(included_provers)
    coherent = []
    for i, msg in sorted(messages.items()):
        if i in ua.members:
            continue
        holder_excluded = set(msg.m1) | base_exclusions
        if holder_excluded != target:
            continue  # divergent inclusion set; sums incompatible
        coherent.append(i)
    need = vp.partitions + vp.threshold
    if len(coherent) < need:
        raise lcc.InsufficientShares(
            f"only {len(coherent)} coherent holders, need {need}")
    rows = coherent
    out = {}
    if cfg.robust_alg == RLR:
        m3 = np.stack([messages[i].m3["sign"] for i in rows])
        m4 = np.stack([messages[i].m4["x"] for i in rows])
        m = block_positions(cfg)
        data = lcc.recon_matrix_form(m3, rows, vp, check=True).reshape(
            vp.partitions, m + 3)
        out["sign_sums"] = data[:, :m].reshape(-1)[: cfg.dim]
        out["residuals"] = data[:, m:]
        out["x_sum"] = lcc.recon_matrix_form(m4, rows, vp, out_len=cfg.dim, check=True)
    else:
        m3_sq = np.stack([messages[i].m3["sq"] for i in rows])
        m3_tail = np.stack([messages[i].m3["tail"] for i in rows])
        m4_wx = np.stack([messages[i].m4["wx"] for i in rows])
        m4_w = np.stack([messages[i].m4["w"] for i in rows])
        out["block_sq_sums"] = lcc.recon_matrix_form(m3_sq, rows, vp, check=True)
        out["tail_sums"] = lcc.recon_matrix_form(m3_tail, rows, sp, check=True)
        out["wx_sum"] = lcc.recon_matrix_form(m4_wx, rows, vp, out_len=cfg.dim, check=True)
        out["w_sum"] = int(lcc.recon_matrix_form(m4_w, rows, sp, check=True)[0])
    out["coherent_holders"] = rows
    return out


def _finalize(cfg: ProtocolConfig, decoded: dict, n_included: int):
    """Robust aggregate (field and real) plus the residual report."""
    fp = cfg.fp
    if cfg.robust_alg == RLR:
        if np.any(decoded["residuals"]):
            raise ResidualFailure("sign-circuit residual sums nonzero")
        mask = robust.rlr_mask(decoded["sign_sums"], n_included, cfg.threshold,
                               cfg.rlr_mode)
        agg_field = robust.rlr_aggregate(decoded["x_sum"], mask, fp)
        return {
            "aggregate_field": agg_field,
            "aggregate_real": dequantize(agg_field, fp),
            "mask": mask,
            "residual_report": {"sign_residuals_zero": True},
        }
    tail = decoded["tail_sums"]
    sum_r1sq, sum_r2sq, sum_s = int(tail[0]), int(tail[1]), int(tail[2])
    if sum_s != int(decoded["block_sq_sums"].sum() % fp.q):
        raise ResidualFailure("sum-of-squares witness disagrees with square proof")
    rho1 = robust.normalized_residual_square(sum_r1sq, fp)
    rho2 = robust.normalized_residual_square(sum_r2sq, fp)
    if abs(rho1) > cfg.tau or abs(rho2) > cfg.tau:
        raise ResidualFailure(f"residual squares {rho1:.3g}, {rho2:.3g} above tau")
    if cfg.range_check:
        if np.any(tail[3:5]):
            raise ResidualFailure("range-check consistency sums nonzero")
    w_sum = fp.centered(decoded["w_sum"]) / fp.p
    if w_sum == 0:
        raise ResidualFailure("zero weight sum")
    wx = fp.centered(decoded["wx_sum"]) / fp.p ** 2
    agg_real = wx / float(w_sum)
    return {
        "aggregate_field": decoded["wx_sum"],
        "aggregate_real": agg_real,
        "weight_sum": float(w_sum),
        "residual_report": {"rho1": rho1, "rho2": rho2, "sum_s_consistent": True},
    }


@dataclass(eq=False)
class Round3Result:
    verdict: str  # done | rerun | abort
    ua: MaliciousSet
    output: dict = None
    abort_reason: str = None
    rerun_happened: bool = False


def server_round3(cfg: ProtocolConfig, messages: dict, ua0: set,
                  rerun_fn=None) -> Round3Result:
    """Tag rules, sigma analysis, decoding, verdict, optional re-execution."""
    ua = MaliciousSet()
    for j in ua0:
        ua.add(j, "dropped in round 1")
    live = set(range(cfg.n_users)) - set(ua0)
    silent = live - set(messages)
    for j in sorted(silent):
        ua.add(j, "silent in round 2")
    _tag_rules(cfg, messages, ua)
    _, mass_failure = analyze_sigma(cfg, messages,
                                    holders=sorted(set(messages) - ua.members),
                                    provers=sorted(live - ua.members), ua=ua)
    if mass_failure:
        return Round3Result(verdict="abort", ua=ua,
                            abort_reason="more than T provers failed the sigma "
                                         "test with no attributable holder")
    if len(ua.members) > cfg.threshold:
        return Round3Result(verdict="abort", ua=ua,
                            abort_reason=f"|U_A| = {len(ua.members)} > T")
    verdict = "done" if not ua.members else "rerun"
    current = messages
    rerun_happened = False
    if ua.members - set(ua0):
        if not (cfg.allow_rerun and rerun_fn is not None):
            return Round3Result(verdict="abort", ua=ua,
                                abort_reason="rerun required but unavailable")
        current = rerun_fn(set(ua.members))
        rerun_happened = True
        current = {i: m for i, m in current.items() if i not in ua.members}
        _tag_rules(cfg, current, ua)
        _, mass_failure = analyze_sigma(cfg, current,
                                        holders=sorted(set(current) - ua.members),
                                        provers=sorted(live - ua.members), ua=ua)
        if mass_failure:
            return Round3Result(verdict="abort", ua=ua, rerun_happened=True,
                                abort_reason="sigma mass failure after rerun")
        if len(ua.members) > cfg.threshold:
            return Round3Result(verdict="abort", ua=ua, rerun_happened=True,
                                abort_reason=f"|U_A| = {len(ua.members)} > T after rerun")
    included = set(range(cfg.n_users)) - ua.members
    base_excl = set(ua0) | (ua.members if rerun_happened else set())
    try:
        decoded = _decode_aggregates(cfg, current, included, ua, base_excl)
        output = _finalize(cfg, decoded, len(included))
    except lcc.InsufficientShares as exc:
        return Round3Result(verdict="abort", ua=ua, rerun_happened=rerun_happened,
                            abort_reason=f"insufficient shares: {exc}")
    except (lcc.DecodeFailure, ResidualFailure) as exc:
        return Round3Result(verdict="abort", ua=ua, rerun_happened=rerun_happened,
                            abort_reason=str(exc))
    output["included"] = sorted(included)
    return Round3Result(verdict=verdict, ua=ua, output=output,
                        rerun_happened=rerun_happened)


# -- full iteration -----------------------------------------------------------------------


@dataclass(eq=False)
class IterationReport:
    verdict: str
    ua: dict  # user -> reasons
    aggregate_real: np.ndarray = None
    aggregate_field: np.ndarray = None
    output: dict = None
    abort_reason: str = None
    quantized: np.ndarray = None
    included: list = None
    r_list: tuple = ()
    clip_counts: dict = None
    bytes_by_role: dict = None
    timings: dict = None
    envelopes: list = None
    rerun_happened: bool = False


def run_iteration(updates, adversary_spec, cfg: ProtocolConfig, seed: int,
                  iteration: int = 0, setup: Setup = None,
                  record_envelopes: bool = True) -> IterationReport:
    """Orchestrate setup, rounds 1-3 (with rerun), and collect the report.

    `updates` holds the benign users' real vectors; corrupted users' updates
    and behaviors come from `adversary_spec` (an AdversarySpec or None).
    """
    from . import adversary as adv

    if setup is None:
        setup = make_setup(cfg, seed)
    t0 = time.perf_counter()
    if adversary_spec is None:
        full_updates = np.asarray(updates, dtype=np.float64)
        behaviors = {}
    else:
        full_updates = adv.poison_updates(updates, adversary_spec, cfg,
                                          substream(seed, "attack", iteration))
        behaviors = adv.round_behaviors(adversary_spec, cfg)

    envelopes = [] if record_envelopes else None
    bytes_by_role = {"user_r1_p2p": 0, "user_r1_broadcast": 0, "user_r2": 0,
                     "server_broadcast": 0}
    msg_counts = {"user_r1_p2p": 0, "user_r1_broadcast": 0, "user_r2": 0,
                  "server_broadcast": 0}

    def record(env: wire.Envelope, role: str, size: int = None):
        bytes_by_role[role] += size if size is not None else len(env.payload)
        msg_counts[role] += 1
        if envelopes is not None:
            envelopes.append(env)

    # round 1
    products, clip_counts = {}, {}
    t_r1 = time.perf_counter()
    t_r1_cpu = time.process_time()
    for i in range(cfg.n_users):
        rng = substream(seed, "user", i, iteration)
        prod = user_round1(cfg, setup, iteration, i, full_updates[i], rng,
                           behaviors.get(i, HONEST))
        if prod is None:
            continue
        products[i] = prod
        clip_counts[i] = prod.clip_count
        for j, ct in prod.ciphertexts.items():
            record(wire.Envelope(iteration, 1, i, j, "bundle-len",
                                 len(ct).to_bytes(8, "little")),
                   "user_r1_p2p", size=len(ct))
        com_blob = wire.pack_named_vectors(
            {name: np.asarray([c % (1 << 63) for c in prod.commitments[name].elements],
                              dtype=np.int64)
             for name in prod.commitments})
        record(wire.Envelope(iteration, 1, i, wire.BROADCAST, "commitments", com_blob),
               "user_r1_broadcast")
    r1_time = time.perf_counter() - t_r1
    r1_cpu = time.process_time() - t_r1_cpu

    ua0 = set(range(cfg.n_users)) - set(products)
    server_rng = substream(seed, "server", iteration)
    r_list = tuple(snip.draw_test_point(cfg.fp.q, max_gate_count(cfg), server_rng)
                   for _ in range(cfg.sz_multiplicity))
    gate_blob = wire.pack_named_vectors(
        {"r": np.asarray(r_list, dtype=np.int64),
         "ua0": np.asarray(sorted(ua0), dtype=np.int64)})
    record(wire.Envelope(iteration, 1, wire.SERVER, wire.BROADCAST, "challenge",
                         gate_blob), "server_broadcast")

    # round 2
    t_r2 = time.perf_counter()
    commitments = {i: products[i].commitments for i in products}
    live = sorted(products)
    views, state = round2_phase_a(cfg, setup, iteration, products, commitments,
                                  live, ua0, seed, behaviors, r_list)
    for (j, kind, t), shares in state.opening_shares.items():
        blob = wire.pack_named_vectors({"d": np.atleast_1d(shares[0]),
                                        "e": np.atleast_1d(shares[1])})
        record(wire.Envelope(iteration, 2, -3, wire.SERVER, f"open.{j}.{kind}.{t}",
                             blob), "user_r2")
    opening_senders = tuple(i for i in state.holders
                            if behaviors.get(i, HONEST).drop_round != 2)
    server_decode_openings(cfg, state, senders=opening_senders)
    open_blob = wire.pack_named_vectors(
        {f"{j}.{kind}.{t}": np.concatenate([np.atleast_1d(np.asarray(d)).reshape(-1),
                                            np.atleast_1d(np.asarray(e)).reshape(-1)])
         for (j, kind, t), opening in state.openings.items()
         if opening is not None
         for d, e in [opening]})
    record(wire.Envelope(iteration, 2, wire.SERVER, wire.BROADCAST, "openings",
                         open_blob), "server_broadcast")

    try:
        messages = round2_phase_b(cfg, state, views, ua0, behaviors, seed, iteration)
    except lcc.InsufficientShares as exc:
        return IterationReport(verdict="abort", ua={}, abort_reason=str(exc),
                               r_list=r_list, clip_counts=clip_counts,
                               bytes_by_role=dict(bytes_by_role),
                               timings={"round1": r1_time}, envelopes=envelopes)
    for i, msg in messages.items():
        blob = msg.to_wire()
        record(wire.Envelope(iteration, 2, i, wire.SERVER, "round2", blob), "user_r2")
    r2_time = time.perf_counter() - t_r2

    # round 3 (+ rerun closure)
    t_r3 = time.perf_counter()

    def rerun_fn(ua_members):
        rerun_msgs = round2_phase_b(cfg, state, views, set(ua_members) | ua0,
                                    behaviors, seed, iteration)
        for i, msg in rerun_msgs.items():
            record(wire.Envelope(iteration, 4, i, wire.SERVER, "round2-rerun",
                                 msg.to_wire()), "user_r2")
        return rerun_msgs

    result = server_round3(cfg, messages, ua0, rerun_fn=rerun_fn)
    r3_time = time.perf_counter() - t_r3

    verdict_blob = wire.pack_named_vectors(
        {"ua": np.asarray(sorted(result.ua.members), dtype=np.int64)})
    record(wire.Envelope(iteration, 3, wire.SERVER, wire.BROADCAST,
                         f"verdict:{result.verdict}", verdict_blob),
           "server_broadcast")

    quantized = np.stack([products[i].quantized if i in products
                          else np.zeros(cfg.dim, dtype=np.int64)
                          for i in range(cfg.n_users)])
    report = IterationReport(
        verdict=result.verdict,
        ua={u: list(result.ua.reasons.get(u, [])) for u in sorted(result.ua.members)},
        abort_reason=result.abort_reason,
        quantized=quantized,
        r_list=r_list,
        clip_counts=clip_counts,
        bytes_by_role=dict(bytes_by_role),
        timings={"round1": r1_time, "round1_cpu": r1_cpu, "round2": r2_time,
                 "round3": r3_time, "total": time.perf_counter() - t0},
        envelopes=envelopes,
        rerun_happened=result.rerun_happened,
    )
    report.bytes_by_role["messages"] = dict(msg_counts)
    if result.output is not None:
        report.output = result.output
        report.aggregate_real = result.output["aggregate_real"]
        report.aggregate_field = result.output["aggregate_field"]
        report.included = result.output["included"]
    return report


# -- plaintext oracles ------------------------------------------------------------------


def plaintext_protocol_rlr(cfg: ProtocolConfig, quantized, included) -> dict:
    """Reference field-exact pipeline over the included users' quantized updates."""
    x = as_vec(quantized, cfg.fp.q)[sorted(included)]
    sums = np.stack([robust.sign_bits(row, cfg.fp) for row in x]).sum(axis=0)
    mask = robust.rlr_mask(sums, len(included), cfg.threshold, cfg.rlr_mode)
    total = x.sum(axis=0) % cfg.fp.q
    return {"mask": mask, "aggregate_field": robust.rlr_aggregate(total, mask, cfg.fp),
            "sign_sums": sums}


def plaintext_protocol_rfa(cfg: ProtocolConfig, quantized, included) -> np.ndarray:
    """Real-domain weighted mean on the dequantized included updates."""
    x = as_vec(quantized, cfg.fp.q)[sorted(included)]
    return robust.plaintext_rfa_from_quantized(x, cfg.fp, cfg.eps_norm)
