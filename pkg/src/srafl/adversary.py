"""Attack library: value poisoning on updates and protocol-level deviations.

Value attacks shape what a corrupted user submits (noise, scaling, the
omniscient distance-constrained perturbations, sign skewing); protocol
attacks override round behavior (bad shares, mismatched commitments,
tampered proofs, false tags, garbage sigma shares, dropping out).  Both are
static within an iteration and compose freely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .protocol import Behavior

VALUE_ATTACKS = ("none", "gaussian", "scale", "minmax", "minsum", "sign_skew")
PROTOCOL_ATTACKS = ("none", "bad_share", "bad_commit_pair", "cheat_circuit",
                    "false_tag", "bad_sigma", "drop")


@dataclass(frozen=True)
class AdversarySpec:
    corrupted: tuple = ()
    value_attack: str = "none"
    value_param: float = 1.0  # sigma for gaussian, c for scale, fraction for sign_skew
    protocol_attack: str = "none"
    drop_round: int = 1
    false_tag_targets: tuple = ()  # default: first T+1 honest users (resolved later)
    n_users: int = 0

    def __post_init__(self):
        if self.value_attack not in VALUE_ATTACKS:
            raise ValueError(f"unknown value attack {self.value_attack!r}")
        if self.protocol_attack not in PROTOCOL_ATTACKS:
            raise ValueError(f"unknown protocol attack {self.protocol_attack!r}")

    @property
    def corrupted_set(self):
        return set(self.corrupted)

    def honest_users(self, n: int):
        return [i for i in range(n) if i not in self.corrupted_set]


def synthetic_benign_updates(n_users: int, dim: int, rng: np.random.Generator,
                             truth_norm: float = 0.5, noise_std: float = 0.1):
    """Ground-truth direction of given norm plus per-user Gaussian jitter."""
    g = rng.normal(size=dim)
    g = g / np.linalg.norm(g) * truth_norm
    updates = g[None, :] + rng.normal(scale=noise_std, size=(n_users, dim))
    return np.clip(updates, -1 + 1e-6, 1 - 1e-6), g


def _max_pairwise_distance(x):
    d = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)
    return float(d.max())


def _binary_search_gamma(constraint, hi_start=1.0, iters=30):
    """Largest gamma >= 0 with constraint(gamma) True (monotone), by doubling
    then bisection."""
    if not constraint(0.0):
        return 0.0
    hi = hi_start
    while constraint(hi) and hi < 1e9:
        hi *= 2.0
    lo = 0.0
    for _ in range(iters):
        mid = (lo + hi) / 2
        if constraint(mid):
            lo = mid
        else:
            hi = mid
    return lo


def craft_malicious_update(benign: np.ndarray, spec: AdversarySpec,
                           rng: np.random.Generator) -> np.ndarray:
    """One malicious vector from the benign set (the attacker sees them all)."""
    mean = benign.mean(axis=0)
    kind = spec.value_attack
    if kind == "none":
        return mean.copy()
    if kind == "gaussian":
        return mean + rng.normal(scale=spec.value_param, size=mean.shape)
    if kind == "scale":
        return spec.value_param * mean
    if kind in ("minmax", "minsum"):
        norm = np.linalg.norm(mean)
        delta = -mean / norm if norm > 0 else np.zeros_like(mean)
        if kind == "minmax":
            budget = _max_pairwise_distance(benign)

            def ok(gamma):
                xm = mean + gamma * delta
                return float(np.linalg.norm(xm - benign, axis=1).max()) <= budget
        else:
            budget = float(
                (np.linalg.norm(benign[:, None, :] - benign[None, :, :], axis=-1) ** 2)
                .sum(axis=1).max())

            def ok(gamma):
                xm = mean + gamma * delta
                return float((np.linalg.norm(xm - benign, axis=1) ** 2).sum()) <= budget
        gamma = _binary_search_gamma(ok)
        return mean + gamma * delta
    if kind == "sign_skew":
        flip = int(np.ceil(spec.value_param * mean.shape[0]))
        out = mean.copy()
        out[:flip] = -out[:flip]
        return out
    raise AssertionError(kind)


def poison_updates(benign_updates, spec: AdversarySpec, cfg,
                   rng: np.random.Generator) -> np.ndarray:
    """Full N-user update set: benign users keep theirs, corrupted get crafted.

    `benign_updates` may carry rows for every user (corrupted rows are
    ignored) or only for the honest users in index order.
    """
    n = cfg.n_users
    benign_updates = np.asarray(benign_updates, dtype=np.float64)
    honest = spec.honest_users(n)
    out = np.zeros((n, benign_updates.shape[-1]))
    if benign_updates.shape[0] == n:
        for i in honest:
            out[i] = benign_updates[i]
    else:
        for row, i in enumerate(honest):
            out[i] = benign_updates[row]
    benign_rows = out[honest]
    for i in sorted(spec.corrupted_set):
        out[i] = craft_malicious_update(benign_rows, spec, rng)
    return np.clip(out, -1 + 1e-6, 1 - 1e-6)


def round_behaviors(spec: AdversarySpec, cfg) -> dict:
    """Behavior overrides for every corrupted user."""
    out = {}
    n = cfg.n_users
    honest = spec.honest_users(n)
    for i in sorted(spec.corrupted_set):
        kind = spec.protocol_attack
        if kind == "none":
            out[i] = Behavior()
        elif kind == "bad_share":
            victim = honest[0] if honest else 0
            out[i] = Behavior(bad_share_victim=victim)
        elif kind == "bad_commit_pair":
            out[i] = Behavior(bad_commit=True)
        elif kind == "cheat_circuit":
            out[i] = Behavior(cheat_circuit=True)
        elif kind == "false_tag":
            # enough tags to trip the "tags more than T" rule
            targets = spec.false_tag_targets or tuple(honest[: cfg.threshold + 1])
            out[i] = Behavior(false_tags=tuple(targets))
        elif kind == "bad_sigma":
            out[i] = Behavior(bad_sigma=True)
        elif kind == "drop":
            out[i] = Behavior(drop_round=spec.drop_round)
    return out
