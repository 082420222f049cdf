import numpy as np
import pytest

from srafl import adversary, protocol, robust
from srafl.adversary import (
    AdversarySpec,
    craft_malicious_update,
    poison_updates,
    round_behaviors,
    synthetic_benign_updates,
)
from srafl.fields import quantize, substream
from srafl.protocol import make_config, run_iteration


def test_spec_validates_attack_names():
    with pytest.raises(ValueError):
        AdversarySpec(value_attack="nope")
    with pytest.raises(ValueError):
        AdversarySpec(protocol_attack="nope")


def test_scale_identity_returns_mean(rng):
    benign = rng.uniform(-0.5, 0.5, (5, 6))
    spec = AdversarySpec(corrupted=(0,), value_attack="scale", value_param=1.0)
    out = craft_malicious_update(benign, spec, rng)
    assert np.allclose(out, benign.mean(axis=0))


def test_minmax_degenerate_single_benign(rng):
    benign = rng.uniform(-0.5, 0.5, (1, 6))
    spec = AdversarySpec(corrupted=(0,), value_attack="minmax")
    out = craft_malicious_update(benign, spec, rng)
    assert np.allclose(out, benign[0])  # pairwise max distance 0 forces gamma 0


def test_minmax_constraint_tight(rng):
    benign = rng.uniform(-0.5, 0.5, (5, 8))
    spec = AdversarySpec(corrupted=(0,), value_attack="minmax")
    out = craft_malicious_update(benign, spec, rng)
    budget = np.linalg.norm(benign[:, None, :] - benign[None, :, :], axis=-1).max()
    worst = np.linalg.norm(out - benign, axis=1).max()
    assert worst <= budget * (1 + 1e-9)
    # gamma is maximal: nudging further breaks the constraint
    mean = benign.mean(axis=0)
    delta = -mean / np.linalg.norm(mean)
    gamma = float(np.linalg.norm(out - mean))
    bumped = mean + (gamma * 1.01 + 1e-6) * delta
    assert np.linalg.norm(bumped - benign, axis=1).max() > budget
    assert abs(worst - budget) / budget <= 1e-6 or gamma == 0.0


def test_minsum_constraint_holds(rng):
    benign = rng.uniform(-0.5, 0.5, (6, 8))
    spec = AdversarySpec(corrupted=(0,), value_attack="minsum")
    out = craft_malicious_update(benign, spec, rng)
    budget = (np.linalg.norm(benign[:, None, :] - benign[None, :, :], axis=-1) ** 2
              ).sum(axis=1).max()
    got = (np.linalg.norm(out - benign, axis=1) ** 2).sum()
    assert got <= budget * (1 + 1e-9)


def test_gaussian_attack_centred_on_mean(rng):
    benign = rng.uniform(-0.5, 0.5, (5, 2000))
    spec = AdversarySpec(corrupted=(0,), value_attack="gaussian", value_param=0.05)
    out = craft_malicious_update(benign, spec, rng)
    err = out - benign.mean(axis=0)
    assert abs(err.std() - 0.05) < 0.01


def test_sign_skew_flips_requested_fraction(rng):
    benign = rng.uniform(0.1, 0.5, (5, 10))  # all positive coordinates
    spec = AdversarySpec(corrupted=(0,), value_attack="sign_skew", value_param=0.5)
    out = craft_malicious_update(benign, spec, rng)
    mean = benign.mean(axis=0)
    assert np.all(out[:5] == -mean[:5])
    assert np.all(out[5:] == mean[5:])


def test_poison_updates_preserves_honest_rows(rng):
    cfg = make_config(6, 8, threshold=1, partitions=3)
    benign = rng.uniform(-0.5, 0.5, (6, 8))
    spec = AdversarySpec(corrupted=(2, 4), value_attack="scale", value_param=-10.0)
    full = poison_updates(benign, spec, cfg, rng)
    for i in (0, 1, 3, 5):
        assert np.allclose(full[i], np.clip(benign[i], -1 + 1e-6, 1 - 1e-6))
    assert not np.allclose(full[2], benign[2])


def test_round_behaviors_mapping():
    cfg = make_config(10, 8, threshold=3, partitions=4)
    spec = AdversarySpec(corrupted=(1, 5), protocol_attack="false_tag")
    beh = round_behaviors(spec, cfg)
    assert len(beh[1].false_tags) == cfg.threshold + 1
    assert all(v not in (1, 5) for v in beh[1].false_tags)
    spec2 = AdversarySpec(corrupted=(3,), protocol_attack="bad_share")
    beh2 = round_behaviors(spec2, cfg)
    assert beh2[3].bad_share_victim == 0


def test_synthetic_updates_geometry(rng):
    ups, g = synthetic_benign_updates(7, 32, rng)
    assert abs(np.linalg.norm(g) - 0.5) < 1e-9
    assert np.all(np.abs(ups) < 1)
    # mean of 7 draws with std 0.1 noise: error norm ~ 0.1*sqrt(32/7) ~ 0.21
    assert np.linalg.norm(ups.mean(axis=0) - g) < 0.45


def test_rlr_skew_resistance(rng):
    # 30% full sign skew, rlr-orig mode: the effective aggregate sign agrees
    # with the benign majority wherever benign signs are unanimous
    from srafl.fields import default_field
    from srafl.robust import rlr_mask, sign_bits

    fp = default_field()
    agree, total = 0, 0
    for trial in range(20):
        n, n_bad, d = 10, 3, 64
        ups, _ = synthetic_benign_updates(n - n_bad, d, rng)
        mean = ups.mean(axis=0)
        bad = -mean
        all_ups = np.vstack([ups, np.tile(bad, (n_bad, 1))])
        quant = np.stack([quantize(np.clip(u, -1 + 1e-6, 1 - 1e-6), fp,
                                   substream(trial, "q", i))
                          for i, u in enumerate(all_ups)])
        signs = np.stack([sign_bits(row, fp) for row in quant])
        unanimous = (signs[: n - n_bad].sum(axis=0) % (n - n_bad)) == 0
        s = signs.sum(axis=0)
        mask = rlr_mask(s, n, 3, mode="rlr-orig")
        total_field = quant.sum(axis=0) % fp.q
        eff_sign = np.sign(fp.centered((mask % fp.q) * total_field % fp.q))
        benign_majority = np.where(signs[: n - n_bad].sum(axis=0) * 2 >= (n - n_bad), 1, -1)
        sel = unanimous & (np.abs(fp.centered(total_field)) > 0)
        agree += int((eff_sign[sel] == benign_majority[sel]).sum())
        total += int(sel.sum())
    assert agree / total >= 0.99
