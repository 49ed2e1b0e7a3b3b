from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from ndm.errors import ParameterError, SpecError, StateError
from ndm.network import (Microstimulation, NetworkSpec, Perturbation, TrialSettings,
                         apply_perturbation, build_network, cached_network, load_network, patch_origins,
                         require_traces, run_trial, save_network)
from ndm.retina import LgnDrive, compute_lgn_drive
from ndm.stimulus import generate_stimulus

from conftest import SMALL_SPEC, SMALL_STIMULUS

SCALE = {p: 100.0 for p in ("LGN_ON", "LGN_OFF", "V1_G1", "V1_G2", "MT_L", "MT_R", "LIP_A", "LIP_B", "LIP_I")}


@pytest.fixture(scope="module")
def net():
    return build_network(SMALL_SPEC)


@pytest.fixture(scope="module")
def drive():
    return compute_lgn_drive(generate_stimulus(replace(SMALL_STIMULUS, coherence=0.8, seed=3)))


def _edges(net, name):
    p = net.projections[name]
    return p.pre, p.post, p.weight


def test_population_layout(net):
    assert net.n == 2 * 100 + 2 * 25 + 2 * 4 + 2 * 20 + 30
    assert [net.indices(p).size for p in ("LGN", "V1", "MT", "LIP_E", "LIP")] == [200, 50, 8, 40, 70]
    with pytest.raises(SpecError):
        net.indices("V4")


def test_lgn_v1_pairing(small_spec):
    net = build_network(replace(small_spec, weight_cv=0.0))
    pre, post, _ = _edges(net, "LGN-V1")
    on0, off0 = net.populations["LGN_ON"][0], net.populations["LGN_OFF"][0]
    L, V = small_spec.lgn_side, small_spec.v1_side
    for grp, on_col in (("V1_G1", 0), ("V1_G2", 1)):
        lo, hi = net.populations[grp]
        for k in range(hi - lo):
            a, b = divmod(k, V)
            src = sorted(pre[post == lo + k].tolist())
            left, right = 2 * a * L + 2 * b, 2 * a * L + 2 * b + 1
            on = on0 + (left if on_col == 0 else right)
            off = off0 + (right if on_col == 0 else left)
            assert src == sorted([on, off])


def test_direction_wiring_is_segregated(net):
    def sources(proj, post_pop):
        pre, post, _ = _edges(net, proj)
        lo, hi = net.populations[post_pop]
        return {net.pop_of()[i] for i in pre[(post >= lo) & (post < hi)]}
    names = {k: i for i, k in enumerate(net.populations)}
    assert sources("V1-MT", "MT_L") == {names["V1_G1"]}
    assert sources("V1-MT", "MT_R") == {names["V1_G2"]}
    assert sources("MT-LIP", "LIP_A") == {names["MT_L"]}
    assert sources("MT-LIP", "LIP_B") == {names["MT_R"]}
    assert sources("MT-LIP", "LIP_I") == set()


def test_patches_cover_lattice():
    org = patch_origins(50, 20, 40)
    assert org[0] == 0 and org[-1] == 10 and np.all(np.diff(org) >= 0)
    assert list(patch_origins(5, 1, 3)) == [1]


def test_default_mt_lip_fraction_is_binomial():
    net = build_network(NetworkSpec(v1_mt_patch=5))
    pre, post, _ = _edges(net, "MT-LIP")
    lo, hi = net.populations["LIP_A"]
    per_post = np.bincount(post[(post >= lo) & (post < hi)] - lo, minlength=hi - lo)
    # weights <= 0 are dropped afterwards, so the realised count is Binomial(400, 0.5 * P(w > 0))
    p = 0.5 * stats.norm.sf(-2.0)
    sd = np.sqrt(400 * p * (1 - p))
    assert np.all(np.abs(per_post - 400 * p) <= 4 * sd)
    assert abs(per_post.mean() - 400 * p) < 3 * sd / np.sqrt(per_post.size)


def test_degenerate_sampling_gives_exact_means(small_spec):
    spec = replace(small_spec, weight_cv=0.0, mt_lip_fraction=1.0)
    net = build_network(spec)
    assert np.all(net.projections["LGN-V1"].weight == spec.g_lgn_v1)
    assert np.all(net.projections["MT-LIP"].weight == spec.g_mt_lip)
    assert net.projections["MT-LIP"].n_edges == 2 * 4 * 20
    pre, post, w = _edges(net, "LIP-EE-NMDA")
    a_lo, a_hi = net.populations["LIP_A"]
    same = (pre < a_hi) == (post < a_hi)
    assert np.allclose(w[same], 1.3 * spec.lip_ee_nmda) and np.allclose(w[~same], 0.7 * spec.lip_ee_nmda)
    assert not np.any(pre == post)


def test_recurrent_weights_follow_truncated_normal():
    spec = NetworkSpec(lgn_side=2, v1_side=1, mt_side=1, v1_mt_patch=1, n_lip_e=60, n_lip_i=10, seed=4)
    net = build_network(spec)
    pre, post, w = _edges(net, "LIP-EE-AMPA")
    a_hi = net.populations["LIP_A"][1]
    same = (pre < a_hi) == (post < a_hi)
    mean = 1.3 * spec.lip_ee_ampa
    dist = stats.truncnorm(a=(0 - mean) / (0.5 * mean), b=np.inf, loc=mean, scale=0.5 * mean)
    assert stats.kstest(w[same], dist.cdf).pvalue > 0.01
    assert np.all(w > 0)
    # kept fraction matches P(w > 0) = Phi(2)
    n_pairs = 2 * 60 * 59
    assert same.sum() / n_pairs == pytest.approx(stats.norm.cdf(2.0), abs=0.01)


def test_dale_truncation(net):
    for p in net.projections.values():
        assert np.all(p.weight > 0), p.name


def test_build_is_deterministic(small_spec):
    a, b = build_network(small_spec), build_network(small_spec)
    for k in a.projections:
        assert np.array_equal(a.projections[k].weight, b.projections[k].weight)
    c = build_network(replace(small_spec, seed=1))
    assert not np.array_equal(a.projections["LIP-IE"].weight, c.projections["LIP-IE"].weight)


def test_inconsistent_counts(small_spec):
    with pytest.raises(SpecError):
        build_network(replace(small_spec, v1_side=4))
    with pytest.raises(SpecError):
        build_network(replace(small_spec, v1_mt_patch=6))
    with pytest.raises(SpecError):
        build_network(replace(small_spec, mt_lip_fraction=1.5))


def test_mt_lip_fraction_doubles_input(small_spec):
    half = build_network(replace(small_spec, mt_side=5, v1_mt_patch=1, mt_lip_fraction=0.5, n_lip_e=100))
    full = build_network(replace(small_spec, mt_side=5, v1_mt_patch=1, mt_lip_fraction=1.0, n_lip_e=100))
    ratio = full.weights_into("MT-LIP", "LIP_A").sum() / half.weights_into("MT-LIP", "LIP_A").sum()
    assert ratio == pytest.approx(2.0, rel=0.1)


def test_spec_round_trip_and_hash(small_spec):
    d = small_spec.to_dict()
    assert NetworkSpec.from_dict(d) == small_spec
    assert NetworkSpec.from_dict(d).spec_hash() == small_spec.spec_hash()
    assert replace(small_spec, seed=9).spec_hash() != small_spec.spec_hash()
    with pytest.raises(SpecError):
        NetworkSpec.from_dict({**d, "bogus": 1})


# -- perturbations --------------------------------------------------------------------


@pytest.mark.parametrize("kind,target", [("DropNeurons", "MT"), ("DropConnections", "LIP-EE"),
                                         ("WeightNoise", "V1-MT"), ("CurrentNoise", "LGN")])
def test_zero_magnitude_is_identity(net, drive, kind, target):
    p = apply_perturbation(net, Perturbation(kind, target, 0.0, seed=3), input_scale=SCALE)
    a = run_trial(net, drive, seed=5, coherence=0.8)
    b = run_trial(p, drive, seed=5, coherence=0.8)
    assert a.record() == b.record()
    for name in a.rate_traces:
        assert np.array_equal(a.rate_traces[name], b.rate_traces[name])


def test_drop_neurons_nested_and_exact(net):
    masks = []
    for m in (0.3, 0.6, 0.9):
        p = apply_perturbation(net, Perturbation("DropNeurons", "V1", m, seed=1))
        dead = ~p.alive
        idx = net.indices("V1")
        assert dead.sum() == round(m * idx.size)
        assert set(np.nonzero(dead)[0]) <= set(idx)
        masks.append(dead)
    assert np.all(masks[0] <= masks[1]) and np.all(masks[1] <= masks[2])
    other = apply_perturbation(net, Perturbation("DropNeurons", "V1", 0.3, seed=2))
    assert not np.array_equal(other.alive, ~masks[0])


def test_drop_connections_spans_group(net):
    p = apply_perturbation(net, Perturbation("DropConnections", "LIP-EE", 0.5, seed=1))
    before = sum(net.projections[k].n_edges for k in ("LIP-EE-AMPA", "LIP-EE-NMDA"))
    after = sum(p.projections[k].n_edges for k in ("LIP-EE-AMPA", "LIP-EE-NMDA"))
    assert after == before - round(0.5 * before)
    assert p.projections["MT-LIP"] is net.projections["MT-LIP"]
    assert net.projections["LIP-EE-AMPA"].n_edges + net.projections["LIP-EE-NMDA"].n_edges == before


def test_weight_noise_scale(small_spec):
    net = build_network(replace(small_spec, n_lip_e=100, weight_cv=0.0))
    p = apply_perturbation(net, Perturbation("WeightNoise", "LIP-IE", 0.2, seed=1))
    w0 = net.projections["LIP-IE"].weight
    w1 = p.projections["LIP-IE"].weight
    assert w1.size == w0.size  # 0.2 sigma noise never crosses zero at 5 sd... almost surely
    assert np.std(w1 - w0[0]) == pytest.approx(0.2 * w0[0], rel=0.05)
    assert np.all(w1 > 0)


def test_current_noise_sigma(net):
    p = apply_perturbation(net, Perturbation("CurrentNoise", "MT", 1.5, seed=1), input_scale=SCALE)
    idx = net.indices("MT")
    assert np.all(p.current_noise_sigma[idx] == 150.0)
    assert p.current_noise_sigma.sum() == 150.0 * idx.size


def test_perturbation_validation():
    with pytest.raises(SpecError):
        Perturbation("DropNeurons", "V5", 0.1)
    with pytest.raises(SpecError):
        Perturbation("DropConnections", "LGN", 0.1)
    with pytest.raises(SpecError):
        Perturbation("Shuffle", "LGN", 0.1)
    with pytest.raises(ParameterError):
        Perturbation("DropNeurons", "LGN", 0.95)
    with pytest.raises(ParameterError):
        Perturbation("WeightNoise", "LGN-V1", 2.5)


def test_microstimulation_current(net):
    s = Microstimulation("MT_L", 40.0)
    cur = s.current(net)
    lo, hi = net.populations["MT_L"]
    assert np.all(cur[lo:hi] == 40.0) and cur.sum() == 40.0 * (hi - lo)
    with pytest.raises(SpecError):
        Microstimulation("MT_X", 10.0)
    with pytest.raises(ParameterError):
        Microstimulation("MT_L", -1.0)


# -- trials ---------------------------------------------------------------------------


def test_blank_stimulus_never_decides():
    res = run_trial(build_network(NetworkSpec()), LgnDrive.zeros(), seed=1, coherence=0.0)
    assert res.no_decision_flag
    assert res.decision_time == 2000.0
    assert set(res.rate_traces) >= {"LIP_A", "LIP_B", "MT_L"}
    assert len(res.rate_traces["LIP_A"]) == 200


def test_trial_is_deterministic(net, drive):
    a = run_trial(net, drive, seed=11, coherence=0.8, record_spikes="LIP")
    b = run_trial(net, drive, seed=11, coherence=0.8, record_spikes="LIP")
    assert a.record() == b.record()
    assert np.array_equal(a.spikes[0], b.spikes[0]) and np.array_equal(a.spikes[1], b.spikes[1])


def test_traces_stop_at_decision(net):
    drive = LgnDrive.zeros(10, 10)
    settings = TrialSettings(threshold_hz=0.5)  # any LIP activity counts as a decision
    res = run_trial(net, drive, seed=2, settings=settings, coherence=0.0)
    assert not res.no_decision_flag
    assert len(res.rate_traces["LIP_A"]) == int(np.ceil(res.decision_time / 10.0))
    full = run_trial(net, drive, seed=2, settings=replace(settings, stop_on_decision=False), coherence=0.0)
    assert len(full.rate_traces["LIP_A"]) == 200
    assert full.decision_time == res.decision_time


def test_lattice_mismatch(net):
    with pytest.raises(SpecError):
        run_trial(net, LgnDrive.zeros(100, 100))


def test_require_traces(net):
    res = run_trial(net, LgnDrive.zeros(10, 10), seed=1, settings=TrialSettings(record_traces=False))
    with pytest.raises(StateError):
        require_traces(res)


def test_snapshot_round_trip(tmp_path, net):
    p = apply_perturbation(net, Perturbation("DropNeurons", "LIP_I", 0.5, seed=1))
    save_network(p, tmp_path / "n.npz")
    back = load_network(tmp_path / "n.npz")
    assert back.spec == p.spec and back.perturbations == p.perturbations
    assert np.array_equal(back.alive, p.alive)
    for k in p.projections:
        assert np.array_equal(back.projections[k].weight, p.projections[k].weight)
    a = cached_network(SMALL_SPEC, tmp_path)
    b = cached_network(SMALL_SPEC, tmp_path)
    assert np.array_equal(a.projections["LIP-IE"].weight, b.projections["LIP-IE"].weight)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.0, 1.0), st.floats(0.0, 0.9))
def test_weights_positive_and_wiring_consistent(seed, cv, fraction):
    net = build_network(replace(SMALL_SPEC, seed=seed, weight_cv=cv, mt_lip_fraction=fraction))
    pop = net.pop_of()
    names = list(net.populations)
    for p in net.projections.values():
        assert np.all(p.weight > 0)
    pre, post, _ = _edges(net, "MT-LIP")
    assert np.all((pop[pre] == names.index("MT_L")) == (pop[post] == names.index("LIP_A")))
