import itertools
import math
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vistalign import infotheory as it


# ---------------------------------------------------------------------------
# brute-force oracle: walk every sequence with plain Python loops
# ---------------------------------------------------------------------------


def brute_joint(model, t):
    """{(z, x_1..x_t): prob} from explicit products."""
    out = {}
    Z, V = model.latent_size, model.vocab_size
    for z in range(Z):
        for seq in itertools.product(range(V), repeat=t):
            p = model.prior[z] * model.initial[z, seq[0]]
            for a, b in zip(seq, seq[1:]):
                p *= model.transition[z, a, b]
            out[(z,) + seq] = p
    return out


def marginal(joint, keyfn):
    m = defaultdict(float)
    for k, p in joint.items():
        m[keyfn(k)] += p
    return m


def H(dist):
    return -sum(p * math.log(p) for p in dist.values() if p > 0)


def brute_quantities(model, t):
    j = brute_joint(model, t)
    # I(x_t; z) from its definition
    pzx = marginal(j, lambda k: (k[0], k[-1]))
    pz = marginal(j, lambda k: k[0])
    px = marginal(j, lambda k: k[-1])
    i_vis = sum(p * math.log(p / (pz[z] * px[x])) for (z, x), p in pzx.items() if p > 0)
    # I(x_t; x_<t | z) from its definition
    pzp = marginal(j, lambda k: k[:-1])
    i_cond = sum(
        p * math.log(p * pz[k[0]] / (pzp[k[:-1]] * pzx[(k[0], k[-1])])) for k, p in j.items() if p > 0
    )
    # H(x_t | x_<t)
    text = marginal(j, lambda k: k[1:])
    pre = marginal(text, lambda k: k[:-1])
    h_step = -sum(p * math.log(p / pre[k[:-1]]) for k, p in text.items() if p > 0)
    return i_vis, i_cond, h_step


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


class TestEnumerate:
    def test_single_latent_single_step(self):
        model = it.DiscreteSequenceModel(np.ones(1), [[0.2, 0.3, 0.5]], np.full((1, 3, 3), 1 / 3), 1)
        j = it.enumerate_joint(model, 1)
        np.testing.assert_array_equal(j.tables[1][0], [0.2, 0.3, 0.5])

    def test_deterministic_chain_single_atom(self):
        trans = np.zeros((1, 3, 3))
        trans[0, [0, 1, 2], [1, 2, 0]] = 1.0
        model = it.DiscreteSequenceModel(np.ones(1), [[1.0, 0.0, 0.0]], trans, 4)
        table = it.enumerate_joint(model).tables[4]
        assert np.count_nonzero(table) == 1
        assert table[0, 0, 1, 2, 0] == 1.0

    def test_normalized(self, rng):
        model = it.random_model(rng, 2, 3, 3)
        for tab in it.enumerate_joint(model).tables:
            assert abs(tab.sum() - 1.0) < 1e-12

    def test_marginal_consistency(self, rng):
        model = it.random_model(rng, 3, 3, 4)
        j = it.enumerate_joint(model)
        for t in range(1, 4):
            np.testing.assert_allclose(j.tables[t + 1].sum(axis=-1), j.tables[t], atol=1e-15)

    def test_matches_brute_force(self, rng):
        model = it.random_model(rng, 2, 3, 3)
        table = it.enumerate_joint(model).tables[3]
        for k, p in brute_joint(model, 3).items():
            assert table[k] == pytest.approx(p, rel=1e-14)

    def test_budget(self):
        model = it.DiscreteSequenceModel(np.ones(1), [np.full(10, 0.1)], np.full((1, 10, 10), 0.1), 8)
        with pytest.raises(it.CapacityError):
            it.enumerate_joint(model)


class TestEntropyAndMI:
    def test_uniform(self):
        assert it.entropy(np.full(4, 0.25)) == pytest.approx(math.log(4), abs=1e-15)

    def test_point_mass(self):
        assert it.entropy([0.0, 1.0, 0.0]) == 0.0

    def test_fair_coin(self):
        assert it.entropy([0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            it.entropy([1.5, -0.5])

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            it.entropy([0.5, 0.4])

    def test_independent_bits(self):
        assert it.mutual_information(np.full((2, 2), 0.25)) == pytest.approx(0.0, abs=1e-15)

    def test_copied_bit(self):
        assert it.mutual_information(np.diag([0.5, 0.5])) == pytest.approx(math.log(2), abs=1e-15)

    def test_against_double_sum(self, rng):
        j = rng.random((3, 3))
        j /= j.sum()
        a, b = j.sum(1), j.sum(0)
        direct = sum(j[i, k] * math.log(j[i, k] / (a[i] * b[k])) for i in range(3) for k in range(3))
        assert it.mutual_information(j) == pytest.approx(direct, abs=1e-14)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 5), st.integers(2, 5))
    def test_nonnegative_and_bounded(self, seed, na, nb):
        j = np.random.default_rng(seed).dirichlet(np.full(na * nb, 0.3)).reshape(na, nb)
        mi = it.mutual_information(j)
        assert -1e-12 <= mi <= min(math.log(na), math.log(nb)) + 1e-12


class TestPrefixEntropy:
    def test_iid_uniform_bits(self):
        model = it.DiscreteSequenceModel(np.ones(1), [[0.5, 0.5]], np.full((1, 2, 2), 0.5), 6)
        pe = it.prefix_entropy_curve(model)
        np.testing.assert_allclose(pe.H_prefix, np.arange(6) * math.log(2), atol=1e-14)
        assert pe.nondegenerate

    def test_deterministic_flagged(self):
        trans = np.zeros((1, 2, 2))
        trans[0, 0, 1] = trans[0, 1, 0] = 1.0
        model = it.DiscreteSequenceModel(np.ones(1), [[0.5, 0.5]], trans, 4)
        pe = it.prefix_entropy_curve(model)
        assert pe.delta_H == 0.0
        assert not pe.nondegenerate

    def test_step_entropy_against_brute_force(self, rng):
        model = it.random_model(rng, 2, 3, 4)
        pe = it.prefix_entropy_curve(model)
        for t in range(1, 5):
            assert pe.H_step[t - 1] == pytest.approx(brute_quantities(model, t)[2], abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_linear_growth(self, seed):
        model = it.random_model(np.random.default_rng(seed), 3, 4, 6)
        pe = it.prefix_entropy_curve(model)
        assert pe.nondegenerate
        assert pe.chain_rule_err <= 1e-10
        for t in range(1, 7):
            assert pe.H_prefix[t - 1] >= (t - 1) * pe.delta_H - 1e-9


class TestVisualMI:
    def test_latent_independent(self, rng):
        init = rng.dirichlet(np.ones(3))
        trans = rng.dirichlet(np.ones(3), size=3)
        model = it.DiscreteSequenceModel([0.3, 0.7], [init, init], [trans, trans], 5)
        np.testing.assert_allclose(it.visual_mi_curve(model), 0.0, atol=1e-14)

    def test_copy_channel_first_token(self):
        curve = it.visual_mi_curve(it.builtin_model("copy-channel"))
        assert curve[0] == pytest.approx(math.log(2), abs=1e-15)

    def test_against_marginalization(self, rng):
        model = it.random_model(rng, 3, 3, 4)
        curve = it.visual_mi_curve(model)
        for t in range(1, 5):
            assert curve[t - 1] == pytest.approx(brute_quantities(model, t)[0], abs=1e-13)

    @pytest.mark.parametrize("seed", range(5))
    def test_bounded_by_log_vocab(self, seed):
        model = it.random_model(np.random.default_rng(seed), 3, 4, 5, concentration=0.2)
        curve = it.visual_mi_curve(model)
        assert np.all(curve >= -1e-12)
        assert np.all(curve <= math.log(4) + 1e-9)


class TestAlignmentRatio:
    def test_conditional_mi_against_brute_force(self, rng):
        model = it.random_model(rng, 2, 3, 4)
        curve = it.alignment_ratio_curve(model)
        for t in range(1, 5):
            assert curve.I_cond[t - 1] == pytest.approx(brute_quantities(model, t)[1], abs=1e-13)

    def test_mi_chain_rule(self, rng):
        for _ in range(5):
            model = it.random_model(rng, 3, 3, 5)
            assert it.alignment_ratio_curve(model).mi_chain_err <= 1e-10

    def test_memoryless_ratio_constant(self):
        curve = it.alignment_ratio_curve(it.builtin_model("copy-channel"))
        np.testing.assert_allclose(curve.I_cond, 0.0, atol=1e-14)
        np.testing.assert_allclose(curve.ratio, 1.0, atol=1e-12)
        # the growth premise fails: conditional information never grows
        assert curve.I_cond.max() < 1e-12

    def test_strong_memory_ratio_decays(self):
        curve = it.alignment_ratio_curve(it.builtin_model("strong-memory"))
        assert np.all(np.diff(curve.ratio[1:]) < 0)
        assert curve.ratio[7] < curve.ratio[1] / 2

    def test_no_visual_information(self, rng):
        init = rng.dirichlet(np.ones(3))
        trans = rng.dirichlet(np.ones(3), size=3)
        model = it.DiscreteSequenceModel([0.5, 0.5], [init, init], [trans, trans], 4)
        curve = it.alignment_ratio_curve(model)
        np.testing.assert_allclose(curve.ratio, 0.0, atol=1e-12)
        # t=1 has neither visual nor textual information
        assert curve.ratio_flagged[0]

    def test_ratio_equals_rho_at_zero_boost(self):
        curve = it.alignment_ratio_curve(it.builtin_model("strong-memory"), lambdas=np.zeros(8))
        np.testing.assert_allclose(curve.rho, curve.ratio, atol=1e-12)

    def test_envelope(self):
        env = it.envelope([1, 10], delta_H=0.5, C=math.log(4), epsilon=0.01)
        assert math.isnan(env[0])
        assert env[1] == pytest.approx(math.log(4) / (5 - 0.01 - math.log(4)))


class TestRho:
    def test_symmetric(self):
        assert it.rho_vista(1.0, 1.0, 0.0) == 0.5

    def test_unit_boost(self):
        assert it.rho_vista(1.0, 1.0, 1.0) == pytest.approx(2 / 3, abs=1e-15)

    def test_large_boost(self):
        assert it.rho_vista(1.0, 1.0, 1e15) == pytest.approx(1.0, abs=1e-14)

    def test_undefined(self):
        with pytest.raises(ValueError):
            it.rho_vista(0.0, 0.0, 1.0)

    def test_bound_example(self):
        r = it.rho_lower_bound_check(1.0, 2.0, 1.0)
        assert r.rho == 0.5
        assert r.bound == pytest.approx(1 / 3, abs=1e-15)
        assert r.holds

    def test_bound_limit(self):
        r = it.rho_lower_bound_check(1.0, 2.0, 1e14)
        assert r.rho == pytest.approx(1.0, abs=1e-12) and r.bound == pytest.approx(1.0, abs=1e-12)
        assert r.holds

    def test_bound_without_text_information(self):
        r = it.rho_lower_bound_check(0.7, 0.0, 0.3)
        assert r.rho == 1.0 and r.bound == 1.0 and r.holds

    def test_bound_rejects_bad_input(self):
        with pytest.raises(ValueError):
            it.rho_lower_bound_check(1.0, 1.0, 0.0)
        with pytest.raises(ValueError):
            it.rho_lower_bound_check(0.0, 1.0, 1.0)

    def test_lambda_fixed_point(self):
        assert it.lambda_from_rho(0.5, 1.0, 1.0) == 0.0

    def test_lambda_inverts_rho(self):
        assert it.lambda_from_rho(2 / 3, 1.0, 1.0) == pytest.approx(1.0, abs=1e-14)

    def test_lambda_no_boost_needed(self):
        assert it.lambda_from_rho(0.2, 1.0, 1.0) < 0

    def test_lambda_rejects_target(self):
        for bad in (0.0, 1.0, 1.5):
            with pytest.raises(ValueError):
                it.lambda_from_rho(bad, 1.0, 1.0)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.01, 0.99), st.floats(0.01, 2.0), st.floats(0.01, 5.0))
    def test_round_trip(self, rho, iv, ic):
        lam = it.lambda_from_rho(rho, iv, ic)
        # (1 + lam) > 0 always, so the share formula applies even for negative lam
        boosted = (1 + lam) * iv
        assert boosted / (boosted + ic) == pytest.approx(rho, abs=1e-12)
        if lam >= 0:
            assert it.rho_vista(iv, ic, lam) == pytest.approx(rho, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.01, 2.0), st.floats(0.01, 5.0), st.floats(0.0, 50.0), st.floats(1e-3, 10.0))
    def test_monotone_in_boost(self, iv, ic, lam, dlam):
        assert it.rho_vista(iv, ic, lam + dlam) > it.rho_vista(iv, ic, lam)


class TestModelFiles:
    def test_round_trip(self, rng):
        model = it.random_model(rng, 2, 3, 5)
        back = it.parse_sequence_model(it.format_sequence_model(model))
        np.testing.assert_array_equal(back.prior, model.prior)
        np.testing.assert_array_equal(back.initial, model.initial)
        np.testing.assert_array_equal(back.transition, model.transition)
        assert back.horizon == 5

    def test_documented_example(self):
        text = """
[sequence_model]
latent_size = 2
vocab_size = 2
prior = 0.5 0.5
initial.0 = 1 0
initial.1 = 0 1
transition.0 = 0.9 0.1 ; 0.9 0.1
transition.1 = 0.1 0.9 ; 0.1 0.9
"""
        model = it.parse_sequence_model(text)
        assert model.horizon == 8
        curve = it.visual_mi_curve(model, 1)
        assert curve[0] == pytest.approx(math.log(2))

    @pytest.mark.parametrize("text", [
        "[sequence_model]\nlatent_size = 1\nvocab_size = 2\nprior = 1\ninitial.0 = 0.5 0.5\n",
        "[sequence_model]\nlatent_size = 1\nvocab_size = 2\nprior = 1\ninitial.0 = 0.5 0.6\n"
        "transition.0 = 0.5 0.5 ; 0.5 0.5\n",
        "[sequence_model]\nlatent_size = 1\nvocab_size = 2\nprior = 1\ninitial.0 = 0.5 0.5\n"
        "transition.0 = 0.5 0.5 ; 0.5 0.5\nbogus = 1\n",
        "[other]\nx = 1\n",
        "not ini at all",
        "[sequence_model]\nlatent_size = 1\nvocab_size = 3\nprior = 1\ninitial.0 = 0.5 0.5\n"
        "transition.0 = 0.5 0.5 ; 0.5 0.5\n",
    ])
    def test_rejects_bad_files(self, text):
        with pytest.raises(it.ModelFormatError):
            it.parse_sequence_model(text)

    def test_builtins_valid(self):
        for name in it.BUILTINS:
            model = it.builtin_model(name)
            assert model.name == name
        with pytest.raises(KeyError):
            it.builtin_model("nope")
