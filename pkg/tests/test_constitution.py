"""Sufficiency evaluation: component arithmetic, AUC, SI, leaky detection."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoloop.errors import ValidationError
from geoloop import constitution as con
from geoloop.policy import ToyPolicy, Vocab, gold_items, make_toy_task, mle_pretrain, principles_from_patterns

# (bits, auc, margin_pos, margin_neg) -> (mi_eff, si, drop_pct) published rows
MEASURED_ROWS = [
    ("1b_baseline", 0.123, 0.074, 6.39, 3.97, 2.42, 0.715, 8.2),
    ("1b_rewritten", 0.123, 0.272, 6.39, -0.045, 6.44, 1.959, 8.2),
    ("4b_baseline", 0.0575, 0.148, 6.48, 4.42, 2.06, 0.582, 3.9),
    ("4b_rewritten", 0.0575, 0.356, 6.48, -0.022, 6.50, 1.956, 3.9),
]


class TestDeltaNll:
    def test_known_drops(self):
        out = con.delta_nll(0.123, 0.0)
        assert (1 - out["perplexity_ratio"]) * 100 == pytest.approx(8.2, abs=0.1)
        out = con.delta_nll(0.0575, 0.0)
        assert (1 - out["perplexity_ratio"]) * 100 == pytest.approx(3.9, abs=0.1)

    def test_zero_delta(self):
        assert con.delta_nll(1.0, 1.0)["perplexity_ratio"] == 1.0

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            con.delta_nll(math.inf, 0.0)


class TestMannWhitneyAuc:
    def test_full_separation(self):
        assert con.mann_whitney_auc([2, 3], [0, 1]) == 1.0

    def test_all_ties(self):
        assert con.mann_whitney_auc([1], [1]) == 0.5

    def test_interleaved(self):
        # pairs: (1 < 2) and (3 > 2) -> 0.5
        assert con.mann_whitney_auc([1, 3], [2]) == 0.5

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            con.mann_whitney_auc([], [1.0])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 10), st.integers(1, 10))
    def test_swap_complement(self, seed, n_pos, n_neg):
        rng = np.random.default_rng(seed)
        pos = rng.normal(0, 1, n_pos)
        neg = rng.normal(0.5, 1, n_neg)
        auc = con.mann_whitney_auc(pos, neg)
        swapped = con.mann_whitney_auc(neg, pos)
        assert auc + swapped == pytest.approx(1.0)
        assert 0.0 <= auc <= 1.0


class TestMiEffective:
    def test_measured_rows(self):
        for _, _, _, mp, mn, expect, _, _ in MEASURED_ROWS:
            assert con.mi_effective(mp, mn) == pytest.approx(expect, abs=0.01)

    def test_equal_margins(self):
        assert con.mi_effective(3.3, 3.3) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-10, 10), st.floats(-10, 10))
    def test_antisymmetric(self, a, b):
        assert con.mi_effective(a, b) == -con.mi_effective(b, a)


class TestSufficiencyIndex:
    def test_measured_si_values(self):
        for name, bits, auc, mp, mn, _, si_expect, _ in MEASURED_ROWS:
            mie = con.mi_effective(mp, mn)
            si = con.sufficiency_index(bits, mie, auc)
            assert si == pytest.approx(si_expect, abs=0.01), name

    def test_unit_zscores_combine_to_one(self):
        # Cohort where the last element sits exactly one MAD above the median
        # in every component.
        bits = [0.0, 1.0, 2.0]
        mi_eff = [0.0, 1.0, 2.0]
        auc = [0.0, 0.5, 1.0]  # separation -1, 0, 1
        out = con.sufficiency_index(bits, mi_eff, auc, mode="zscored")
        assert out[2] == pytest.approx(0.6 + 0.3 + 0.1)

    def test_linear_in_components(self):
        base = con.sufficiency_index(0.1, 2.0, 0.3)
        doubled_w = con.sufficiency_index(0.1, 2.0, 0.3, weights=(0.6, 0.6, 0.1))
        assert doubled_w - base == pytest.approx(0.3 * 2.0)

    def test_zscored_needs_cohort(self):
        with pytest.raises(ValidationError):
            con.sufficiency_index([0.1], [1.0], [0.5], mode="zscored")

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-1, 1), st.floats(-8, 8), st.floats(0, 1), st.floats(0.1, 3))
    def test_scaling_component(self, bits, mie, auc, factor):
        si1 = con.sufficiency_index(bits, mie, auc)
        si2 = con.sufficiency_index(bits, mie * factor, auc)
        assert si2 - si1 == pytest.approx(0.3 * mie * (factor - 1), abs=1e-9)


class TestLeakyFlags:
    def test_no_flags(self):
        out = con.leaky_negative_flags({"n0": -0.1, "n1": -0.02})
        assert out["count"] == 0

    def test_positive_delta_flagged(self):
        out = con.leaky_negative_flags({"n0": -0.1, "n1": 0.05})
        assert out["flagged_ids"] == ["n1"]

    def test_count_matches_sign(self):
        rng = np.random.default_rng(0)
        deltas = {f"n{i}": float(v) for i, v in enumerate(rng.normal(0, 1, 20))}
        out = con.leaky_negative_flags(deltas)
        assert out["count"] == sum(1 for v in deltas.values() if v > 0)


class TestPrincipleFiles:
    def test_parse_round_trip(self, tmp_path):
        path = tmp_path / "set.txt"
        path.write_text("name: demo\npositives:\n- 4 9 4 9\n- 5 10 5 10\n"
                        "negatives:\n- some free text negative\n")
        pset = con.parse_principle_file(path)
        assert pset.name == "demo"
        assert pset.positives[0].tokens == (4, 9, 4, 9)
        assert pset.negatives[0].tokens == ()
        out = tmp_path / "copy.txt"
        con.write_principle_file(pset, out)
        again = con.parse_principle_file(out)
        assert again.positives[0].text == pset.positives[0].text

    def test_no_positives_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("negatives:\n- x\n")
        with pytest.raises(ValidationError):
            con.parse_principle_file(path)

    def test_item_outside_section_names_line(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("- floating item\n")
        with pytest.raises(ValidationError) as err:
            con.parse_principle_file(path)
        assert "floating item" in str(err.value)


class TestReportFromComponents:
    def test_replay_reproduces_measured_rows(self):
        for name, bits, auc, mp, mn, mi_expect, si_expect, drop in MEASURED_ROWS:
            report = con.report_from_components(name, bits, auc, mp, mn)
            assert report.mi_effective == pytest.approx(mi_expect, abs=0.01)
            assert report.si == pytest.approx(si_expect, abs=0.01)
            assert (1 - report.perplexity_ratio) * 100 == pytest.approx(drop, abs=0.1)


def principle_aware_policy(task, seed=0, epochs=150):
    policy = ToyPolicy(task.vocab)
    policy.init_params(seed)
    mle_pretrain(policy, gold_items(task), epochs, 0.5)
    return policy


def toy_set(vocab, negatives):
    positives = [("pos0", (4, 9, 4, 9)), ("pos1", (5, 10, 5, 10)),
                 ("pos2", (4, 10, 4, 10)), ("pos3", (5, 9, 5, 9))]
    pos = tuple(con.Principle(pid, " ".join(map(str, toks)), toks)
                for pid, toks in positives)
    neg = tuple(con.Principle(f"neg{i}", " ".join(map(str, toks)), toks)
                for i, toks in enumerate(negatives))
    return pos, neg


@pytest.fixture(scope="module")
def setup():
    vocab = Vocab()
    patterns = [("pos0", (4, 9, 4, 9)), ("pos1", (5, 10, 5, 10)),
                ("pos2", (4, 10, 4, 10)), ("pos3", (5, 9, 5, 9))]
    principles = principles_from_patterns(vocab, patterns)
    task = make_toy_task(vocab, n_items=32, prompt_len=2, seed=0,
                         principles=principles)
    policy = principle_aware_policy(task, seed=0)
    return vocab, task, policy


class TestEvaluatePrincipleSet:
    def test_identical_pools_symmetric(self, setup):
        vocab, task, policy = setup
        pos, _ = toy_set(vocab, [])
        # negatives identical to positives (fresh ids)
        neg = tuple(con.Principle(f"neg{i}", p.text, p.tokens)
                    for i, p in enumerate(pos))
        pset = con.PrincipleSet("mirror", pos, neg)
        report = con.evaluate_principle_set(policy, task, pset, k=2, seed=0)
        assert report.mi_effective == pytest.approx(0.0, abs=1e-9)
        assert report.auc == pytest.approx(0.5, abs=0.05)

    def test_high_si_beats_leaky_variant(self, setup):
        vocab, task, policy = setup
        pos, neg_clean = toy_set(vocab, [(5, 10, 5, 5), (4, 9, 9, 9),
                                         (5, 9, 9, 9), (4, 10, 10, 10)])
        _, neg_leaky = toy_set(vocab, [(4, 9, 4, 5), (5, 10, 5, 4),
                                       (4, 10, 4, 5), (5, 9, 5, 10)])
        high = con.evaluate_principle_set(
            policy, task, con.PrincipleSet("high", pos, neg_clean), k=2, seed=0)
        low = con.evaluate_principle_set(
            policy, task, con.PrincipleSet("low", pos, neg_leaky), k=2, seed=0)
        assert high.si > low.si
        assert high.mi_effective > low.mi_effective
        assert high.delta_nll_median == pytest.approx(low.delta_nll_median, abs=1e-9)

    def test_leaky_negatives_flagged_more(self, setup):
        vocab, task, policy = setup
        pos, neg_leaky = toy_set(vocab, [(4, 9, 4, 5), (5, 10, 5, 4),
                                         (4, 10, 4, 5), (5, 9, 5, 10)])
        report = con.evaluate_principle_set(
            policy, task, con.PrincipleSet("low", pos, neg_leaky), k=2, seed=0)
        assert report.leaky["count"] >= 1

    def test_deterministic(self, setup):
        vocab, task, policy = setup
        pos, neg = toy_set(vocab, [(5, 10, 5, 5), (4, 9, 9, 9),
                                   (5, 9, 9, 9), (4, 10, 10, 10)])
        pset = con.PrincipleSet("high", pos, neg)
        r1 = con.evaluate_principle_set(policy, task, pset, k=2, seed=7)
        r2 = con.evaluate_principle_set(policy, task, pset, k=2, seed=7)
        assert r1 == r2


class TestExternalScorePath:
    def test_matrix_driven_report(self):
        from geoloop.mi import ScoreMatrix
        rng = np.random.default_rng(0)
        n, m = 12, 4
        base = rng.normal(-1.5, 0.1, (n, m))
        pos = base.copy()
        for i in range(n):
            pos[i, i % m] += 2.0  # strong diagonal binding
        neg = rng.normal(-1.5, 0.1, (n, m))
        nll_rows = [(2.0, 1.8)] * n  # delta = 0.2 bits/token
        report = con.evaluate_from_score_files(
            "external", ScoreMatrix(pos), ScoreMatrix(neg), nll_rows, k=2)
        assert report.delta_nll_median == pytest.approx(0.2)
        assert report.mi_diag_margin_pos > 1.0
        assert abs(report.mi_diag_margin_neg) < 0.5
        assert report.si > 0.0
