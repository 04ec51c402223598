import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from outfitrec import coldstart as cs
from outfitrec.encoder import encode_many, score_batch
from outfitrec.errors import ConfigError, DataError


class TestSimilarity:
    def test_parallel_outfit(self, tiny_model, tiny_world):
        outfit = tiny_world.outfits[0]
        m = tiny_model.copy()
        m.tensors["user.emb"][2] = encode_many([outfit], tiny_world.features, m)[0]
        assert cs.user_similarity(cs.ColdProfile(99, [outfit]), 2, m, tiny_world.features) == pytest.approx(1.0, abs=1e-6)

    def test_mean_of_scores(self, tiny_model, tiny_world):
        prof = cs.ColdProfile(99, tiny_world.outfits[:2])
        both = score_batch([1], prof.outfits, tiny_world.features, tiny_model)[0]
        s = cs.user_similarity(prof, 1, tiny_model, tiny_world.features)
        assert s == pytest.approx(both.mean(), abs=1e-7)
        assert -1 <= s <= 1
        sims = cs.all_similarities(prof, tiny_model, tiny_world.features)
        assert sims[1] == pytest.approx(s, abs=1e-7)

    def test_empty_profile(self):
        with pytest.raises(DataError):
            cs.ColdProfile(1, [])


class TestNeighborhood:
    def test_fallback_to_argmax(self):
        assert cs.neighborhood({0: -0.3, 1: -0.1, 2: -0.5}, 0.0) == [1]

    def test_everyone_above(self):
        assert cs.neighborhood([0.1, 0.2, 0.3], 0.0) == [0, 1, 2]

    def test_tie_goes_to_lowest_id(self):
        assert cs.neighborhood({5: -0.2, 3: -0.2, 9: -0.4}, 0.0) == [3]

    def test_delta_is_exclusive(self):
        assert cs.neighborhood([0.0, 0.5], 0.0) == [1]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=20), st.floats(-1.5, 1.5))
    def test_never_empty(self, sims, delta):
        n = cs.neighborhood(sims, delta)
        assert n and int(np.argmax(sims)) in n


class TestAggregation:
    def test_avg_examples(self):
        assert cs.aggregate_avg([[0.7]])[0] == 0.7
        assert cs.aggregate_avg([[0.2], [0.6]])[0] == pytest.approx(0.4)

    def test_weights_sum_to_one(self):
        w = cs.wavg_weights([0.1, 0.5, -0.3, 0.9], 0.2)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_equal_similarities_match_avg(self):
        scores = np.array([[0.1, -0.4], [0.5, 0.3], [0.9, 0.0]])
        np.testing.assert_array_equal(cs.aggregate_wavg([0.3] * 3, scores, 0.2), cs.aggregate_avg(scores))

    def test_high_temperature_approaches_avg(self):
        scores = np.array([[0.1], [0.5], [0.9]])
        gap = abs(cs.aggregate_wavg([0.9, -0.2, 0.4], scores, 1e4) - cs.aggregate_avg(scores))[0]
        assert gap < 1e-3

    def test_single_neighbor(self):
        assert cs.aggregate_wavg([0.4], [[0.37]], 0.2)[0] == cs.aggregate_avg([[0.37]])[0]

    def test_monotone_in_neighbor_score(self):
        base = np.array([[0.1], [0.5], [0.2]])
        up = base.copy()
        up[1, 0] += 0.05
        sims = [0.3, 0.6, 0.1]
        assert cs.aggregate_avg(up)[0] > cs.aggregate_avg(base)[0]
        assert cs.aggregate_wavg(sims, up, 0.2)[0] > cs.aggregate_wavg(sims, base, 0.2)[0]

    def test_low_similarity_neighbor_gets_small_weight(self):
        sims, scores = [0.8, 0.6], np.array([[0.5], [0.3]])
        before = cs.aggregate_wavg(sims, scores, 0.01)[0]
        after = cs.aggregate_wavg(sims + [0.2], np.vstack([scores, [[-0.9]]]), 0.01)[0]
        w_new = cs.wavg_weights(sims + [0.2], 0.01)[-1]
        assert w_new < 1 / 3
        assert after == pytest.approx((1 - w_new) * before + w_new * -0.9, abs=1e-12)

    def test_bad_temperature(self):
        with pytest.raises(ConfigError):
            cs.wavg_weights([0.1], 0.0)
        with pytest.raises(ConfigError):
            cs.ColdStartConfig(tau_wavg=-1)
        with pytest.raises(ConfigError):
            cs.ColdStartConfig(strategy="max")


class TestScorer:
    def test_wrappers_agree_with_scorer(self, tiny_model, tiny_world):
        c = tiny_world.cold_users[0]
        prof = cs.ColdProfile(c, tiny_world.positives(c, "profile"))
        outfits = tiny_world.positives(c, "cold_test")
        sims = cs.all_similarities(prof, tiny_model, tiny_world.features)
        neigh = cs.neighborhood(sims, 0.0)
        for strategy in cs.STRATEGIES:
            scorer = cs.ColdStartScorer(tiny_model, tiny_world.features, {c: prof},
                                        cs.ColdStartConfig(strategy=strategy))
            got = scorer(c, outfits)
            for j, o in enumerate(outfits):
                if strategy == "avg":
                    ref = cs.cold_score_avg(neigh, o, tiny_model, tiny_world.features)
                else:
                    ref = cs.cold_score_wavg({u: sims[u] for u in neigh}, o, tiny_model,
                                             tiny_world.features, 0.2)
                assert got[j] == pytest.approx(ref, abs=1e-6)
                assert -1 - 1e-6 <= got[j] <= 1 + 1e-6
            assert scorer.neighborhood_sizes[c] == len(neigh) >= 1

    def test_model_is_not_modified(self, tiny_model, tiny_world):
        before = tiny_model.fingerprint()
        c = tiny_world.cold_users[1]
        scorer = cs.ColdStartScorer(tiny_model, tiny_world.features,
                                    {c: cs.ColdProfile(c, tiny_world.positives(c, "profile"))})
        scorer(c, tiny_world.positives(c, "cold_test"))
        assert tiny_model.fingerprint() == before


def test_profile_file_round_trip(tmp_path):
    profiles = {60: [1, 2, 3], 61: [9]}
    cs.save_profiles(profiles, tmp_path / "p.jsonl")
    assert cs.load_profiles(tmp_path / "p.jsonl") == profiles
    (tmp_path / "bad.jsonl").write_text('{"cold_user": 1}\n')
    with pytest.raises(DataError):
        cs.load_profiles(tmp_path / "bad.jsonl")
