import numpy as np
import pytest

from imtok.errors import DomainError, OracleTooLarge
from imtok.imagegrid import Image, partition
from imtok.infotheory import redundancy
from imtok.selection import (
    EntropyScore,
    SelectionConfig,
    brute_force_min_subset,
    calibrate_alpha,
    rank_tokens,
    run_selection,
    select_min_prefix,
    select_top_n,
)
from imtok.infotheory import RateDistortionQuery


class TestRankTokens:
    def test_basic_descending(self):
        np.testing.assert_array_equal(rank_tokens([3.0, 1.0, 2.0]), [0, 2, 1])

    def test_all_equal_gives_identity(self):
        np.testing.assert_array_equal(rank_tokens([2.0] * 5), np.arange(5))

    def test_ascending_input_reverses(self):
        np.testing.assert_array_equal(rank_tokens([1.0, 2.0, 3.0, 4.0]), [3, 2, 1, 0])

    def test_tie_break_by_index(self):
        np.testing.assert_array_equal(rank_tokens([1.0, 5.0, 1.0, 5.0]), [1, 3, 0, 2])

    def test_accepts_entropy_scores(self):
        scores = [EntropyScore(0, 1.0), EntropyScore(1, 3.0)]
        np.testing.assert_array_equal(rank_tokens(scores), [1, 0])

    def test_negative_rejected(self):
        with pytest.raises(DomainError):
            rank_tokens([1.0, -0.5])
        with pytest.raises(DomainError):
            EntropyScore(0, -1.0)


class TestSelectMinPrefix:
    def test_reference_case(self):
        assert select_min_prefix([5.0, 3.0, 2.0], 7.0) == (2, False)

    def test_zero_threshold_selects_nothing(self):
        assert select_min_prefix([5.0, 1.0], 0.0) == (0, False)

    def test_infeasible_caps_at_m(self):
        assert select_min_prefix([1.0, 1.0], 10.0) == (2, True)

    def test_exact_boundary(self):
        assert select_min_prefix([4.0, 2.0], 6.0) == (2, False)
        assert select_min_prefix([4.0, 2.0], 4.0) == (1, False)

    def test_unsorted_rejected(self):
        with pytest.raises(DomainError):
            select_min_prefix([1.0, 2.0], 1.0)


class TestBruteForceOracle:
    def test_reference_case(self):
        assert brute_force_min_subset([5.0, 3.0, 2.0], 7.0) == 2

    def test_zero_threshold(self):
        assert brute_force_min_subset([9.0, 1.0], 0.0) == 0

    def test_forced_full_set(self):
        assert brute_force_min_subset([4.0, 4.0, 4.0], 12.0) == 3

    def test_too_large(self):
        with pytest.raises(OracleTooLarge):
            brute_force_min_subset([1.0] * 21, 5.0)

    def test_greedy_matches_oracle_randomized(self):
        rng = np.random.default_rng(42)
        for _ in range(500):
            m = int(rng.integers(1, 17))
            scores = rng.random(m) * rng.choice([0.1, 1.0, 10.0])
            tau = float(rng.random() * scores.sum() * 1.2)
            ranked = scores[rank_tokens(scores)]
            greedy, infeasible = select_min_prefix(ranked, tau)
            exact = brute_force_min_subset(scores, tau)
            assert greedy == exact
            assert infeasible == (scores.sum() < tau)


def make_grid(data):
    arr = np.asarray(data, dtype=np.float64)[:, :, None]
    img = Image(arr.shape[0], arr.shape[1], 1, arr)
    return partition(img, 4, 0.0)


class TestRunSelection:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.grid = make_grid(rng.random((16, 16)))  # 16 patches of 4x4
        self.tokens = rng.standard_normal((16, 8))
        self.globals = rng.standard_normal((2, 8))

    def test_epsilon_zero_selects_all_positive(self):
        res = run_selection(self.globals, self.tokens, self.grid, SelectionConfig(epsilon=0.0))
        assert res.selected_count == 16
        assert not res.infeasible

    def test_constant_image_selects_nothing(self):
        grid = make_grid(np.full((16, 16), 0.5))
        res = run_selection(self.globals, self.tokens, grid, SelectionConfig())
        assert res.selected_count == 0
        assert res.h_total == 0.0
        assert res.threshold == 0.0

    def test_uniform_scores_select_proportionally(self):
        # craft equal effective scores via identical patches of nonzero variance
        row = np.tile(np.array([0.0, 1.0, 0.0, 1.0]), 4)
        grid = make_grid(np.tile(row, (16, 1)))
        tokens = np.tile(np.ones(8), (16, 1))
        res = run_selection(np.zeros((0, 8)), tokens, grid, SelectionConfig(epsilon=0.05))
        assert res.selected_count == int(np.ceil(0.95 * 16))

    def test_high_epsilon_nearly_empty(self):
        res = run_selection(
            self.globals, self.tokens, self.grid, SelectionConfig(epsilon=0.999)
        )
        assert res.selected_count <= 1

    def test_epsilon_monotonicity(self):
        counts = [
            run_selection(self.globals, self.tokens, self.grid, SelectionConfig(epsilon=e)).selected_count
            for e in (0.0, 0.05, 0.10, 0.15)
        ]
        assert counts == sorted(counts, reverse=True)

    def test_cumulative_and_threshold_invariants(self):
        res = run_selection(self.globals, self.tokens, self.grid, SelectionConfig())
        assert np.all(np.diff(res.cumulative) >= 0.0)
        n = res.selected_count
        if not res.infeasible and n >= 1:
            assert res.cumulative[n - 1] >= res.threshold
            assert res.cumulative[n - 2] < res.threshold if n >= 2 else True
        vals = np.array([s.score for s in res.scores])
        assert np.all(np.diff(vals[res.order]) <= 0.0)

    def test_capacity_clipping_flagged(self):
        res = run_selection(
            self.globals, self.tokens, self.grid, SelectionConfig(epsilon=0.0),
            max_selected=5,
        )
        assert res.selected_count == 5
        assert res.capacity_clipped
        assert res.requested_count == 16

    def test_determinism(self):
        a = run_selection(self.globals, self.tokens, self.grid, SelectionConfig())
        b = run_selection(self.globals, self.tokens, self.grid, SelectionConfig())
        assert a.selected_indices == b.selected_indices
        np.testing.assert_array_equal(a.cumulative, b.cumulative)

    def test_supplement_floor_engages(self):
        # a tight distortion target demands more than the epsilon constraint
        cfg = SelectionConfig(epsilon=0.9, alpha=0.3, d0=1e-12, sigma2=0.1,
                              pixel_count=256, codebook_size=4096)
        loose = run_selection(self.globals, self.tokens, self.grid,
                              SelectionConfig(epsilon=0.9))
        tight = run_selection(self.globals, self.tokens, self.grid, cfg)
        assert tight.selected_count >= loose.selected_count
        assert tight.threshold >= loose.threshold


class TestSelectedSubsetRedundancy:
    def test_selection_reduces_redundancy(self):
        # tokens built as shared-global content plus noise: the first
        # half leans on the global (redundant), the second half is
        # mostly unique noise. Selection should keep the unique ones.
        rng = np.random.default_rng(21)
        m, dim = 600, 2
        g = rng.standard_normal((m, dim))
        redundant = [g + 0.02 * rng.standard_normal((m, dim)) for _ in range(3)]
        unique = [1.5 * rng.standard_normal((m, dim)) for _ in range(3)]
        ensemble = np.stack(redundant + unique, axis=1)  # (m, 6, dim)

        mean_scores = []
        for i in range(6):
            resid = ensemble[:, i, :] - g * np.einsum(
                "md,md->m", ensemble[:, i, :], g
            )[:, None] / np.einsum("md,md->m", g, g)[:, None]
            mean_scores.append(float(np.einsum("md,md->m", resid, resid).mean()))
        order = rank_tokens(mean_scores)
        selected = ensemble[:, order[:3], :]

        assert sorted(order[:3]) == [3, 4, 5]
        assert redundancy(selected) < redundancy(ensemble)


class TestSelectTopN:
    def test_budget_selection(self):
        assert select_top_n([0.1, 5.0, 3.0, 4.0], 2) == [1, 3]

    def test_negative_budget(self):
        with pytest.raises(DomainError):
            select_top_n([1.0], -1)


class TestCalibrateAlpha:
    def test_clamped_range(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((200, 3))
        q = RateDistortionQuery(1.0, 0.5, 10)  # R(D0) = 5 bits
        # perfectly informative globals saturate the upper clamp
        assert calibrate_alpha(x, x.copy(), q) == pytest.approx(0.95)
        # independent globals fall to the lower clamp
        y = rng.standard_normal((200, 3))
        assert calibrate_alpha(x, y, q) == pytest.approx(0.05)

    def test_trivial_rate_target(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((100, 2))
        q = RateDistortionQuery(0.5, 0.5, 10)  # R(D0) = 0
        assert calibrate_alpha(x, x, q) == pytest.approx(0.95)
