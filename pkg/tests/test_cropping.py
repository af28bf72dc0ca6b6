import math

import numpy as np
import pytest

from tsal.cropping import (
    CropObjectiveBreakdown,
    WindowRect,
    crop_objective,
    propose_window,
)


def feasible_offsets(a, side, limit):
    lo = max(0, int(math.ceil(a - side)))
    hi = min(limit - side, int(math.floor(a)))
    return lo, hi


def bruteforce_window(anchor, cands, prev, image_w, image_h, size, lam=0.01):
    """Evaluate every stride-1 position with crop_objective, strict-min scan."""
    r_w, r_h = size
    lo_x, hi_x = feasible_offsets(anchor[0], r_w, image_w)
    lo_y, hi_y = feasible_offsets(anchor[1], r_h, image_h)
    best = None
    best_total = math.inf
    for ry in range(lo_y, hi_y + 1):
        for rx in range(lo_x, hi_x + 1):
            r = WindowRect(rx, ry, r_w, r_h)
            total = crop_objective(r, anchor, cands, prev, lam=lam).total
            if total < best_total:
                best_total = total
                best = r
    return best, best_total


def random_scene(rng, image_w=200, image_h=200, n_cands=30, n_prev=3):
    cands = [
        (float(rng.integers(0, image_w + 1)), float(rng.integers(0, image_h + 1)))
        for _ in range(n_cands)
    ]
    anchor = cands[int(rng.integers(0, n_cands))]
    prev = []
    for _ in range(int(rng.integers(0, n_prev + 1))):
        w = int(rng.integers(40, 120))
        h = int(rng.integers(40, 120))
        prev.append(
            WindowRect(
                int(rng.integers(0, image_w - w + 1)),
                int(rng.integers(0, image_h - h + 1)),
                w,
                h,
            )
        )
    return anchor, cands, prev


class TestCropObjective:
    def test_single_candidate_centered_window_scores_zero(self):
        r = WindowRect(60, 60, 80, 80)
        out = crop_objective(r, (100.0, 100.0), [(100.0, 100.0)], [])
        assert out.term_candidates == 0.0
        assert out.term_overlap == 0.0
        assert out.term_center == 0.0
        assert out.total == 0.0

    def test_term_values_all_contained_identical_prev(self):
        r = WindowRect(10, 20, 100, 50)
        cands = [(15.0, 25.0), (110.0, 70.0), (60.0, 45.0)]
        out = crop_objective(r, (60.0, 45.0), cands, [r])
        assert out.term_candidates == 0.0
        assert out.term_overlap == 1.0
        dx = (10 + 50.0) - 60.0
        dy = (20 + 25.0) - 45.0
        assert out.term_center == 0.01 * ((dx * dx + dy * dy) / (100 * 100 + 50 * 50))
        assert out.total == out.term_candidates + out.term_overlap + out.term_center

    def test_candidate_fraction(self):
        r = WindowRect(0, 0, 10, 10)
        cands = [(5.0, 5.0), (10.0, 10.0), (11.0, 5.0), (50.0, 50.0)]
        out = crop_objective(r, (5.0, 5.0), cands, [])
        # inclusive edges: (10, 10) counts, (11, 5) does not
        assert out.term_candidates == 1.0 - 2 / 4

    def test_empty_candidate_list_scores_constant_one(self):
        r = WindowRect(0, 0, 10, 10)
        out = crop_objective(r, (5.0, 5.0), [], [])
        assert out.term_candidates == 1.0

    def test_partial_overlap_value(self):
        r = WindowRect(0, 0, 100, 100)
        q = WindowRect(50, 50, 100, 100)
        out = crop_objective(r, (10.0, 10.0), [(10.0, 10.0)], [q])
        assert out.term_overlap == (50 * 50) / (100 * 100)

    def test_max_over_previous_windows(self):
        r = WindowRect(0, 0, 100, 100)
        qs = [WindowRect(90, 90, 50, 50), WindowRect(20, 20, 50, 50)]
        out = crop_objective(r, (10.0, 10.0), [(10.0, 10.0)], qs)
        assert out.term_overlap == (50 * 50) / (100 * 100)

    def test_disjoint_previous_window_no_overlap(self):
        r = WindowRect(0, 0, 40, 40)
        out = crop_objective(r, (10.0, 10.0), [(10.0, 10.0)], [WindowRect(41, 0, 40, 40)])
        assert out.term_overlap == 0.0

    def test_anchor_outside_window_rejected(self):
        with pytest.raises(ValueError, match="anchor"):
            crop_objective(WindowRect(0, 0, 10, 10), (11.0, 5.0), [], [])

    def test_center_term_bounded_for_containing_windows(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            w = int(rng.integers(10, 200))
            h = int(rng.integers(10, 200))
            rx = int(rng.integers(0, 500))
            ry = int(rng.integers(0, 500))
            ax = float(rng.uniform(rx, rx + w))
            ay = float(rng.uniform(ry, ry + h))
            out = crop_objective(WindowRect(rx, ry, w, h), (ax, ay), [], [])
            # worst case is an anchor at a corner: distance^2 = (w^2 + h^2) / 4
            assert out.term_center <= 0.01 * 0.25 + 1e-15


class TestWindowRect:
    def test_inclusive_containment(self):
        r = WindowRect(10, 20, 30, 40)
        assert r.contains_point(10.0, 20.0)
        assert r.contains_point(40.0, 60.0)
        assert not r.contains_point(40.001, 60.0)
        assert not r.contains_point(9.999, 20.0)

    def test_center_and_area(self):
        r = WindowRect(10, 20, 30, 40)
        assert r.center == (25.0, 40.0)
        assert r.area == 1200

    def test_intersection_area(self):
        a = WindowRect(0, 0, 100, 100)
        assert a.intersection_area(WindowRect(50, 50, 100, 100)) == 2500
        assert a.intersection_area(WindowRect(100, 0, 10, 10)) == 0
        assert a.intersection_area(a) == 10000

    def test_within(self):
        assert WindowRect(0, 0, 100, 100).within(100, 100)
        assert not WindowRect(1, 0, 100, 100).within(100, 100)

    def test_nonpositive_size_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            WindowRect(0, 0, 0, 10)


class TestProposeWindow:
    def test_matches_bruteforce_oracle_stride_one(self):
        rng = np.random.default_rng(0)
        for trial in range(25):
            anchor, cands, prev = random_scene(rng)
            got = propose_window(
                anchor, cands, prev, 200, 200, size=(80, 80), stride=1
            )
            want, want_total = bruteforce_window(
                anchor, cands, prev, 200, 200, (80, 80)
            )
            assert got == want, f"trial {trial}: {got} != {want}"
            got_total = crop_objective(got, anchor, cands, prev).total
            assert got_total == want_total

    def test_single_candidate_image_centers_on_anchor(self):
        got = propose_window(
            (100.0, 100.0), [(100.0, 100.0)], [], 200, 200, size=(80, 80), stride=1
        )
        assert got == WindowRect(60, 60, 80, 80)

    def test_corner_anchor_single_feasible_position(self):
        got = propose_window((0.0, 0.0), [(0.0, 0.0)], [], 100, 100, size=(100, 100), stride=1)
        assert got == WindowRect(0, 0, 100, 100)

    def test_second_window_avoids_first(self):
        anchor = (100.0, 100.0)
        first = propose_window(anchor, [], [], 200, 200, size=(100, 100), stride=1)
        assert first == WindowRect(50, 50, 100, 100)
        second = propose_window(anchor, [], [first], 200, 200, size=(100, 100), stride=1)
        assert second != first
        centered = crop_objective(first, anchor, [], [first])
        shifted = crop_objective(second, anchor, [], [first])
        assert shifted.total < centered.total
        assert shifted.term_overlap < centered.term_overlap

    def test_result_contains_anchor_and_stays_in_bounds(self):
        rng = np.random.default_rng(3)
        for _ in range(40):
            anchor, cands, prev = random_scene(rng)
            r = propose_window(anchor, cands, prev, 200, 200, size=(80, 80), stride=25)
            assert r.within(200, 200)
            assert r.contains_point(*anchor)

    def test_finer_dividing_stride_never_worse(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            anchor, cands, prev = random_scene(rng)
            totals = {}
            for stride in (1, 5, 25):
                r = propose_window(
                    anchor, cands, prev, 200, 200, size=(80, 80), stride=stride
                )
                totals[stride] = crop_objective(r, anchor, cands, prev).total
            assert totals[1] <= totals[5] <= totals[25]

    def test_default_stride_close_to_exhaustive(self):
        rng = np.random.default_rng(5)
        anchor, cands, prev = random_scene(rng)
        coarse = propose_window(anchor, cands, prev, 200, 200, size=(80, 80), stride=25)
        fine = propose_window(anchor, cands, prev, 200, 200, size=(80, 80), stride=1)
        c = crop_objective(coarse, anchor, cands, prev).total
        f = crop_objective(fine, anchor, cands, prev).total
        assert f <= c <= f + 1.0

    def test_window_larger_than_image_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            propose_window((5.0, 5.0), [], [], 100, 100, size=(101, 100))

    def test_anchor_outside_image_rejected(self):
        with pytest.raises(ValueError, match="anchor"):
            propose_window((150.0, 5.0), [], [], 100, 100, size=(50, 50))

    def test_bad_stride_rejected(self):
        with pytest.raises(ValueError, match="stride"):
            propose_window((5.0, 5.0), [], [], 100, 100, size=(50, 50), stride=0)

    def test_exact_size_image_window(self):
        got = propose_window((30.0, 70.0), [], [], 100, 100, size=(100, 100), stride=25)
        assert got == WindowRect(0, 0, 100, 100)
