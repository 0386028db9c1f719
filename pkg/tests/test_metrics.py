import numpy as np
import pytest

from mgmw.kinematics import check_on_manifold, forward_kinematics
from mgmw.metrics import (
    compute_metrics,
    confusion_matrix,
    deviation_histogram,
    format_report_table,
    running_mean_stabilization,
)
from mgmw.motion import ANGLES, POSITIONS, Motion
from mgmw.rng import make_rng
from mgmw.skeleton import default_skeleton


@pytest.fixture(scope="module")
def skeleton():
    return default_skeleton()


def smooth_pair(skeleton, seed, n=10, noise=0.02):
    rng = make_rng(seed, "metrics-pair")
    t = np.arange(n)[:, None] / n
    theta = 0.4 * np.sin(2 * np.pi * 2 * t + rng.uniform(0, 6, (1, skeleton.dof_count)))
    theta = theta * (skeleton.limits_max * 0.9)
    pos = forward_kinematics(skeleton, Motion(ANGLES, theta))
    noisy = pos.with_frames(pos.frames + rng.normal(size=pos.frames.shape) * noise)
    return pos, noisy


class TestComputeMetrics:
    def test_identical_pairs_are_exact_zero(self, skeleton):
        pos, _ = smooth_pair(skeleton, 1)
        report = compute_metrics([(pos, pos), (pos, pos)], skeleton)
        assert report.l == 0.0
        assert report.delta_a == 0.0
        assert report.bone_dev == 0.0
        assert report.delta_alpha == 0.0
        assert report.on_manifold == 1.0

    def test_single_offset_matches_hand_oracle(self, skeleton):
        pos, _ = smooth_pair(skeleton, 2)
        offset = np.zeros_like(pos.frames)
        offset[:, 9:12] = np.array([0.03, -0.04, 0.12])  # one joint, every frame
        shifted = pos.with_frames(pos.frames + offset)
        report = compute_metrics([(pos, shifted)], skeleton,
                                 include_angle_metrics=False)
        n = pos.frame_count
        expected_l = np.sqrt(n * (0.03 ** 2 + 0.04 ** 2 + 0.12 ** 2)) / n
        assert abs(report.l - expected_l) <= 1e-12
        # constant offsets vanish under second differences
        assert report.delta_a <= 1e-12

    def test_bone_stretch_matches_direct_recomputation(self, skeleton):
        pos, _ = smooth_pair(skeleton, 3)
        pts = pos.frames.reshape(pos.frame_count, skeleton.joint_count, 3).copy()
        child = 2  # stretch the bone into joint 2 by 10%
        parent = skeleton.parents[child]
        pts[:, child] = pts[:, parent] + 1.1 * (pts[:, child] - pts[:, parent])
        stretched = pos.with_frames(pts.reshape(pos.frame_count, -1))
        report = compute_metrics([(pos, stretched)], skeleton,
                                 include_angle_metrics=False)
        expected = 0.1 / skeleton.bone_count  # one of T bones off by 10%
        assert abs(report.bone_dev - expected) <= 1e-9

    def test_translation_moves_l_but_not_accel_or_bones(self, skeleton):
        pos, noisy = smooth_pair(skeleton, 4)
        base = compute_metrics([(pos, noisy)], skeleton, include_angle_metrics=False)
        translated = noisy.with_frames(noisy.frames + 0.5)
        moved = compute_metrics([(pos, translated)], skeleton,
                                include_angle_metrics=False)
        assert moved.l > base.l
        assert abs(moved.delta_a - base.delta_a) <= 1e-12
        assert abs(moved.bone_dev - base.bone_dev) <= 1e-12

    def test_scaling_both_scales_l_and_accel_not_bones(self, skeleton):
        pos, noisy = smooth_pair(skeleton, 5)
        base = compute_metrics([(pos, noisy)], skeleton, include_angle_metrics=False)
        s = 2.0
        scaled = compute_metrics(
            [(pos.with_frames(pos.frames * s), noisy.with_frames(noisy.frames * s))],
            skeleton, include_angle_metrics=False)
        assert scaled.l == pytest.approx(s * base.l, rel=1e-12)
        assert scaled.delta_a == pytest.approx(s * base.delta_a, rel=1e-12)
        assert scaled.bone_dev == pytest.approx(base.bone_dev, rel=1e-12)

    def test_position_only_mode_skips_angle_metrics(self, skeleton):
        pos, noisy = smooth_pair(skeleton, 6)
        report = compute_metrics([(pos, noisy)], skeleton, include_angle_metrics=False)
        assert report.delta_alpha is None
        assert report.on_manifold is None

    def test_empty_batch_rejected(self, skeleton):
        with pytest.raises(ValueError):
            compute_metrics([], skeleton)


class TestConfusionMatrix:
    def test_single_column_when_all_land_in_one_class(self):
        records = [(0, 3), (1, 3), (2, 3), (1, 3)]
        counts = confusion_matrix(records, 4)
        assert counts[:, 3].sum() == 4
        assert counts.sum() == 4

    def test_empty_input_gives_zero_matrix(self):
        np.testing.assert_array_equal(confusion_matrix([], 3), np.zeros((3, 3)))

    def test_matches_direct_tally(self):
        rng = make_rng(7, "confusion")
        records = [(int(a), int(b)) for a, b in rng.integers(0, 5, size=(40, 2))]
        counts = confusion_matrix(records, 5)
        for i in range(5):
            for j in range(5):
                assert counts[i, j] == sum(1 for a, b in records if a == i and b == j)
        row_totals = {i: sum(1 for a, _ in records if a == i) for i in range(5)}
        for i in range(5):
            assert counts[i].sum() == row_totals[i]

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            confusion_matrix([(0, 7)], 3)


class TestDeviationHistogram:
    def test_identical_pairs_fill_the_zero_bucket(self, skeleton):
        pos, _ = smooth_pair(skeleton, 8)
        pairs = [(pos, pos)] * 5
        edges, on, off = deviation_histogram(pairs, [True] * 5, bins=4)
        assert on.sum() + off.sum() == 5
        assert on[0] == 5

    def test_mass_conservation_and_binning_oracle(self, skeleton):
        rng = make_rng(9, "hist")
        pos, _ = smooth_pair(skeleton, 9)
        pairs = []
        verdicts = []
        for i in range(12):
            noisy = pos.with_frames(pos.frames + rng.normal(size=pos.frames.shape) * 0.05)
            pairs.append((pos, noisy))
            verdicts.append(i % 3 == 0)
        edges, on, off = deviation_histogram(pairs, verdicts, bins=6)
        assert on.sum() + off.sum() == 12
        devs = [float(np.linalg.norm(a.frames - b.frames)) for a, b in pairs]
        for dev, flag in zip(devs, verdicts):
            idx = min(np.searchsorted(edges, dev, side="right") - 1, 5)
            assert (on if flag else off)[idx] >= 1


class TestStabilization:
    def test_constant_series_stabilizes_immediately(self):
        assert running_mean_stabilization(np.ones(64)) == 16

    def test_shifting_regimes_never_stabilize(self):
        values = np.array([0.0] * 8 + [10.0] * 8 + [100.0] * 16)
        assert running_mean_stabilization(values, rel_tol=0.001) is None

    def test_settling_series_stabilizes(self):
        rng = make_rng(10, "stab")
        values = 5.0 + rng.normal(size=256) * 0.01
        assert running_mean_stabilization(values) is not None


def test_format_report_table_contains_all_columns(skeleton):
    pos, noisy = smooth_pair(skeleton, 11)
    report = compute_metrics([(pos, noisy)], skeleton, success_rate=1.0,
                             mean_queries=42.0)
    text = format_report_table({"mp": report})
    assert "dB/B%" in text and "OM%" in text and "mp" in text
