import numpy as np
import pytest

from mgmw.classifier import (
    BuiltinHandle,
    CapabilityError,
    LabelCrossEntropy,
    ScoreDivergence,
    TrainConfig,
    evaluate_accuracy,
    generate_synthetic_dataset,
    input_gradient,
    load_checkpoint,
    load_dataset,
    predict_label,
    predict_scores,
    save_checkpoint,
    save_dataset,
    train_classifier,
)
from mgmw.kinematics import check_on_manifold
from mgmw.motion import Motion
from mgmw.skeleton import default_skeleton


@pytest.fixture(scope="module")
def skeleton():
    return default_skeleton()


@pytest.fixture(scope="module")
def train_set(skeleton):
    return generate_synthetic_dataset(skeleton, classes=4, per_class=20, seed=42)


@pytest.fixture(scope="module")
def test_set(skeleton):
    return generate_synthetic_dataset(skeleton, classes=4, per_class=10, seed=42,
                                      split="test")


@pytest.fixture(scope="module")
def model(train_set):
    return train_classifier(train_set, TrainConfig(seed=7))


class TestSyntheticDataset:
    def test_size_and_manifold_membership(self, skeleton, train_set):
        assert len(train_set) == 80
        for motion in train_set.motions[::13]:
            assert check_on_manifold(skeleton, motion).on_manifold

    def test_deterministic_given_seed(self, skeleton):
        a = generate_synthetic_dataset(skeleton, 3, 4, seed=5)
        b = generate_synthetic_dataset(skeleton, 3, 4, seed=5)
        for ma, mb in zip(a.motions, b.motions):
            np.testing.assert_array_equal(ma.frames, mb.frames)

    def test_splits_differ_but_share_structure(self, skeleton):
        tr = generate_synthetic_dataset(skeleton, 3, 4, seed=5)
        te = generate_synthetic_dataset(skeleton, 3, 4, seed=5, split="test")
        assert not np.array_equal(tr.motions[0].frames, te.motions[0].frames)

    def test_infeasible_amplitude_rejected(self, skeleton):
        with pytest.raises(ValueError):
            generate_synthetic_dataset(skeleton, 3, 4, seed=5, amplitude_scale=0.9)

    def test_round_trips_through_file(self, tmp_path, train_set):
        path = tmp_path / "data.json"
        save_dataset(path, train_set)
        loaded = load_dataset(path)
        assert loaded.class_count == train_set.class_count
        np.testing.assert_array_equal(loaded.labels, train_set.labels)
        np.testing.assert_array_equal(loaded.motions[3].frames,
                                      train_set.motions[3].frames)


class TestTraining:
    def test_reaches_high_test_accuracy(self, model, train_set, test_set):
        assert evaluate_accuracy(model, train_set) >= 0.98
        assert evaluate_accuracy(model, test_set) >= 0.95

    def test_training_is_bit_deterministic(self, train_set):
        cfg = TrainConfig(epochs=6, seed=3)
        m1 = train_classifier(train_set, cfg)
        m2 = train_classifier(train_set, cfg)
        for w1, w2 in zip(m1.weights, m2.weights):
            np.testing.assert_array_equal(w1, w2)

    def test_zero_epochs_returns_initialization(self, train_set):
        cfg = TrainConfig(epochs=0, seed=3)
        m1 = train_classifier(train_set, cfg)
        m2 = train_classifier(train_set, cfg)
        for w1, w2 in zip(m1.weights, m2.weights):
            np.testing.assert_array_equal(w1, w2)
        # initialization is independent of any gradient step
        assert all(np.all(b == 0) for b in m1.biases)


class TestPredictions:
    def test_scores_are_a_distribution(self, model, train_set):
        scores = predict_scores(model, train_set.motions[0])
        assert np.all(scores >= 0)
        assert abs(scores.sum() - 1.0) <= 1e-9

    def test_label_is_argmax_of_scores(self, model, train_set):
        handle = BuiltinHandle(model)
        for motion in train_set.motions[::7]:
            assert predict_label(handle, motion) == int(np.argmax(predict_scores(model, motion)))

    def test_query_counter_counts_exactly(self, model, train_set):
        handle = BuiltinHandle(model)
        motion = train_set.motions[0]
        l1 = handle.label(motion)
        l2 = handle.label(motion)
        assert l1 == l2
        assert handle.query_count == 2

    def test_dimension_mismatch_rejected_without_counting(self, model):
        handle = BuiltinHandle(model)
        with pytest.raises(ValueError):
            handle.label(np.zeros((4, 4)))
        assert handle.query_count == 0

    def test_uniform_scores_tie_break_to_lowest(self, model, train_set):
        zeroed = type(model)(
            weights=[np.zeros_like(w) for w in model.weights],
            biases=[np.zeros_like(b) for b in model.biases],
            norm_mean=model.norm_mean, norm_scale=model.norm_scale,
            n_fixed=model.n_fixed)
        handle = BuiltinHandle(zeroed)
        assert handle.label(train_set.motions[0]) == 0
        np.testing.assert_allclose(predict_scores(zeroed, train_set.motions[0]),
                                   1.0 / model.class_count)


def finite_difference(model, frames, loss_spec, step=1e-4):
    grad = np.zeros_like(frames)
    def value(f):
        if hasattr(loss_spec, "value_and_grad"):
            return loss_spec.value_and_grad(model, f)[0]
        return loss_spec.value_and_logit_grad(model, f)[0]
    for t in range(frames.shape[0]):
        for j in range(frames.shape[1]):
            up = frames.copy(); up[t, j] += step
            dn = frames.copy(); dn[t, j] -= step
            grad[t, j] = (value(up) - value(dn)) / (2 * step)
    return grad


class TestInputGradient:
    def test_cross_entropy_gradient_matches_finite_differences(self, skeleton):
        data = generate_synthetic_dataset(skeleton, classes=3, per_class=8, seed=9)
        model = train_classifier(data, TrainConfig(epochs=15, seed=1))
        motion = data.motions[5]
        spec = LabelCrossEntropy(int(data.labels[5]))
        grad = input_gradient(model, motion, spec)
        fd = finite_difference(model, motion.frames, spec)
        denom = max(np.abs(fd).max(), 1e-12)
        assert np.abs(grad - fd).max() / denom <= 1e-4

    def test_score_divergence_gradient_matches_finite_differences(self, skeleton):
        data = generate_synthetic_dataset(skeleton, classes=3, per_class=8, seed=9)
        model = train_classifier(data, TrainConfig(epochs=15, seed=1))
        ref = data.motions[2].frames
        probe = data.motions[11]
        spec = ScoreDivergence(ref)
        grad = input_gradient(model, probe, spec)
        fd = finite_difference(model, probe.frames, spec)
        denom = max(np.abs(fd).max(), 1e-12)
        assert np.abs(grad - fd).max() / denom <= 1e-4

    def test_handle_has_no_gradient_capability(self, model, train_set):
        handle = BuiltinHandle(model)
        with pytest.raises(CapabilityError):
            input_gradient(handle, train_set.motions[0], LabelCrossEntropy(0))
        with pytest.raises(CapabilityError):
            predict_scores(handle, train_set.motions[0])


class TestCheckpoint:
    def test_round_trip_is_exact(self, tmp_path, model, skeleton, train_set):
        path = tmp_path / "model.json"
        save_checkpoint(path, model, skeleton)
        loaded, sk = load_checkpoint(path)
        for w1, w2 in zip(model.weights, loaded.weights):
            np.testing.assert_array_equal(w1, w2)
        np.testing.assert_array_equal(loaded.norm_mean, model.norm_mean)
        assert sk is not None
        logits_a = model.logits(train_set.motions[0].frames)
        logits_b = loaded.logits(train_set.motions[0].frames)
        np.testing.assert_array_equal(logits_a, logits_b)
