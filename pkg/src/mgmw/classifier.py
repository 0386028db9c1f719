"""Built-in motion classifier and the hard-label query handles.

The model is a small fully connected tanh network over the flattened,
per-DoF-normalized position motion.  It is white-box on purpose: scores
and exact analytic input gradients are available to the gradient-based
adversary sampler, while attacks see only a :class:`BuiltinHandle`, which
answers hard labels and counts queries.

Training is plain mini-batch SGD with momentum, bit-deterministic given a
seed.  The loop accepts extra weighted loss terms so the adversarial
training variants can reuse it unchanged; with no extra terms the code
path is identical to standard training.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace

import numpy as np

from .kinematics import check_on_manifold, forward_kinematics
from .motion import ANGLES, POSITIONS, Motion
from .rng import make_rng
from .serialize import dump_json, load_json, skeleton_from_dict, skeleton_to_dict
from .skeleton import Skeleton

__all__ = [
    "LabeledDataset",
    "generate_synthetic_dataset",
    "save_dataset",
    "load_dataset",
    "ClassifierModel",
    "TrainConfig",
    "train_classifier",
    "evaluate_accuracy",
    "ClassifierHandle",
    "BuiltinHandle",
    "predict_label",
    "predict_scores",
    "input_gradient",
    "LabelCrossEntropy",
    "ScoreDivergence",
    "CapabilityError",
    "TrainingDiverged",
    "save_checkpoint",
    "load_checkpoint",
]


class CapabilityError(RuntimeError):
    """Raised when white-box access is requested from a label-only handle."""


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- datasets

@dataclass
class LabeledDataset:
    skeleton: Skeleton
    motions: list          # position-space Motion, all with n_fixed frames
    labels: np.ndarray     # (N,) int
    class_count: int
    split: str
    seed: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.motions) != self.labels.size:
            raise ValueError("motions and labels disagree in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels must lie in [0, class_count)")
        counts = {(m.frame_count, m.dof_count) for m in self.motions}
        if len(counts) > 1:
            raise ValueError("all motions must share one frame/DoF layout")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def n_fixed(self) -> int:
        return self.motions[0].frame_count

    def stacked(self) -> np.ndarray:
        return np.stack([m.frames for m in self.motions])

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=int)
        return LabeledDataset(self.skeleton, [self.motions[i] for i in indices],
                              self.labels[indices], self.class_count, self.split, self.seed)


def generate_synthetic_dataset(skeleton: Skeleton, classes: int, per_class: int,
                               seed: int, n_frames: int = 16, split: str = "train",
                               amplitude_scale: float = 0.6,
                               class_spread: float = 0.3) -> LabeledDataset:
    """Parametric motion families, one per class.

    All classes share one sinusoidal base oscillation; class ``k`` adds a
    characteristic per-DoF pose offset plus a linear-in-time drift, scaled
    by ``class_spread``.  Both class components are affine in time, so they
    survive second differencing: what tells the classes apart is posture,
    not acceleration, as with real action categories.  Per-motion amplitude
    jitter, phase jitter and additive noise stay inside a 0.95 margin of
    the joint limits, so every generated motion is on-manifold by
    construction.  Templates depend only on ``seed``; noise also depends on
    ``split`` and the motion index, so train and test splits of one seed
    share class structure without sharing samples.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    half = 0.5 * (skeleton.limits_max - skeleton.limits_min)
    center = 0.5 * (skeleton.limits_max + skeleton.limits_min)
    if amplitude_scale * 0.7 * 1.1 + class_spread + 0.08 >= 0.95:
        raise ValueError("amplitude and spread leave no room inside the joint limits")

    trng = make_rng(seed, "templates")
    m = skeleton.dof_count
    activation = trng.uniform(0.3, 0.7, size=m)
    base_phase = trng.uniform(0.0, 2.0 * np.pi, size=m)
    offsets = trng.uniform(-0.5, 0.5, size=(classes, m))
    drifts = trng.uniform(-1.0, 1.0, size=(classes, m))
    base_amp = amplitude_scale * activation * half

    t = np.arange(n_frames)[:, None] / n_frames
    motions, labels = [], []
    for k in range(classes):
        shape = class_spread * half * (offsets[k] + drifts[k] * (t - 0.5))
        for i in range(per_class):
            mrng = make_rng(seed, "motions", split, k, i)
            jitter = mrng.uniform(0.9, 1.1)
            dphase = mrng.uniform(-0.15, 0.15, size=m)
            noise = mrng.normal(0.0, 1.0, size=(n_frames, m)) * (0.02 * half)
            theta = center + jitter * base_amp * np.sin(
                4.0 * np.pi * t + base_phase + dphase) + shape + noise
            theta = np.clip(theta, center - 0.95 * half, center + 0.95 * half)
            motions.append(forward_kinematics(skeleton, Motion(ANGLES, theta)))
            labels.append(k)
    return LabeledDataset(skeleton, motions, np.array(labels), classes, split, seed)


def save_dataset(path, dataset: LabeledDataset) -> None:
    dump_json({
        "format": "mgmw-dataset",
        "version": 1,
        "skeleton": skeleton_to_dict(dataset.skeleton),
        "class_count": dataset.class_count,
        "split": dataset.split,
        "seed": dataset.seed,
        "representation": POSITIONS,
        "items": [{"label": int(l), "frames": m.frames.tolist()}
                  for m, l in zip(dataset.motions, dataset.labels)],
    }, path)


def load_dataset(path) -> LabeledDataset:
    data = load_json(path)
    skeleton = skeleton_from_dict(data["skeleton"])
    motions = [Motion(data["representation"], np.array(it["frames"], dtype=float))
               for it in data["items"]]
    labels = np.array([it["label"] for it in data["items"]], dtype=int)
    return LabeledDataset(skeleton, motions, labels, data["class_count"],
                          data["split"], data["seed"])


# ------------------------------------------------------------------ model

@dataclass
class ClassifierModel:
    weights: list                 # [(out, in) arrays]
    biases: list                  # [(out,) arrays]
    norm_mean: np.ndarray         # (m,) per-DoF
    norm_scale: np.ndarray        # (m,)
    n_fixed: int
    train_seed: int | None = None

    @property
    def dof_count(self) -> int:
        return self.norm_mean.size

    @property
    def class_count(self) -> int:
        return self.biases[-1].size

    def _features(self, frames: np.ndarray) -> np.ndarray:
        batch = frames.reshape(-1, self.n_fixed, self.dof_count)
        return ((batch - self.norm_mean) / self.norm_scale).reshape(batch.shape[0], -1)

    def _forward(self, feats: np.ndarray):
        """Return (logits, activations); activations[i] feeds layer i."""
        acts = [feats]
        h = feats
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w.T + b)
            acts.append(h)
        logits = h @ self.weights[-1].T + self.biases[-1]
        return logits, acts

    def logits(self, frames: np.ndarray) -> np.ndarray:
        return self._forward(self._features(frames))[0]

    def scores(self, frames: np.ndarray) -> np.ndarray:
        return _softmax(self.logits(frames))

    def label(self, frames: np.ndarray) -> int:
        return int(np.argmax(self.logits(frames)[0]))

    def validate_motion(self, motion: Motion) -> np.ndarray:
        if isinstance(motion, Motion):
            if motion.representation != POSITIONS:
                raise ValueError("classifier consumes position-space motions")
            frames = motion.frames
        else:
            frames = np.asarray(motion, dtype=float)
        if frames.shape != (self.n_fixed, self.dof_count):
            raise ValueError(
                f"motion shape {frames.shape} does not match model input "
                f"({self.n_fixed}, {self.dof_count})")
        return frames

    def weight_gradients(self, frames: np.ndarray, labels: np.ndarray):
        """Mean cross-entropy over the batch and its parameter gradients."""
        feats = self._features(frames)
        logits, acts = self._forward(feats)
        probs = _softmax(logits)
        n = labels.size
        loss = -np.mean(np.log(probs[np.arange(n), labels] + 1e-300))
        delta = probs.copy()
        delta[np.arange(n), labels] -= 1.0
        delta /= n
        grads_w, grads_b = [], []
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w.append(delta.T @ acts[i])
            grads_b.append(delta.sum(axis=0))
            if i > 0:
                delta = (delta @ self.weights[i]) * (1.0 - acts[i] ** 2)
        return loss, grads_w[::-1], grads_b[::-1]

    def input_gradient_from_logit_grad(self, frames: np.ndarray,
                                       dlogits: np.ndarray) -> np.ndarray:
        """Backpropagate a gradient at the logits to the raw input motion."""
        feats = self._features(frames)
        _, acts = self._forward(feats)
        delta = dlogits.reshape(1, -1)
        for i in range(len(self.weights) - 1, 0, -1):
            delta = (delta @ self.weights[i]) * (1.0 - acts[i] ** 2)
        dfeat = delta @ self.weights[0]
        dframes = dfeat.reshape(self.n_fixed, self.dof_count) / self.norm_scale
        return dframes


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 16
    learning_rate: float = 0.02
    momentum: float = 0.9
    hidden: tuple = (64, 32)
    seed: int = 0


@dataclass
class ExtraTerm:
    """One additional weighted loss term for a training step.

    ``aligned`` terms index with the clean batch (one extra sample per clean
    sample, e.g. noisy copies); ``pool`` terms cycle through their own pool.
    """
    frames: np.ndarray   # (K, n, m)
    labels: np.ndarray   # (K,)
    weight: float
    aligned: bool = False


def _init_model(dataset: LabeledDataset, config: TrainConfig) -> ClassifierModel:
    x = dataset.stacked()
    mean = x.mean(axis=(0, 1))
    scale = x.std(axis=(0, 1))
    scale = np.where(scale < 1e-9, 1.0, scale)
    rng = make_rng(config.seed, "init")
    sizes = [dataset.n_fixed * x.shape[2], *config.hidden, dataset.class_count]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ClassifierModel(weights, biases, mean, scale, dataset.n_fixed,
                           train_seed=dataset.seed)


def train_classifier(dataset: LabeledDataset, config: TrainConfig,
                     extra_terms_fn=None, clean_weight: float = 1.0) -> ClassifierModel:
    """Mini-batch SGD on mean cross-entropy; deterministic given the seed.

    ``extra_terms_fn(epoch, model) -> list[ExtraTerm]`` lets adversarial
    training mix in additional weighted loss terms, refreshed once per
    epoch; leaving it unset reproduces standard training bit-for-bit.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = _init_model(dataset, config)
    x = dataset.stacked()
    y = dataset.labels
    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    shuffle_rng = make_rng(config.seed, "shuffle")

    for epoch in range(config.epochs):
        terms = extra_terms_fn(epoch, model) if extra_terms_fn is not None else []
        perm = shuffle_rng.permutation(len(dataset))
        cursors = [0] * len(terms)
        for s in range(0, len(dataset), config.batch_size):
            batch = perm[s:s + config.batch_size]
            loss, gw, gb = model.weight_gradients(x[batch], y[batch])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}")
            if clean_weight != 1.0:
                gw = [g * clean_weight for g in gw]
                gb = [g * clean_weight for g in gb]
            for ti, term in enumerate(terms):
                if term.aligned:
                    sel = batch
                else:
                    size = term.labels.size
                    take = np.arange(cursors[ti], cursors[ti] + batch.size) % size
                    cursors[ti] += batch.size
                    sel = take
                _, ew, eb = model.weight_gradients(term.frames[sel], term.labels[sel])
                gw = [g + term.weight * e for g, e in zip(gw, ew)]
                gb = [g + term.weight * e for g, e in zip(gb, eb)]
            for i in range(len(model.weights)):
                vel_w[i] = config.momentum * vel_w[i] - config.learning_rate * gw[i]
                vel_b[i] = config.momentum * vel_b[i] - config.learning_rate * gb[i]
                model.weights[i] = model.weights[i] + vel_w[i]
                model.biases[i] = model.biases[i] + vel_b[i]
    return model


def evaluate_accuracy(model: ClassifierModel, dataset: LabeledDataset) -> float:
    logits = model.logits(dataset.stacked())
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


# ---------------------------------------------------------------- handles

@dataclass(frozen=True)
class HandleInfo:
    class_count: int
    dof_count: int
    n_fixed: int


class ClassifierHandle:
    """Hard-label query surface: labels and a query counter, nothing else."""

    def label(self, motion) -> int:
        raise NotImplementedError

    def info(self) -> HandleInfo:
        raise NotImplementedError

    @property
    def query_count(self) -> int:
        raise NotImplementedError


class BuiltinHandle(ClassifierHandle):
    def __init__(self, model: ClassifierModel):
        self._model = model
        self._count = 0
        self._lock = threading.Lock()

    def label(self, motion) -> int:
        frames = self._model.validate_motion(motion)
        with self._lock:
            self._count += 1
        return self._model.label(frames)

    def info(self) -> HandleInfo:
        return HandleInfo(self._model.class_count, self._model.dof_count,
                          self._model.n_fixed)

    @property
    def query_count(self) -> int:
        with self._lock:
            return self._count


def predict_label(handle: ClassifierHandle, motion) -> int:
    """Hard-label prediction; ties break toward the lower class index."""
    return handle.label(motion)


def predict_scores(model: ClassifierModel, motion) -> np.ndarray:
    if isinstance(model, ClassifierHandle):
        raise CapabilityError("scores are not available through a hard-label handle")
    frames = model.validate_motion(motion)
    return model.scores(frames)[0]


# -------------------------------------------------------------- loss specs

@dataclass
class LabelCrossEntropy:
    """Cross entropy of the prediction against a fixed label."""
    label: int

    def value_and_logit_grad(self, model: ClassifierModel, frames: np.ndarray):
        probs = model.scores(frames)[0]
        value = -np.log(probs[self.label] + 1e-300)
        grad = probs.copy()
        grad[self.label] -= 1.0
        return value, grad


@dataclass
class ScoreDivergence:
    """Negative cross entropy between the scores of a reference motion and
    the probed motion; minimizing it drives the two distributions apart."""
    reference_frames: np.ndarray

    def value_and_logit_grad(self, model: ClassifierModel, frames: np.ndarray):
        ref = model.scores(self.reference_frames)[0]
        probs = model.scores(frames)[0]
        value = float(np.sum(ref * np.log(probs + 1e-300)))
        grad = ref - probs * ref.sum()
        return value, grad


def input_gradient(model: ClassifierModel, motion, loss_spec) -> np.ndarray:
    """Exact analytic gradient of ``loss_spec`` w.r.t. the input motion.

    ``loss_spec`` is any object exposing ``value_and_logit_grad`` (pure
    score-space losses) or ``value_and_grad`` (composite losses that add
    their own input-space terms, e.g. the perceptual sampler loss).
    """
    if isinstance(model, ClassifierHandle):
        raise CapabilityError("input gradients require white-box model access")
    frames = model.validate_motion(motion)
    if hasattr(loss_spec, "value_and_grad"):
        return loss_spec.value_and_grad(model, frames)[1]
    _, dlogits = loss_spec.value_and_logit_grad(model, frames)
    return model.input_gradient_from_logit_grad(frames, dlogits)


# -------------------------------------------------------------- checkpoint

def save_checkpoint(path, model: ClassifierModel, skeleton: Skeleton | None = None) -> None:
    dump_json({
        "format": "mgmw-classifier",
        "version": 1,
        "n_fixed": model.n_fixed,
        "dof_count": model.dof_count,
        "class_count": model.class_count,
        "norm_mean": model.norm_mean.tolist(),
        "norm_scale": model.norm_scale.tolist(),
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "train_seed": model.train_seed,
        "skeleton": skeleton_to_dict(skeleton) if skeleton is not None else None,
    }, path)


def load_checkpoint(path):
    """Returns (model, skeleton-or-None)."""
    data = load_json(path)
    if data.get("format") != "mgmw-classifier":
        raise ValueError(f"{path} is not a classifier checkpoint")
    model = ClassifierModel(
        weights=[np.array(w, dtype=float) for w in data["weights"]],
        biases=[np.array(b, dtype=float) for b in data["biases"]],
        norm_mean=np.array(data["norm_mean"], dtype=float),
        norm_scale=np.array(data["norm_scale"], dtype=float),
        n_fixed=data["n_fixed"],
        train_seed=data.get("train_seed"),
    )
    skeleton = skeleton_from_dict(data["skeleton"]) if data.get("skeleton") else None
    return model, skeleton
