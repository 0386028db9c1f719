"""Adversarial training defenses for the built-in classifier.

Mixed-manifold adversarial training optimizes

    mu_c * CE(clean) + mu_on * CE(on-manifold adversaries)
                     + mu_off * CE(off-manifold adversaries)

with ``mu_c = 1 - mu_on - mu_off``.  Adversary pools are resampled once per
epoch against the live model, either by the hard-label walk (projections on
for the on-manifold pool, a single unprojected iteration for the off pool)
or by the white-box gradient sampler below.  With both mixing weights at
zero the code path collapses to plain training, bit for bit.

The gradient sampler minimizes ``w * L_c + (1 - w) * L_p`` by signed
gradient steps, where ``L_c`` is the negative cross entropy between the
clean and probed score distributions and ``L_p`` is a perceptual loss
combining derivative matching (orders 0..2) with per-frame bone-length
matching.  The Gaussian-smoothing baseline instead augments every clean
sample with a temporally filtered noisy copy.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import convolve1d

from .attack import AttackConfig, gmw_attack
from .classifier import (
    BuiltinHandle,
    ClassifierModel,
    ExtraTerm,
    LabeledDataset,
    TrainConfig,
    evaluate_accuracy,
    train_classifier,
)
from .kinematics import bone_lengths, check_on_manifold, inverse_kinematics
from .motion import Motion, first_difference, second_difference
from .projection import ProjectionConfig, manifold_project
from .rng import make_rng, split_seed
from .skeleton import Skeleton

__all__ = [
    "SmartConfig",
    "perceptual_loss",
    "SmartCompositeLoss",
    "smart_attack",
    "SmartResult",
    "DefenseConfig",
    "SamplerReport",
    "sample_adversaries",
    "mmat_train",
    "DefenseReport",
    "gaussian_smoothing_train",
    "GAUSSIAN_KERNEL_1X5",
    "temporal_gaussian_filter",
]

# binomial approximation of a 1x5 Gaussian, mass-preserving
GAUSSIAN_KERNEL_1X5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


# ------------------------------------------------------- perceptual loss

@dataclass
class SmartConfig:
    w: float = 0.6                      # classification/perceptual mix
    learning_rate: float = 0.02
    iterations: int = 50
    alpha: float = 0.3                  # dynamics vs bone-length mix
    derivative_weights: tuple = (0.2, 0.3, 0.5)   # orders 0..2, sum to 1
    gamma: np.ndarray | None = None     # per-DoF weights, identity if None

    def __post_init__(self):
        if abs(sum(self.derivative_weights) - 1.0) > 1e-9:
            raise ValueError("derivative weights must sum to 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


def _derivative_stack(frames: np.ndarray):
    return (frames, first_difference(frames), second_difference(frames))


def _difference_adjoint(order: int, values: np.ndarray) -> np.ndarray:
    """Adjoint of the order-k difference operator applied to ``values``."""
    n = values.shape[0]
    if order == 0:
        return values
    mat = np.zeros((n, n))
    if order == 1:
        for t in range(n - 1):
            mat[t, t] = -1.0
            mat[t, t + 1] = 1.0
        mat[n - 1] = mat[n - 2]
    else:
        for t in range(1, n - 1):
            mat[t, t - 1] = 1.0
            mat[t, t] = -2.0
            mat[t, t + 1] = 1.0
        mat[0] = mat[1]
        mat[n - 1] = mat[n - 2]
    return mat.T @ values


def _perceptual_terms(skeleton: Skeleton, x: np.ndarray, xp: np.ndarray,
                      cfg: SmartConfig, with_grad: bool):
    n = x.shape[0]
    gamma = np.ones(x.shape[1]) if cfg.gamma is None else np.asarray(cfg.gamma, dtype=float)

    l_dyn = 0.0
    grad_dyn = np.zeros_like(xp) if with_grad else None
    for order, weight in enumerate(cfg.derivative_weights):
        rx = _derivative_stack(x)[order]
        rxp = _derivative_stack(xp)[order]
        diff = gamma * (rx - rxp)
        l_dyn += weight * float(np.sum(diff ** 2))
        if with_grad:
            grad_dyn -= 2.0 * weight * _difference_adjoint(order, gamma * diff)

    lengths_x = bone_lengths(skeleton, x)
    lengths_xp = bone_lengths(skeleton, xp)
    gap = lengths_x - lengths_xp
    l_bl = float(np.sum(gap ** 2)) / n

    grad_bl = None
    if with_grad:
        grad_bl = np.zeros_like(xp)
        pts = xp.reshape(n, skeleton.joint_count, 3)
        child = np.arange(1, skeleton.joint_count)
        parent = skeleton.parents[child]
        vec = pts[:, child] - pts[:, parent]
        units = vec / np.maximum(lengths_xp[..., None], 1e-12)
        # d l_bl / d p_child = -(2/n) * gap * unit; parent gets the opposite
        coeff = -(2.0 / n) * gap[..., None] * units
        g = grad_bl.reshape(n, skeleton.joint_count, 3)
        np.add.at(g, (slice(None), child), coeff)
        np.add.at(g, (slice(None), parent), -coeff)

    value = cfg.alpha * l_dyn + (1.0 - cfg.alpha) * l_bl
    if not with_grad:
        return value, None
    return value, cfg.alpha * grad_dyn + (1.0 - cfg.alpha) * grad_bl


def perceptual_loss(x, x_prime, skeleton: Skeleton,
                    cfg: SmartConfig | None = None) -> float:
    """alpha-weighted derivative matching plus bone-length matching."""
    cfg = cfg or SmartConfig()
    xf = x.frames if isinstance(x, Motion) else np.asarray(x, dtype=float)
    xpf = x_prime.frames if isinstance(x_prime, Motion) else np.asarray(x_prime, dtype=float)
    if xf.shape != xpf.shape:
        raise ValueError("perceptual loss needs same-shape motions")
    value, _ = _perceptual_terms(skeleton, xf, xpf, cfg, with_grad=False)
    return value


@dataclass
class SmartCompositeLoss:
    """w * (negative cross entropy against the clean scores) + (1-w) * L_p.

    Exposes ``value_and_grad`` so :func:`mgmw.classifier.input_gradient`
    can return its exact analytic input gradient.
    """
    reference_frames: np.ndarray
    skeleton: Skeleton
    cfg: SmartConfig

    def value_and_grad(self, model: ClassifierModel, frames: np.ndarray):
        ref_scores = model.scores(self.reference_frames)[0]
        probs = model.scores(frames)[0]
        lc = float(np.sum(ref_scores * np.log(probs + 1e-300)))
        dlogits = ref_scores - probs
        grad_c = model.input_gradient_from_logit_grad(frames, dlogits)
        lp, grad_p = _perceptual_terms(self.skeleton, self.reference_frames,
                                       frames, self.cfg, with_grad=True)
        w = self.cfg.w
        return w * lc + (1.0 - w) * lp, w * grad_c + (1.0 - w) * grad_p


@dataclass
class SmartResult:
    motion: Motion
    adversarial: bool
    final_label: int
    losses: list


def smart_attack(model: ClassifierModel, skeleton: Skeleton, motion: Motion,
                 cfg: SmartConfig | None = None, mode: str = "on") -> SmartResult:
    """White-box sampler: signed-gradient descent on the composite loss.

    ``mode="on"`` keeps the perceptual term active (w from the config);
    ``mode="off"`` sets w = 1, ignoring the perceptual term entirely.
    """
    cfg = cfg or SmartConfig()
    if mode == "off":
        cfg = replace(cfg, w=1.0)
    frames = model.validate_motion(motion)
    original_label = model.label(frames)
    loss = SmartCompositeLoss(frames.copy(), skeleton, cfg)
    current = frames.copy()
    losses = []
    for _ in range(cfg.iterations):
        value, grad = loss.value_and_grad(model, current)
        losses.append(value)
        current = current - cfg.learning_rate * np.sign(grad)
    final_label = model.label(current)
    return SmartResult(Motion(motion.representation, current, motion.frame_rate),
                       final_label != original_label, final_label, losses)


# ------------------------------------------------------------ defense

@dataclass
class DefenseConfig:
    mu_on: float = 0.2
    mu_off: float = 0.4
    sampler: str = "gmw"                 # "gmw" (hard-label) or "smart" (white-box)
    adversaries_per_epoch: int = 24
    warmup_epochs: int = 5               # clean-only epochs before sampling starts
    accumulate_pools: bool = True        # keep adversaries from earlier epochs
    pool_cap: int = 600                  # newest samples kept per pool
    gmw_on_iters: int = 8                # walk iterations, projection every one
    gmw_off_iters: int = 1               # single unprojected iteration
    smart: SmartConfig = field(default_factory=SmartConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tol_bone: float = 1e-3
    tol_angle: float = 1e-6

    def __post_init__(self):
        if self.mu_on < 0 or self.mu_off < 0 or self.mu_on + self.mu_off > 1.0:
            raise ValueError("mixing weights must be non-negative and sum to at most 1")
        if self.sampler not in ("gmw", "smart"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.gmw_on_iters < 1 or self.gmw_off_iters < 1 or self.adversaries_per_epoch < 1:
            raise ValueError("sampler budgets must be at least 1")

    @property
    def mu_c(self) -> float:
        return 1.0 - self.mu_on - self.mu_off


@dataclass
class SamplerReport:
    requested: int
    on_kept: int = 0
    off_kept: int = 0
    on_skipped: int = 0
    off_skipped: int = 0


def sample_adversaries(model: ClassifierModel, batch: LabeledDataset,
                       cfg: DefenseConfig, seed: int, want_on: bool = True,
                       want_off: bool = True):
    """Draw on- and off-manifold adversary pools against ``model``.

    Every kept on-manifold sample passes the manifold check; elements whose
    attack fails or whose result leaves the manifold are skipped and
    counted.  Returns (on_frames, on_labels, off_frames, off_labels, report).
    """
    skeleton = batch.skeleton
    report = SamplerReport(requested=len(batch))
    on_frames, on_labels, off_frames, off_labels = [], [], [], []
    for i in range(len(batch)):
        label = int(batch.labels[i])
        if want_on:
            frames = _sample_single(model, batch, skeleton, cfg, seed, i, on_manifold=True)
            if frames is not None:
                on_frames.append(frames)
                on_labels.append(label)
                report.on_kept += 1
            else:
                report.on_skipped += 1
        if want_off:
            frames = _sample_single(model, batch, skeleton, cfg, seed, i, on_manifold=False)
            if frames is not None:
                off_frames.append(frames)
                off_labels.append(label)
                report.off_kept += 1
            else:
                report.off_skipped += 1
    return on_frames, on_labels, off_frames, off_labels, report


def _sample_single(model, batch, skeleton, cfg, seed, index, on_manifold):
    motion = batch.motions[index]
    label = int(batch.labels[index])
    kind = "on" if on_manifold else "off"
    if cfg.sampler == "gmw":
        attack_cfg = AttackConfig(
            max_iters=cfg.gmw_on_iters if on_manifold else cfg.gmw_off_iters,
            mp_enabled=on_manifold,
            mp_every=1,
            projection=cfg.projection,
            seed=split_seed(seed, "adversary", kind, index),
        )
        result = gmw_attack(BuiltinHandle(model), motion, batch, skeleton,
                            attack_cfg, true_label=label)
        if result.skipped or not result.success:
            return None
        candidate = result.adversarial_motion
    else:
        smart_result = smart_attack(model, skeleton, motion, cfg.smart,
                                    mode="on" if on_manifold else "off")
        candidate = smart_result.motion
        if on_manifold:
            # the gradient walk leaves the manifold; project and re-verify
            candidate, _ = manifold_project(skeleton, candidate, motion,
                                            cfg.projection)
            if model.label(candidate.frames) == label:
                return None
        elif not smart_result.adversarial:
            return None
    if on_manifold:
        verdict = check_on_manifold(skeleton, candidate, cfg.tol_bone, cfg.tol_angle)
        if not verdict.on_manifold:
            return None
    return candidate.frames


@dataclass
class DefenseReport:
    epochs: list          # per-epoch dicts: clean accuracy + sampler stats
    config: DefenseConfig


def mmat_train(dataset: LabeledDataset, cfg: DefenseConfig):
    """Mixed-manifold adversarial training; returns (model, DefenseReport).

    Adversary pools are redrawn once per epoch against the in-training
    model, from a rotating subset of the training data.  With
    ``mu_on = mu_off = 0`` this is exactly standard training (no sampler
    runs, no extra loss terms, identical weight trajectory).
    """
    report = DefenseReport(epochs=[], config=cfg)
    if cfg.mu_on == 0.0 and cfg.mu_off == 0.0:
        model = train_classifier(dataset, cfg.train)
        report.epochs.append({"clean_accuracy": evaluate_accuracy(model, dataset)})
        return model, report

    pools = {"on": ([], []), "off": ([], [])}

    def extra_terms(epoch: int, model: ClassifierModel):
        if epoch < cfg.warmup_epochs:
            return []
        rng = make_rng(cfg.train.seed, "mmat-subset", epoch)
        size = min(cfg.adversaries_per_epoch, len(dataset))
        subset = dataset.subset(np.sort(rng.choice(len(dataset), size=size,
                                                   replace=False)))
        on_f, on_l, off_f, off_l, sampler_report = sample_adversaries(
            model, subset, cfg, split_seed(cfg.train.seed, "mmat-epoch", epoch),
            want_on=cfg.mu_on > 0.0, want_off=cfg.mu_off > 0.0)
        report.epochs.append({
            "epoch": epoch,
            "clean_accuracy": evaluate_accuracy(model, dataset),
            "on_kept": sampler_report.on_kept,
            "on_skipped": sampler_report.on_skipped,
            "off_kept": sampler_report.off_kept,
            "off_skipped": sampler_report.off_skipped,
        })
        terms = []
        for kind, frames, labels, weight in (("on", on_f, on_l, cfg.mu_on),
                                             ("off", off_f, off_l, cfg.mu_off)):
            if weight <= 0.0:
                continue
            pool_frames, pool_labels = pools[kind]
            if cfg.accumulate_pools:
                pool_frames.extend(frames)
                pool_labels.extend(labels)
                del pool_frames[:-cfg.pool_cap]
                del pool_labels[:-cfg.pool_cap]
            else:
                pool_frames[:] = frames
                pool_labels[:] = labels
            if pool_frames:
                terms.append(ExtraTerm(np.stack(pool_frames),
                                       np.array(pool_labels), weight))
        return terms

    model = train_classifier(dataset, cfg.train, extra_terms_fn=extra_terms,
                             clean_weight=cfg.mu_c)
    report.epochs.append({"clean_accuracy": evaluate_accuracy(model, dataset)})
    return model, report


# ------------------------------------------------- gaussian smoothing

def temporal_gaussian_filter(frames: np.ndarray,
                             kernel: np.ndarray = GAUSSIAN_KERNEL_1X5) -> np.ndarray:
    """Smooth along the temporal axis with edge replication."""
    kernel = np.asarray(kernel, dtype=float)
    if np.any(kernel < 0) or abs(kernel.sum() - 1.0) > 1e-12:
        raise ValueError("the smoothing kernel must be non-negative and sum to 1")
    return convolve1d(np.asarray(frames, dtype=float), kernel, axis=0, mode="nearest")


def gaussian_smoothing_train(dataset: LabeledDataset, sigma: float,
                             train_cfg: TrainConfig | None = None,
                             kernel: np.ndarray = GAUSSIAN_KERNEL_1X5) -> ClassifierModel:
    """Noise-and-smooth augmentation baseline.

    Every training step adds, for each clean sample in the batch, one
    temporally filtered noisy copy, and optimizes the summed loss.  Noisy
    copies are redrawn once per epoch, deterministically from the seed.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    train_cfg = train_cfg or TrainConfig()
    stacked = dataset.stacked()
    labels = dataset.labels

    def extra_terms(epoch: int, model: ClassifierModel):
        rng = make_rng(train_cfg.seed, "gs-noise", epoch)
        noisy = stacked + rng.normal(0.0, sigma, size=stacked.shape)
        smoothed = np.stack([temporal_gaussian_filter(f, kernel) for f in noisy])
        return [ExtraTerm(smoothed, labels, weight=1.0, aligned=True)]

    return train_classifier(dataset, train_cfg, extra_terms_fn=extra_terms)
