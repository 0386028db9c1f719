"""Guided manifold walk: hard-label attack on a motion classifier.

One iteration alternates three sub-routines, each retrying with a shrinking
step parameter (floor 1e-10) and adapting it multiplicatively:

* random exploration: q orthogonal random candidates around the current
  adversarial motion, scaled by lambda times the distance to the attacked
  motion, with per-joint weighting; lambda follows the 40%/60% rule (shrink
  10% when under 40% of candidates stay adversarial, grow 10% over 60%,
  capped at tau).
* aimed probing: a convex blend toward the attacked motion with step
  beta1, shrinking until the blend stays adversarial, growing on success.
* manifold projection (every ``mp_every`` iterations): project the current
  adversary onto the pose manifold; if the projection loses adversariality,
  probe from the current adversary toward the projection with step beta2.

The stored adversarial motion is adversarial at every iteration boundary;
the walk stops when its distance to the attacked motion drops under
epsilon, a shrink loop exhausts, or the iteration/query budget runs out.
Every hard-label evaluation goes through the handle, so the reported query
count equals the handle's counter delta.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .classifier import ClassifierHandle, LabeledDataset
from .kinematics import inverse_kinematics
from .motion import POSITIONS, Motion, mean_frame_deviation
from .projection import ProjectionConfig, manifold_project
from .rng import make_rng
from .skeleton import Skeleton

__all__ = [
    "UNTARGETED",
    "TARGETED",
    "AttackConfig",
    "AttackResult",
    "TraceRow",
    "PerturbationSample",
    "random_exploration",
    "adapt_lambda",
    "aimed_probe",
    "initialize_adversary",
    "gmw_attack",
    "InitializationFailure",
]

UNTARGETED = "untargeted"
TARGETED = "targeted"

_SHRINK_FLOOR = 1e-10
_SHRINK = 0.9
_GROW = 1.1
_BETA_CAP = 1.0 - 1e-6


class InitializationFailure(RuntimeError):
    """No dataset motion satisfies the attack mode's label condition."""


@dataclass
class AttackConfig:
    mode: str = UNTARGETED
    target_class: int | None = None
    max_iters: int = 500                  # K
    epsilon: float | None = None          # stop distance; None = mode default
    lambda_init: float = 0.1
    beta1_init: float = 0.95
    beta2_init: float = 0.95
    explore_count: int = 5                # q
    lambda_cap: float = 0.4               # tau
    lambda_cap_active: bool = True
    mp_enabled: bool = True
    mp_every: int = 100
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    query_budget: int = 200_000
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (UNTARGETED, TARGETED):
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.mode == TARGETED and self.target_class is None:
            raise ValueError("targeted attacks need a target class")
        if not (0.0 < self.beta1_init < 1.0 and 0.0 < self.beta2_init < 1.0):
            raise ValueError("beta step sizes must start inside (0, 1)")
        if self.lambda_init <= 0.0:
            raise ValueError("lambda must start positive")
        if self.explore_count < 1:
            raise ValueError("need at least one exploration sample")
        if self.epsilon is not None and self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")

    @property
    def stop_epsilon(self) -> float:
        if self.epsilon is not None:
            return self.epsilon
        return 0.1 if self.mode == UNTARGETED else 0.5


@dataclass
class PerturbationSample:
    candidate: np.ndarray    # (n, m) perturbed frames
    raw: np.ndarray          # unscaled normal draw r, flattened
    scaled: np.ndarray       # R = lambda * r/|r| * |x - x'|, flattened
    direction: np.ndarray    # unit vector d from x' toward x, flattened
    delta: np.ndarray        # orthogonalized perturbation, flattened


@dataclass
class TraceRow:
    iteration: int
    distance: float
    lam: float
    beta1: float
    beta2: float
    mp_applied: bool
    adversarial: bool
    queries: int
    note: str = ""


@dataclass
class AttackResult:
    success: bool
    skipped: bool
    reason: str
    original_label: int
    final_label: int | None
    adversarial_motion: Motion | None
    distance: float
    queries: int
    iterations: int
    trace: list
    budget_exhausted: bool = False
    mode: str = UNTARGETED
    target_class: int | None = None
    seed: int = 0


def adapt_lambda(success_rate: float, lam: float, cap: float = 0.4,
                 cap_active: bool = True) -> float:
    """40/60 rule: shrink 10% under 40% success, grow 10% over 60%."""
    if not 0.0 <= success_rate <= 1.0:
        raise ValueError("success rate must lie in [0, 1]")
    if success_rate < 0.4:
        lam = 0.9 * lam
    elif success_rate > 0.6:
        lam = 1.1 * lam
    if cap_active:
        lam = min(lam, cap)
    return lam


def aimed_probe(current: np.ndarray, target: np.ndarray, beta: float) -> np.ndarray:
    """Convex blend from the current adversary toward the target."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("probe step must lie in [0, 1]")
    return current + beta * (target - current)


def random_exploration(current: np.ndarray, attacked: np.ndarray, lam: float,
                       weights: np.ndarray, rng: np.random.Generator,
                       count: int) -> list:
    """Draw ``count`` orthogonal random candidates around the adversary.

    Each candidate is current + W * (R - (R.d) d) with R a normal draw
    rescaled to lambda times the distance to the attacked motion and d the
    unit direction toward it.
    """
    diff = (attacked - current).ravel()
    dist = float(np.linalg.norm(diff))
    if dist == 0.0:
        raise ValueError("exploration is degenerate when the adversary equals the target")
    d = diff / dist
    w = np.repeat(weights[None, :], current.shape[0], axis=0).ravel()
    samples = []
    for _ in range(count):
        raw = rng.standard_normal(diff.size)
        scaled = lam * (raw / np.linalg.norm(raw)) * dist
        delta = scaled - (scaled @ d) * d
        candidate = current + (w * delta).reshape(current.shape)
        samples.append(PerturbationSample(candidate, raw, scaled, d, delta))
    return samples


class _QueryBudgetExceeded(RuntimeError):
    pass


class _Run:
    """Mutable state for one attack; wraps the handle with budget control."""

    def __init__(self, handle: ClassifierHandle, config: AttackConfig,
                 original_label: int):
        self.handle = handle
        self.config = config
        self.original_label = original_label
        self.start_count = handle.query_count

    @property
    def queries(self) -> int:
        return self.handle.query_count - self.start_count

    def label(self, frames: np.ndarray) -> int:
        if self.queries >= self.config.query_budget:
            raise _QueryBudgetExceeded
        return self.handle.label(frames)

    def is_adversarial(self, frames: np.ndarray) -> bool:
        label = self.label(frames)
        if self.config.mode == UNTARGETED:
            return label != self.original_label
        return label == self.config.target_class


def initialize_adversary(attacked: Motion, dataset: LabeledDataset, run: _Run,
                         rng: np.random.Generator):
    """Pick a dataset motion satisfying the label condition, then probe it
    toward the attacked motion with shrinking beta1 until adversarial.

    Returns (initial adversarial frames, updated beta1).
    """
    cfg = run.config
    order = rng.permutation(len(dataset))
    if cfg.mode == TARGETED:
        # try motions whose stored label already matches, then the rest
        hinted = [i for i in order if dataset.labels[i] == cfg.target_class]
        rest = [i for i in order if dataset.labels[i] != cfg.target_class]
        order = hinted + rest
    seed_frames = None
    for i in order:
        frames = dataset.motions[int(i)].frames
        if run.is_adversarial(frames):
            seed_frames = frames
            break
    if seed_frames is None:
        raise InitializationFailure(
            "no dataset motion satisfies the attack's label condition")

    beta1 = cfg.beta1_init
    target = attacked.frames
    while beta1 >= _SHRINK_FLOOR:
        probe = aimed_probe(seed_frames, target, beta1)
        if run.is_adversarial(probe):
            return probe, min(beta1 * _GROW, _BETA_CAP)
        beta1 *= _SHRINK
    # beta has bottomed out: the seed itself is the initial adversary
    return seed_frames.copy(), beta1


def gmw_attack(handle: ClassifierHandle, attacked: Motion, dataset: LabeledDataset,
               skeleton: Skeleton, config: AttackConfig,
               true_label: int | None = None) -> AttackResult:
    """Run the guided manifold walk against one motion.

    Per iteration the exact query sequence is: q exploration candidates
    (one query each, repeated while none is adversarial and lambda stays
    above 1e-10); one probe query per adversarial candidate class
    (untargeted) or one probe of a random adversarial candidate (targeted),
    then shrinking re-probes of the best candidate until adversarial; at
    projection iterations one query for the projected motion plus one per
    beta2 re-probe.  The final motion is re-verified with one extra query.
    """
    if attacked.representation != POSITIONS:
        raise ValueError("the attack operates on position-space motions")
    rng = make_rng(config.seed, "attack")
    result_seed = config.seed

    original_label = handle.label(attacked.frames)
    if true_label is not None and original_label != true_label:
        return AttackResult(
            success=False, skipped=True, reason="already_misclassified",
            original_label=original_label, final_label=original_label,
            adversarial_motion=None, distance=0.0, queries=1, iterations=0,
            trace=[], mode=config.mode, target_class=config.target_class,
            seed=result_seed)
    if config.mode == TARGETED and config.target_class == original_label:
        return AttackResult(
            success=False, skipped=True, reason="target_equals_original",
            original_label=original_label, final_label=original_label,
            adversarial_motion=None, distance=0.0, queries=1, iterations=0,
            trace=[], mode=config.mode, target_class=config.target_class,
            seed=result_seed)

    run = _Run(handle, config, original_label)
    run.start_count = handle.query_count - 1  # count the label query above
    weights = skeleton.position_weights()
    target = attacked.frames
    trace: list = []
    lam = config.lambda_init
    beta1 = config.beta1_init
    beta2 = config.beta2_init
    budget_exhausted = False
    reason = "max_iterations"
    original_angles = None  # computed lazily on the first projection
    current = None
    iterations = 0

    def record(k, mp_applied, note=""):
        trace.append(TraceRow(
            iteration=k, distance=mean_frame_deviation(current, target),
            lam=lam, beta1=beta1, beta2=beta2, mp_applied=mp_applied,
            adversarial=True, queries=run.queries, note=note))

    try:
        current, beta1 = initialize_adversary(attacked, dataset, run, rng)
        record(0, False, note="init")

        for k in range(1, config.max_iters + 1):
            iterations = k
            # (a) random exploration, retrying while no candidate survives
            adversarial_candidates = None
            while True:
                samples = random_exploration(current, target, lam, weights,
                                             rng, config.explore_count)
                labels = [run.label(s.candidate) for s in samples]
                if config.mode == UNTARGETED:
                    flags = [l != original_label for l in labels]
                else:
                    flags = [l == config.target_class for l in labels]
                lam = adapt_lambda(sum(flags) / len(flags), lam,
                                   config.lambda_cap, config.lambda_cap_active)
                if any(flags):
                    adversarial_candidates = [
                        (s, l) for s, l, f in zip(samples, labels, flags) if f]
                    break
                if lam < _SHRINK_FLOOR:
                    break
            if adversarial_candidates is None:
                reason = "lambda_exhausted"
                record(k, False, note=reason)
                break

            # (b) aimed probing toward the attacked motion
            if config.mode == TARGETED:
                pick = adversarial_candidates[int(rng.integers(len(adversarial_candidates)))]
                base = pick[0].candidate
                accepted, beta1, ok = _probe_block(run, base, target, beta1)
            else:
                # one representative per adversarial class, single probe each,
                # keep the closest successful post-probe result
                by_class: dict = {}
                for s, l in adversarial_candidates:
                    by_class.setdefault(l, []).append(s)
                reps = [group[int(rng.integers(len(group)))].candidate
                        for _, group in sorted(by_class.items())]
                best = None
                for rep in reps:
                    probe = aimed_probe(rep, target, beta1)
                    if run.is_adversarial(probe):
                        d = mean_frame_deviation(probe, target)
                        if best is None or d < best[1]:
                            best = (probe, d)
                if best is not None:
                    accepted, ok = best[0], True
                    beta1 = min(beta1 * _GROW, _BETA_CAP)
                else:
                    # no single-shot probe survived: shrink on the closest rep
                    base = min(reps, key=lambda r: mean_frame_deviation(r, target))
                    accepted, beta1, ok = _probe_block(run, base, target,
                                                       beta1 * _SHRINK)
            if ok:
                current = accepted
            else:
                current = accepted  # the exploration winner, still adversarial
                reason = "beta1_exhausted"
                record(k, False, note=reason)
                break

            # (c) manifold projection on cadence
            mp_applied = False
            if config.mp_enabled and k % config.mp_every == 0:
                mp_applied = True
                if original_angles is None:
                    original_angles = inverse_kinematics(
                        skeleton, attacked,
                        max_iter=config.projection.ik_max_iter).angles
                projected, _ = manifold_project(
                    skeleton, Motion(POSITIONS, current), attacked,
                    config.projection, original_angles=original_angles)
                if run.is_adversarial(projected.frames):
                    current = projected.frames
                    beta2 = min(beta2 * _GROW, _BETA_CAP)
                else:
                    b = beta2
                    landed = None
                    while True:
                        b *= _SHRINK
                        if b < _SHRINK_FLOOR:
                            break
                        blend = aimed_probe(current, projected.frames, b)
                        if run.is_adversarial(blend):
                            landed = blend
                            break
                    if landed is not None:
                        current = landed
                        beta2 = min(b * _GROW, _BETA_CAP)
                    else:
                        beta2 = b
                        reason = "beta2_exhausted"
                        record(k, True, note=reason)
                        break

            record(k, mp_applied)
            if mean_frame_deviation(current, target) < config.stop_epsilon:
                reason = "converged"
                break
    except _QueryBudgetExceeded:
        budget_exhausted = True
        reason = "query_budget"
        if current is None:
            return AttackResult(
                success=False, skipped=False, reason="query_budget_during_init",
                original_label=original_label, final_label=None,
                adversarial_motion=None, distance=0.0, queries=run.queries,
                iterations=0, trace=trace, budget_exhausted=True,
                mode=config.mode, target_class=config.target_class,
                seed=result_seed)
    except InitializationFailure:
        return AttackResult(
            success=False, skipped=False, reason="initialization_failure",
            original_label=original_label, final_label=None,
            adversarial_motion=None, distance=0.0, queries=run.queries,
            iterations=0, trace=trace, mode=config.mode,
            target_class=config.target_class, seed=result_seed)

    final_label = handle.label(current)  # re-verify with one extra query
    if config.mode == UNTARGETED:
        success = final_label != original_label
    else:
        success = final_label == config.target_class
    return AttackResult(
        success=success, skipped=False, reason=reason,
        original_label=original_label, final_label=final_label,
        adversarial_motion=Motion(POSITIONS, current.copy(), attacked.frame_rate),
        distance=mean_frame_deviation(current, target),
        queries=run.queries, iterations=iterations, trace=trace,
        budget_exhausted=budget_exhausted, mode=config.mode,
        target_class=config.target_class, seed=result_seed)


def _probe_block(run: _Run, base: np.ndarray, target: np.ndarray, beta: float):
    """Aimed probing with shrink-retry.

    Probes from ``base`` toward ``target`` at the current beta, shrinking
    10% per failure down to the floor.  Returns (motion, new beta, ok);
    on exhaustion the base itself comes back with ok=False.
    """
    b = beta
    while b >= _SHRINK_FLOOR:
        probe = aimed_probe(base, target, b)
        if run.is_adversarial(probe):
            return probe, min(b * _GROW, _BETA_CAP), True
        b *= _SHRINK
    return base, b, False
