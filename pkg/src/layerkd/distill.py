"""Interaction-step loss machinery: adaptive layer matching and the op matrix.

The matching engine pairs each student target layer with a teacher target
layer. The candidate range for student layer i_s is [next_start,
t_l - t_s + i_s] (search range), the start pointer advances past the match
(order preservation), and the pick is sampled from a softmax over the
negated, temperature-scaled divergence values (layer-wise exploration).

All sampling math runs in float64 with explicit left-to-right accumulation
so a step-replay oracle can reproduce losses bit-exactly. The sampled choice
is treated as non-differentiable: gradient flows only through the selected
divergence terms.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .numcore import (
    ConfigError,
    Tensor,
    l2_feature_distance,
    masked_cross_entropy,
    masked_kld,
)

IL_OPS = ("kld", "ce", "l2", "none")
LL_OPS = ("kld", "ce", "l2", "none")
STRATEGIES = ("algorithm1", "random_index", "bottom_k")
KLD_DIRECTIONS = ("teacher_ref", "student_ref")

# brute-force enumeration guard
ORACLE_MAX_LAYERS = 8


@dataclass
class InteractionConfig:
    t_s: int = 1
    t_l: int = 1
    epsilon: float = 1e-6
    scale: float = 2.0
    il_op: str = "kld"
    ll_op: str = "kld"
    ll_weight: float = 1.0
    strategy: str = "algorithm1"
    k: int = 1
    use_search_range: bool = True
    use_order_preservation: bool = True
    use_adaptive_temperature: bool = True
    fixed_temperature: float = 1.0
    kld_direction: str = "teacher_ref"
    train_student_verbalizers: bool = False

    def __post_init__(self):
        if self.t_s < 1 or self.t_l < 1:
            raise ConfigError("t_s and t_l must be positive")
        if self.t_s > self.t_l:
            raise ConfigError(f"t_s ({self.t_s}) must not exceed t_l ({self.t_l})")
        if self.epsilon <= 0 or self.scale <= 0 or self.fixed_temperature <= 0:
            raise ConfigError("epsilon, scale and fixed_temperature must be positive")
        if self.ll_weight < 0:
            raise ConfigError("ll_weight must be nonnegative")
        if self.il_op not in IL_OPS or self.ll_op not in LL_OPS:
            raise ConfigError(f"il_op/ll_op must be one of {IL_OPS}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.kld_direction not in KLD_DIRECTIONS:
            raise ConfigError(f"kld_direction must be one of {KLD_DIRECTIONS}")
        if self.use_order_preservation and not self.use_search_range:
            raise ConfigError("order preservation requires the search range")


@dataclass
class LayerDist:
    """Per-layer distillation view: verbalized logits and/or pre-head features."""

    logits: Tensor | None = None
    features: Tensor | None = None
    mask: np.ndarray | None = None


@dataclass
class MatchStep:
    student_index: int
    search_lo: int
    search_hi: int
    kld_values: list[float]
    probs: list[float]
    matched_index: int
    prev_index: int


@dataclass
class MatchTrace:
    steps: list[MatchStep] = field(default_factory=list)

    def matched_indices(self) -> list[int]:
        return [s.matched_index for s in self.steps]

    def to_jsonl(self) -> str:
        """One structured text line per student step."""
        return "\n".join(json.dumps(asdict(s)) for s in self.steps)

    @classmethod
    def from_jsonl(cls, text: str) -> "MatchTrace":
        steps = [MatchStep(**json.loads(line)) for line in text.splitlines() if line.strip()]
        return cls(steps=steps)


@dataclass
class InteractionResult:
    loss: Tensor | float
    matched_indices: list[int] | None = None
    trace: MatchTrace | None = None


# ----------------------------------------------------------------------
# matching primitives


def search_range(i_s: int, next_start: int, cfg: InteractionConfig) -> tuple[int, int]:
    """Candidate teacher-tap interval [lo, hi] for student step i_s."""
    if not 0 <= i_s < cfg.t_s or next_start < 0:
        raise ConfigError(f"search_range: bad step i_s={i_s}, next_start={next_start}")
    if cfg.use_search_range:
        lo, hi = next_start, cfg.t_l - cfg.t_s + i_s
    else:
        lo, hi = 0, cfg.t_l - 1
    if lo > hi:
        raise RuntimeError(f"internal: empty search range [{lo}, {hi}] from corrupted state")
    return lo, hi


def adaptive_temperature(kld_values, cfg: InteractionConfig) -> float:
    """scale / (max - min + epsilon) over the candidate list, or the fixed value.

    The result multiplies the negated divergences before the softmax, which
    normalizes the softmax input span to `scale` whenever max != min.
    """
    vals = [float(v) for v in kld_values]
    if not vals:
        raise ConfigError("adaptive_temperature: empty kld list")
    if not cfg.use_adaptive_temperature:
        return cfg.fixed_temperature
    return cfg.scale / (max(vals) - min(vals) + cfg.epsilon)


def sampling_distribution(kld_values, temperature: float) -> np.ndarray:
    """softmax over the temperature-scaled, negated divergence values.

    Left-to-right float64 accumulation; max is subtracted before
    exponentiation as an overflow guard.
    """
    if temperature <= 0:
        raise ConfigError("sampling_distribution: temperature must be positive")
    z = [-float(v) * temperature for v in kld_values]
    m = max(z)
    e = [math.exp(zi - m) for zi in z]
    total = 0.0
    for ei in e:
        total += ei
    return np.array([ei / total for ei in e], dtype=np.float64)


def _draw(probs, rng: np.random.Generator) -> int:
    u = rng.random()
    acc = 0.0
    for m, p in enumerate(probs):
        acc += p
        if u < acc:
            return m
    return len(probs) - 1


def _add(loss, term):
    return term if loss is None else loss + term


# ----------------------------------------------------------------------
# strategy loops over a pair-divergence callable
#
# kld_fn(i_s, i_l) -> (float value, term) where the term is what enters the
# loss (a Tensor during training, the plain float in matrix mode).


def _algorithm1_loop(kld_fn, cfg: InteractionConfig, rng) -> tuple:
    loss = None
    next_start = 0
    prev = -1
    steps = []
    for i_s in range(cfg.t_s):
        lo, hi = search_range(i_s, next_start, cfg)
        vals, terms = [], []
        for j in range(lo, hi + 1):
            v, term = kld_fn(i_s, j)
            vals.append(v)
            terms.append(term)
        temp = adaptive_temperature(vals, cfg)
        probs = sampling_distribution(vals, temp)
        m = _draw(probs, rng)
        loss = _add(loss, terms[m])
        matched = lo + m
        steps.append(MatchStep(i_s, lo, hi, vals, probs.tolist(), matched, prev))
        if cfg.use_order_preservation:
            next_start = matched + 1
        prev = matched
    return loss, MatchTrace(steps)


def _random_loop(kld_fn, cfg: InteractionConfig, rng) -> tuple:
    loss = None
    picks = []
    for i_s in range(cfg.t_s):
        terms = [kld_fn(i_s, j)[1] for j in range(cfg.t_l)]
        r = int(rng.integers(cfg.t_l))
        loss = _add(loss, terms[r])
        picks.append(r)
    return loss, picks


def _bottom_k_loop(kld_fn, cfg: InteractionConfig) -> tuple:
    if cfg.k > cfg.t_l:
        raise ConfigError(f"bottom_k: k ({cfg.k}) exceeds t_l ({cfg.t_l})")
    loss = None
    picks = []
    for i_s in range(cfg.t_s):
        vals, terms = [], []
        for j in range(cfg.t_l):
            v, term = kld_fn(i_s, j)
            vals.append(v)
            terms.append(term)
        order = np.argsort(np.asarray(vals), kind="stable")  # ties: lower index wins
        chosen = order[: cfg.k]
        avg = None
        for j in chosen:
            avg = _add(avg, terms[int(j)])
        loss = _add(loss, avg * (1.0 / cfg.k))
        picks.append(int(order[0]))
    return loss, picks


# ----------------------------------------------------------------------
# pair divergence over layer distributions


def _pair_fn(student_dists, teacher_dists, cfg: InteractionConfig):
    if len(student_dists) != cfg.t_s or len(teacher_dists) != cfg.t_l:
        raise ConfigError(
            f"expected {cfg.t_s} student and {cfg.t_l} teacher layer outputs, "
            f"got {len(student_dists)} and {len(teacher_dists)}"
        )
    direction = "first" if cfg.kld_direction == "teacher_ref" else "second"
    cache: dict[tuple[int, int], tuple] = {}

    def fn(i_s, i_l):
        key = (i_s, i_l)
        if key not in cache:
            s, t = student_dists[i_s], teacher_dists[i_l]
            if cfg.il_op == "l2":
                term = l2_feature_distance(s.features, t.features, s.mask)
            else:
                term = masked_kld(t.logits, s.logits, s.mask, direction)
            cache[key] = (float(term.data), term)
        return cache[key]

    return fn


def _matrix_fn(kld_matrix, cfg: InteractionConfig):
    mat = np.asarray(kld_matrix, dtype=np.float64)
    if mat.shape != (cfg.t_s, cfg.t_l):
        raise ConfigError(f"kld matrix shape {mat.shape} does not match (t_s={cfg.t_s}, t_l={cfg.t_l})")
    return lambda i, j: (float(mat[i, j]), float(mat[i, j]))


# ----------------------------------------------------------------------
# public strategy surfaces


def interaction_loss_algorithm1(student_dists, teacher_dists, cfg, rng) -> tuple:
    """Adaptive matching over verbalized layer outputs; returns (loss, trace).

    The loss is the plain sum of the selected per-pair divergences,
    differentiable through them; the sampling choice itself carries no
    gradient.
    """
    return _algorithm1_loop(_pair_fn(student_dists, teacher_dists, cfg), cfg, rng)


def interaction_loss_random(student_dists, teacher_dists, cfg, rng):
    """Uniformly random teacher pick over the full range, no order constraint."""
    loss, _ = _random_loop(_pair_fn(student_dists, teacher_dists, cfg), cfg, rng)
    return loss


def interaction_loss_bottom_k(student_dists, teacher_dists, cfg):
    """Average of the k smallest divergences per student layer; deterministic."""
    loss, _ = _bottom_k_loop(_pair_fn(student_dists, teacher_dists, cfg), cfg)
    return loss


def algorithm1_on_matrix(kld_matrix, cfg, rng) -> tuple:
    """The same matching engine run on a precomputed divergence matrix."""
    return _algorithm1_loop(_matrix_fn(kld_matrix, cfg), cfg, rng)


def random_on_matrix(kld_matrix, cfg, rng) -> tuple:
    return _random_loop(_matrix_fn(kld_matrix, cfg), cfg, rng)


def bottom_k_on_matrix(kld_matrix, cfg) -> tuple:
    return _bottom_k_loop(_matrix_fn(kld_matrix, cfg), cfg)


def brute_force_matching_oracle(kld_matrix, cfg) -> list[tuple[tuple[int, ...], float]]:
    """Enumerate every order-preserving matching with its exact probability.

    Sequences are strictly increasing with j_{i_s} <= t_l - t_s + i_s; the
    probability of each sequence chains the per-step sampling distributions
    of the full matching rule (search range and order preservation on).
    Guarded to t_s, t_l <= 8.
    """
    mat = np.asarray(kld_matrix, dtype=np.float64)
    t_s, t_l = mat.shape
    if t_s > ORACLE_MAX_LAYERS or t_l > ORACLE_MAX_LAYERS:
        raise ConfigError(f"brute force oracle capped at t_s, t_l <= {ORACLE_MAX_LAYERS}")
    if t_s > t_l:
        raise ConfigError(f"t_s ({t_s}) must not exceed t_l ({t_l})")

    results: list[tuple[tuple[int, ...], float]] = []

    def recurse(i_s, next_start, prob, prefix):
        if i_s == t_s:
            results.append((tuple(prefix), prob))
            return
        lo, hi = next_start, t_l - t_s + i_s
        vals = [float(mat[i_s, j]) for j in range(lo, hi + 1)]
        probs = sampling_distribution(vals, adaptive_temperature(vals, cfg))
        for m in range(len(probs)):
            recurse(i_s + 1, lo + m + 1, prob * probs[m], prefix + [lo + m])

    recurse(0, 0, 1.0, [])
    return results


# ----------------------------------------------------------------------
# per-layer operation matrix


def intermediate_op_loss(il_op, student_out: LayerDist, teacher_or_targets, cfg=None):
    """One intermediate-layer term: kld against the matched teacher layer,
    ce against ground-truth targets, l2 between pre-head features, or 0."""
    if il_op == "none":
        return 0.0
    if il_op == "ce":
        return masked_cross_entropy(student_out.logits, teacher_or_targets, student_out.mask)
    if il_op == "kld":
        direction = "first" if cfg is None or cfg.kld_direction == "teacher_ref" else "second"
        return masked_kld(teacher_or_targets.logits, student_out.logits, student_out.mask, direction)
    if il_op == "l2":
        return l2_feature_distance(student_out.features, teacher_or_targets.features, student_out.mask)
    raise ConfigError(f"unknown il_op {il_op!r}")


def last_layer_loss(ll_op, student_final: LayerDist, teacher_final: LayerDist, targets, mask, cfg):
    """Last-layer term scaled by ll_weight; l2 compares pre-head hidden states."""
    if ll_op == "none" or cfg.ll_weight == 0.0:
        return 0.0
    if ll_op == "kld":
        direction = "first" if cfg.kld_direction == "teacher_ref" else "second"
        term = masked_kld(teacher_final.logits, student_final.logits, mask, direction)
    elif ll_op == "ce":
        term = masked_cross_entropy(student_final.logits, targets, mask)
    elif ll_op == "l2":
        term = l2_feature_distance(student_final.features, teacher_final.features, mask)
    else:
        raise ConfigError(f"unknown ll_op {ll_op!r}")
    return term * cfg.ll_weight


def interaction_objective(
    student_dists,
    teacher_dists,
    student_final: LayerDist,
    teacher_final: LayerDist,
    targets,
    mask,
    cfg: InteractionConfig,
    rng,
) -> InteractionResult:
    """Full interaction-step objective:
    (1 / t_s) * sum of matched intermediate terms + ll_weight * last-layer term.
    """
    trace = None
    matched = None
    inter = None
    if cfg.il_op == "ce":
        # teacher-free per-layer term; matching would not change the loss
        for s in student_dists:
            inter = _add(inter, intermediate_op_loss("ce", s, targets))
    elif cfg.il_op != "none":
        pair = _pair_fn(student_dists, teacher_dists, cfg)
        if cfg.strategy == "algorithm1":
            inter, trace = _algorithm1_loop(pair, cfg, rng)
            matched = trace.matched_indices()
        elif cfg.strategy == "random_index":
            inter, matched = _random_loop(pair, cfg, rng)
        else:
            inter, matched = _bottom_k_loop(pair, cfg)
    total = 0.0 if inter is None else inter * (1.0 / cfg.t_s)
    ll = last_layer_loss(cfg.ll_op, student_final, teacher_final, targets, mask, cfg)
    if isinstance(total, float) and isinstance(ll, float):
        total = total + ll
    elif isinstance(total, float):
        total = ll + total
    else:
        total = total + ll
    return InteractionResult(loss=total, matched_indices=matched, trace=trace)
