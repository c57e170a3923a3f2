"""Monte-Carlo surrogate-gradient estimation with variance reduction.

The adjusted estimator decomposes by controller class (other classes held
at the policy mode), clips scores through a tanh around the mode's cost,
and for discrete classes samples only unary modifications of the mode.
An exhaustive-enumeration oracle covers small decision spaces for
verification.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .h2mg import (
    CONTROLLER_CLASSES,
    D_BINARY,
    D_CONTINUOUS,
    Decision,
    H2MGContext,
    H2MGError,
    SCHEMA,
    SurrogateDecision,
)
from . import policy
from .policy import PolicyConfig

DEFAULT_SAMPLES: dict[str, int] = {
    "line_controller": 8,
    "rtc_controller": 8,
    "shunt_controller": 16,
    "svr_controller": 16,
}

#: An oracle maps (context, decision) to an object with .total and .converged.
Oracle = Callable[[H2MGContext, Decision], object]


@dataclass(frozen=True)
class EstimatorConfig:
    beta: float = 1e-4
    tau: float = 0.1
    samples: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_SAMPLES))
    prohibitive_cost: float = 100.0

    def __post_init__(self):
        # beta 0 switches the score term off entirely (entropy-only descent)
        if self.beta < 0 or self.tau <= 0:
            raise ValueError("beta must be nonnegative and tau positive")


@dataclass
class GradEstimate:
    """Surrogate gradient, shaped exactly like the paired SurrogateDecision."""

    grads: dict[str, dict[str, np.ndarray]]
    f_ref: float
    converged: bool

    def norm(self, class_name: str) -> float:
        per_edge = self.grads.get(class_name, {})
        if not per_edge:
            return 0.0
        return float(math.sqrt(sum(float(g @ g) for g in per_edge.values())))

    def zero_like(self) -> "GradEstimate":
        return GradEstimate(
            {c: {e: np.zeros_like(g) for e, g in per.items()}
             for c, per in self.grads.items()},
            self.f_ref, self.converged)


def clip_score(f_i: float, f_ref: float, tau: float) -> float:
    """Squash a score difference into (-1, 1); saturates on prohibitive costs."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return math.tanh((f_i - f_ref) / tau)


def _zero_grads(z: SurrogateDecision) -> dict[str, dict[str, np.ndarray]]:
    return {c: {e: np.zeros_like(v) for e, v in per.items()}
            for c, per in z.values.items()}


def _score(oracle: Oracle, x: H2MGContext, y: Decision, prohibitive: float) -> float:
    """Oracle score; failures never abort the estimate, they cost the maximum.

    Structural errors (mispaired decisions, broken contexts) are caller
    bugs and do propagate.
    """
    try:
        res = oracle(x, y)
    except H2MGError:
        raise
    except Exception:
        return prohibitive
    return float(res.total)


def estimate_gradient(x: H2MGContext, z: SurrogateDecision, cfg: EstimatorConfig,
                      oracle: Oracle, rng: np.random.Generator,
                      policy_cfg: PolicyConfig = PolicyConfig(),
                      map_fn: Callable = map) -> GradEstimate:
    """Adjusted Monte-Carlo estimate of the surrogate objective gradient.

    When the mode decision itself does not converge no improvement
    direction is defined and the estimate is exactly zero, flagged.

    ``map_fn`` evaluates the per-sample oracle calls; any order-preserving
    map (e.g. an executor's) is valid since scores reduce in sample order.
    """
    y_mp = policy.most_probable(z)
    try:
        ref = oracle(x, y_mp)
        ref_converged, f_ref = bool(ref.converged), float(ref.total)
    except H2MGError:
        raise
    except Exception:
        ref_converged, f_ref = False, cfg.prohibitive_cost
    if not ref_converged:
        return GradEstimate(_zero_grads(z), f_ref, False)

    # Draw every sample decision first, in canonical class order, so the
    # stream consumption is independent of oracle behavior.
    plan: list[tuple[str, list[Decision]]] = []
    for cname in CONTROLLER_CLASSES:
        per_edge = z.values.get(cname)
        if not per_edge:
            continue
        n = int(cfg.samples.get(cname, 8))
        ids = sorted(per_edge)
        decisions: list[Decision] = []
        if SCHEMA[cname].decision_kind == D_CONTINUOUS:
            for _ in range(n):
                y_i = y_mp
                for eid in ids:
                    y_i = y_i.replace(cname, eid,
                                      policy.sample(cname, per_edge[eid], rng,
                                                    policy_cfg))
                decisions.append(y_i)
        else:
            neighbors = [(eid, alt) for eid in ids
                         for alt in policy.unary_neighbors(
                             cname, y_mp.get(cname, eid))]
            picks = rng.integers(0, len(neighbors), size=n)
            for k in picks:
                eid, alt = neighbors[int(k)]
                decisions.append(y_mp.replace(cname, eid, alt))
        plan.append((cname, decisions))

    flat = [y_i for _, decisions in plan for y_i in decisions]
    scores = list(map_fn(
        lambda y_i: _score(oracle, x, y_i, cfg.prohibitive_cost), flat))

    grads = _zero_grads(z)
    pos = 0
    for cname, decisions in plan:
        n = len(decisions)
        class_scores = scores[pos:pos + n]
        pos += n
        per_edge = z.values[cname]
        for eid, z_e in per_edge.items():
            acc = np.zeros_like(z_e)
            for y_i, f_i in zip(decisions, class_scores):
                f_clip = clip_score(f_i, f_ref, cfg.tau)
                acc += f_clip * policy.log_prob_grad(
                    cname, y_i.get(cname, eid), z_e, policy_cfg)
            grads[cname][eid] = (-policy.entropy_grad(cname, z_e, policy_cfg)
                                 + cfg.beta / n * acc)
    return GradEstimate(grads, f_ref, True)


def raw_gradient_estimate(x: H2MGContext, z: SurrogateDecision, beta: float,
                          n_samples: int, oracle: Oracle,
                          rng: np.random.Generator,
                          policy_cfg: PolicyConfig = PolicyConfig(),
                          prohibitive_cost: float = 100.0,
                          ) -> tuple[dict[str, dict[str, np.ndarray]],
                                     dict[str, dict[str, np.ndarray]]]:
    """Unadjusted score-function estimator: joint sampling, raw scores.

    Returns (gradient, per-coordinate standard error of the expectation
    term).  Mainly a verification tool against the enumeration oracle; the
    training loop uses :func:`estimate_gradient`.
    """
    classes = [(c, sorted(per)) for c, per in z.values.items()]
    sums = _zero_grads(z)
    sq_sums = _zero_grads(z)
    for _ in range(n_samples):
        y_i = {}
        for cname, ids in classes:
            y_i[cname] = {eid: policy.sample(cname, z.get(cname, eid), rng,
                                             policy_cfg)
                          for eid in ids}
        y_dec = Decision(y_i)
        f_i = _score(oracle, x, y_dec, prohibitive_cost)
        for cname, ids in classes:
            for eid in ids:
                term = f_i * policy.log_prob_grad(cname, y_i[cname][eid],
                                                  z.get(cname, eid), policy_cfg)
                sums[cname][eid] += term
                sq_sums[cname][eid] += term * term
    grads = _zero_grads(z)
    stderr = _zero_grads(z)
    for cname, ids in classes:
        for eid in ids:
            mean = sums[cname][eid] / n_samples
            var = np.maximum(sq_sums[cname][eid] / n_samples - mean ** 2, 0.0)
            grads[cname][eid] = (-policy.entropy_grad(cname, z.get(cname, eid),
                                                      policy_cfg)
                                 + beta * mean)
            stderr[cname][eid] = beta * np.sqrt(var / n_samples)
    return grads, stderr


@dataclass(frozen=True)
class OracleGradient:
    grads: dict[str, dict[str, np.ndarray]]
    z_beta: float
    kl: float
    expected_cost: float


def exact_gradient_oracle(x: H2MGContext, z: SurrogateDecision, beta: float,
                          oracle: Oracle,
                          policy_cfg: PolicyConfig = PolicyConfig(),
                          max_space: int = 4096) -> OracleGradient:
    """Exact gradient of the surrogate objective by full enumeration.

    Discrete controllers enumerate their joint decision space; continuous
    (svr) controllers are held at their mode, where their score gradient
    and entropy gradient both vanish.  Also returns the Boltzmann partition
    value and the exact divergence over the enumerated space.
    """
    discrete: list[tuple[str, str, list]] = []
    fixed: dict[str, dict[str, float]] = {}
    for cname, per_edge in z.values.items():
        if SCHEMA[cname].decision_kind == D_CONTINUOUS:
            fixed[cname] = {eid: float(v[0]) for eid, v in per_edge.items()}
            continue
        for eid in sorted(per_edge):
            domain = [0, 1] if SCHEMA[cname].decision_kind == D_BINARY \
                else list(range(4))
            discrete.append((cname, eid, domain))
    space = 1
    for _, _, domain in discrete:
        space *= len(domain)
        if space > max_space:
            raise ValueError(f"decision space exceeds {max_space}")

    grads = _zero_grads(z)
    z_beta = 0.0
    kl_h = 0.0
    expected_cost = 0.0
    for combo in itertools.product(*[d for _, _, d in discrete]) \
            if discrete else [()]:
        values: dict[str, dict] = {c: dict(v) for c, v in fixed.items()}
        logp = 0.0
        for (cname, eid, _), val in zip(discrete, combo):
            values.setdefault(cname, {})[eid] = val
            logp += policy.log_prob(cname, val, z.get(cname, eid), policy_cfg)
        y = Decision(values)
        p = math.exp(logp)
        f = float(oracle(x, y).total)
        z_beta += math.exp(-beta * f)
        kl_h += p * logp
        expected_cost += p * f
        for (cname, eid, _), val in zip(discrete, combo):
            grads[cname][eid] += beta * p * f * policy.log_prob_grad(
                cname, val, z.get(cname, eid), policy_cfg)
    for cname, per_edge in z.values.items():
        for eid, z_e in per_edge.items():
            grads[cname][eid] -= policy.entropy_grad(cname, z_e, policy_cfg)
    kl = kl_h + beta * expected_cost + math.log(z_beta) if discrete else 0.0
    return OracleGradient(grads, z_beta, kl, expected_cost)
