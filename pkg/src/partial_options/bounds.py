"""Value-loss, planning-loss and sample-complexity bounds for partial option models.

The formula evaluators are closed forms. The ``certify_*`` functions check the
inequalities empirically on random small SMDPs with non-negative rewards, where
everything can be solved exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .affordances import AffordanceSet, Intent, zeta_table
from .mdp_core import TabularMDP, dumps_mdp, random_mdp
from .option_models import OptionModel, empirical_from_samples, exact_option_model, sample_option_outcomes
from .options import Option, random_options
from .planner import smdp_qvi

__all__ = [
    "InfeasibleEpsilon",
    "DiscountSummary",
    "discount_summary",
    "lemma1_constants",
    "value_loss_bound",
    "planning_loss_bound",
    "sample_complexity",
    "policy_class_size",
    "BoundReport",
    "bound_report",
    "perturbed_intents",
    "smdp_policy_value",
    "RandomSMDP",
    "random_smdp",
    "certify_value_loss",
    "certify_planning_loss",
    "certify_sample_complexity",
    "estimator_error_slope",
    "CertificationReport",
    "certify_bounds",
]


class InfeasibleEpsilon(ValueError):
    def __init__(self, eps: float, lower_bound: float):
        super().__init__(f"eps={eps!r} is below the feasible lower bound {lower_bound!r}")
        self.eps = eps
        self.lower_bound = lower_bound


@dataclass(frozen=True)
class DiscountSummary:
    gamma_bar_options: float
    gamma_bar_intents: float
    r_max: float
    v_max: float

    @property
    def gamma_bar(self) -> float:
        return max(self.gamma_bar_options, self.gamma_bar_intents)


def _max_mass(model) -> float:
    return float(np.max(np.where(model.defined, model.mass(), 0.0)))


def discount_summary(model: OptionModel, intent_model: OptionModel | None = None) -> DiscountSummary:
    """Largest expected option discount under the options and (if given) the intents."""
    g_o = _max_mass(model)
    g_i = g_o if intent_model is None else _max_mass(intent_model)
    for g in (g_o, g_i):
        if not 0.0 < g < 1.0:
            raise ValueError(f"expected option discount {g!r} outside (0, 1)")
    r_max = float(np.max(np.where(model.defined, model.reward, -np.inf)))
    return DiscountSummary(g_o, g_i, r_max, r_max / (1.0 - g_o))


def lemma1_constants(intents: Sequence[Intent], model: OptionModel, return_bound: float,
                     terminal_mask=None) -> tuple[float, float]:
    """(ζ_P, ζ_R): the worst intent deviation and that times the return bound."""
    if not intents:
        raise ValueError("no intents given")
    zeta_p = float(np.nanmax(zeta_table(model, intents, terminal_mask)))
    return zeta_p, zeta_p * return_bound


def _check_gammas(*gs: float) -> None:
    for g in gs:
        if not 0.0 <= g < 1.0:
            raise ValueError(f"discount {g!r} must lie in [0, 1)")


def value_loss_bound(kind: str, summary: DiscountSummary, zeta_p: float, zeta_r: float,
                     n_states: int, gamma: float) -> float:
    g_i, g_o, R = summary.gamma_bar_intents, summary.gamma_bar_options, summary.r_max
    _check_gammas(g_i, g_o, gamma)
    if kind == "theorem1":
        horizon = gamma / (1.0 - gamma)
        return (zeta_r / (1.0 - g_i)
                + 2.0 * R * horizon * n_states * zeta_p / ((1.0 - g_i) * (1.0 - g_o)))
    if kind == "corollary1":
        g = summary.gamma_bar
        return 2.0 * zeta_p * g * R / (1.0 - g) ** 2
    raise ValueError(f"unknown value-loss bound {kind!r}")


def _confidence(n: int, n_afforded: int, n_policies: int | float, delta: float) -> float:
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    log_term = math.log(2) + math.log(n_afforded) + math.log(n_policies) - math.log(delta)
    return math.sqrt(log_term / (2 * n))


def planning_loss_bound(kind: str, summary: DiscountSummary, zeta_p: float, zeta_r: float,
                        n_states: int, gamma: float, n: int, n_afforded: int,
                        n_policies: int | float, delta: float) -> float:
    g_i, g_o, R = summary.gamma_bar_intents, summary.gamma_bar_options, summary.r_max
    _check_gammas(g_i, g_o, gamma)
    conf = _confidence(n, n_afforded, n_policies, delta)
    if kind == "theorem2":
        horizon = gamma / (1.0 - gamma)
        return (5.0 * zeta_r / (1.0 - g_i)
                + 2.0 * R / ((1.0 - g_i) * (1.0 - g_o)) * (2.0 * horizon * n_states * zeta_p + conf))
    if kind == "corollary3":
        g = summary.gamma_bar
        return 2.0 * R / (1.0 - g) ** 2 * (2.0 * g * zeta_p + conf)
    raise ValueError(f"unknown planning-loss bound {kind!r}")


def sample_complexity(kind: str, eps: float, delta: float, zeta: float, gamma_bar: float,
                      count: int) -> tuple[int, int]:
    """Samples per pair ``N`` and QVI epochs ``K`` for an eps-accurate Q.

    ``count`` is the number of afforded pairs (partial models) or ``|S||O|``
    (full models). Partial models need ``eps >= 2 ζ γ̄ / (1 - γ̄)^2``.
    """
    if not 0.0 < gamma_bar < 1.0:
        raise ValueError("gamma_bar must lie in (0, 1)")
    if eps <= 0 or not 0.0 < delta < 1.0 or count < 1:
        raise ValueError("need eps > 0, 0 < delta < 1 and count >= 1")
    g = gamma_bar
    n = math.ceil(4.0 / ((1.0 - g) ** 4 * eps ** 2) * math.log(2.0 * count / delta))
    if kind == "theorem3_partial":
        lower = 2.0 * zeta * g / (1.0 - g) ** 2
        slack = eps * (1.0 - g) ** 2 - 2.0 * zeta * g
        if eps < lower or slack <= 0:
            raise InfeasibleEpsilon(eps, lower)
        k = math.ceil(math.log(slack / (2.0 * (1.0 - g))) / math.log(g))
    elif kind == "theorem4_full":
        k = math.ceil(math.log(eps * (1.0 - g)) / math.log(g))
    else:
        raise ValueError(f"unknown sample-complexity bound {kind!r}")
    return n, max(k, 1)


def policy_class_size(affordances: AffordanceSet | np.ndarray, terminal_mask=None) -> int:
    """Number of deterministic policies choosing only afforded options: prod_s |AF(s)|."""
    m = affordances.membership if isinstance(affordances, AffordanceSet) else np.asarray(affordances, bool)
    counts = m.sum(axis=1)
    if terminal_mask is not None:
        counts = counts[~np.asarray(terminal_mask, bool)]
    out = 1
    for c in counts.tolist():
        out *= max(int(c), 1)
    return out


# --- reports ---------------------------------------------------------------------

@dataclass
class BoundReport:
    zeta_p: float
    zeta_r: float
    summary: DiscountSummary
    n_states: int
    gamma: float
    n: int
    delta: float
    n_afforded: int
    log_n_policies: float
    eps: float
    theorem1: float
    corollary1: float
    theorem2: float
    corollary3: float
    theorem3: dict = field(default_factory=dict)
    theorem4: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = []

        def emit(d: dict, indent: int = 0):
            for key, value in d.items():
                if isinstance(value, dict):
                    lines.append(" " * indent + f"{key}:")
                    emit(value, indent + 2)
                else:
                    lines.append(" " * indent + f"{key}: {value}")

        emit(self.to_dict())
        return "\n".join(lines) + "\n"


def _sample_complexity_entry(kind, eps, delta, zeta, g, count) -> dict:
    try:
        n, k = sample_complexity(kind, eps, delta, zeta, g, count)
        return {"N": n, "K": k}
    except InfeasibleEpsilon as err:
        return {"infeasible": True, "eps_lower_bound": err.lower_bound}


def bound_report(model: OptionModel, intents: Sequence[Intent], affordances: AffordanceSet, gamma: float,
                 return_bound: float, n: int = 1000, delta: float = 0.05, eps: float = 0.5,
                 intent_model: OptionModel | None = None, terminal_mask=None) -> BoundReport:
    summary = discount_summary(model, intent_model)
    zeta_p, zeta_r = lemma1_constants(intents, model, return_bound, terminal_mask)
    n_af = affordances.size
    n_pi = policy_class_size(affordances, terminal_mask)
    S = model.n_states
    g = summary.gamma_bar
    return BoundReport(
        zeta_p=zeta_p, zeta_r=zeta_r, summary=summary, n_states=S, gamma=gamma, n=n, delta=delta,
        n_afforded=n_af, log_n_policies=math.log(n_pi), eps=eps,
        theorem1=value_loss_bound("theorem1", summary, zeta_p, zeta_r, S, gamma),
        corollary1=value_loss_bound("corollary1", summary, zeta_p, zeta_r, S, gamma),
        theorem2=planning_loss_bound("theorem2", summary, zeta_p, zeta_r, S, gamma, n, n_af, n_pi, delta),
        corollary3=planning_loss_bound("corollary3", summary, zeta_p, zeta_r, S, gamma, n, n_af, n_pi, delta),
        theorem3=_sample_complexity_entry("theorem3_partial", eps, delta, zeta_p, g, n_af),
        theorem4=_sample_complexity_entry("theorem4_full", eps, delta, zeta_p, g, S * model.n_options),
    )


# --- random instances ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RandomSMDP:
    mdp: TabularMDP
    options: list[Option]
    model: OptionModel


def random_smdp(rng: np.random.Generator, n_states: int = 6, n_actions: int = 3, n_options: int = 3,
                gamma: float = 0.9, reward_max: float = 1.0,
                beta_range: tuple[float, float] = (0.2, 1.0)) -> RandomSMDP:
    mdp = random_mdp(n_states, n_actions, gamma, rng, reward_range=(0.0, reward_max))
    options = random_options(mdp, n_options, rng, beta_range)
    return RandomSMDP(mdp, options, exact_option_model(mdp, options))


def smdp_policy_value(model, policy: np.ndarray) -> np.ndarray:
    """Exact value of a deterministic option policy by a dense linear solve."""
    S = model.n_states
    P = model.dense() if hasattr(model, "dense") else None
    idx = np.arange(S)
    P_pi = P[idx, policy]
    r_pi = model.reward[idx, policy]
    return np.linalg.solve(np.eye(S) - P_pi, r_pi)


def perturbed_intents(model: OptionModel, zeta: float, rng: np.random.Generator) -> tuple[list[Intent], OptionModel]:
    """Intents at total-variation distance ``zeta`` from every exact model row.

    Each row becomes ``(1 - lam) p + lam q`` with ``q`` a random
    sub-distribution of the same mass, so expected discounts are unchanged.
    Where no such ``q`` is far enough away, the largest reachable distance is
    used instead. Returns the intents and the corresponding intent model.
    """
    dense = model.dense()
    S, O, _ = dense.shape
    out = dense.copy()
    for s in range(S):
        for o in range(O):
            p = dense[s, o]
            if zeta == 0:
                continue
            m = p.sum()
            q = rng.dirichlet(np.full(S, 0.3)) * m
            gap = np.abs(q - p).sum()
            if gap < zeta:
                # a point mass on the least likely state is as far as we can go
                q = np.zeros(S)
                q[np.argmin(p)] = m
                gap = np.abs(q - p).sum()
            lam = min(1.0, zeta / gap) if gap > 0 else 0.0
            out[s, o] = (1 - lam) * p + lam * q
    intents = [Intent(option=o, distribution=out[:, o, :], label=f"perturbed-{o}") for o in range(O)]
    intent_model = OptionModel.from_dense(out, model.R, model.L, model.gamma, "intent", model.defined)
    return intents, intent_model


def _optimal(model, mask=None) -> tuple[np.ndarray, np.ndarray]:
    mask = np.ones(model.reward.shape, bool) if mask is None else mask
    q = smdp_qvi(model, mask, epochs=1_000_000, tol=1e-13)
    policy = np.argmax(np.where(mask, q.values, -np.inf), axis=1)
    return q.values, policy


@dataclass
class TrialRecord:
    trial: int
    kind: str
    measured: float
    bound: float
    holds: bool
    extra: dict = field(default_factory=dict)
    instance: str = ""


def certify_value_loss(trials: int, rng: np.random.Generator, zetas: Sequence[float] = (0.0, 0.05, 0.2),
                       **smdp_kw) -> list[TrialRecord]:
    """Plan in the intent model, act in the true one, compare with both value-loss bounds."""
    out = []
    for t in range(trials):
        inst = random_smdp(rng, **smdp_kw)
        model = inst.model
        q_star, pi_star = _optimal(model)
        v_star = smdp_policy_value(model, pi_star)
        for zeta in zetas:
            intents, intent_model = perturbed_intents(model, zeta, rng)
            _, pi_i = _optimal(intent_model)
            loss = float(np.max(np.abs(smdp_policy_value(model, pi_i) - v_star)))
            summary = discount_summary(model, intent_model)
            g_ret = float(inst.mdp.reward.max()) / (1 - inst.mdp.gamma)
            zeta_p, zeta_r = lemma1_constants(intents, model, g_ret)
            c1 = value_loss_bound("corollary1", summary, zeta_p, zeta_r, model.n_states, inst.mdp.gamma)
            t1 = value_loss_bound("theorem1", summary, zeta_p, zeta_r, model.n_states, inst.mdp.gamma)
            extra = {"zeta_target": zeta, "zeta_p": zeta_p, "theorem1": t1}
            dump = "" if loss <= min(c1, t1) + 1e-12 else dumps_mdp(inst.mdp)
            out.append(TrialRecord(t, "corollary1", loss, c1, loss <= c1 + 1e-12, extra, dump))
            out.append(TrialRecord(t, "theorem1", loss, t1, loss <= t1 + 1e-12, dict(extra), dump))
    return out


def certify_planning_loss(trials: int, rng: np.random.Generator, n: int = 100, delta: float = 0.05,
                          **smdp_kw) -> list[TrialRecord]:
    """Certainty-equivalence planning from ``n`` samples per pair checked against the ``corollary3`` and ``theorem2`` bounds."""
    out = []
    for t in range(trials):
        inst = random_smdp(rng, **smdp_kw)
        model, mdp = inst.model, inst.mdp
        S, O = model.n_states, model.n_options
        _, pi_star = _optimal(model)
        v_star = smdp_policy_value(model, pi_star)
        est = _estimate(inst, n, rng)
        _, pi_hat = _optimal(est)
        loss = float(np.max(np.abs(smdp_policy_value(model, pi_hat) - v_star)))
        summary = discount_summary(model)
        n_pi = O ** S
        c3 = planning_loss_bound("corollary3", summary, 0.0, 0.0, S, mdp.gamma, n, S * O, n_pi, delta)
        t2 = planning_loss_bound("theorem2", summary, 0.0, 0.0, S, mdp.gamma, n, S * O, n_pi, delta)
        dump = "" if loss <= c3 else dumps_mdp(mdp)
        out.append(TrialRecord(t, "corollary3", loss, c3, loss <= c3, {"n": n}, dump))
        out.append(TrialRecord(t, "theorem2", loss, t2, loss <= t2, {"n": n}, dump))
    return out


def _estimate(inst: RandomSMDP, n: int, rng: np.random.Generator) -> OptionModel:
    S, O = inst.model.n_states, inst.model.n_options
    parts = {k: [] for k in ("start", "option", "end", "duration", "disc")}
    starts = np.repeat(np.arange(S), n)
    for o, opt in enumerate(inst.options):
        end, dur, disc, _, _ = sample_option_outcomes(inst.mdp, opt, starts, rng, t_max=10_000)
        parts["start"].append(starts)
        parts["option"].append(np.full(len(starts), o))
        parts["end"].append(end)
        parts["duration"].append(dur)
        parts["disc"].append(disc)
    cat = {k: np.concatenate(v) for k, v in parts.items()}
    return empirical_from_samples(S, O, inst.mdp.gamma, cat["start"], cat["option"], cat["end"],
                                  cat["duration"], cat["disc"])


def certify_sample_complexity(trials: int, rng: np.random.Generator, eps: float = 0.5, delta: float = 0.05,
                              gamma: float = 0.5, reward_max: float = 0.5,
                              **smdp_kw) -> list[TrialRecord]:
    """Q-value iteration on an estimated model with the closed-form N and K.

    ``||Q_K - Q*||`` is compared with ``eps``. Rewards lie in
    ``[0, reward_max]`` so that option rewards stay below
    ``reward_max / (1 - gamma)``.
    """
    out = []
    for t in range(trials):
        inst = random_smdp(rng, gamma=gamma, reward_max=reward_max, **smdp_kw)
        model = inst.model
        S, O = model.n_states, model.n_options
        g = discount_summary(model).gamma_bar_options
        n, k = sample_complexity("theorem3_partial", eps, delta, 0.0, g, S * O)
        q_star, _ = _optimal(model)
        est = _estimate(inst, n, rng)
        q_k = smdp_qvi(est, np.ones((S, O), bool), epochs=k, tol=0.0).values
        err = float(np.max(np.abs(q_k - q_star)))
        out.append(TrialRecord(t, "theorem3", err, eps, err <= eps, {"N": n, "K": k, "gamma_bar": g}))
    return out


def estimator_error_slope(rng: np.random.Generator, sizes: Sequence[int] = (100, 1000, 10000),
                          trials: int = 20, **smdp_kw) -> tuple[float, list[float]]:
    """Log-log slope of the mean sup-norm error of the count estimator against N."""
    errors = []
    instances = [random_smdp(rng, **smdp_kw) for _ in range(trials)]
    for n in sizes:
        errs = [np.max(np.abs(_estimate(inst, n, rng).dense() - inst.model.dense())) for inst in instances]
        errors.append(float(np.mean(errs)))
    slope = float(np.polyfit(np.log(sizes), np.log(errors), 1)[0])
    return slope, errors


@dataclass
class CertificationReport:
    records: list[TrialRecord]

    def pass_rates(self) -> dict[str, float]:
        kinds = sorted({r.kind for r in self.records})
        return {k: float(np.mean([r.holds for r in self.records if r.kind == k])) for k in kinds}

    def failures(self) -> list[TrialRecord]:
        return [r for r in self.records if not r.holds]

    def to_text(self) -> str:
        lines = ["pass_rates:"]
        lines += [f"  {k}: {v:.4f}" for k, v in self.pass_rates().items()]
        lines.append(f"failures: {len(self.failures())}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"pass_rates": self.pass_rates(),
                           "records": [asdict(r) for r in self.records]}, indent=2)


def certify_bounds(trials: int, rng: np.random.Generator, delta: float = 0.05, n: int = 100) -> CertificationReport:
    if trials < 1:
        raise ValueError("trials must be at least 1")
    records = certify_value_loss(trials, rng)
    records += certify_planning_loss(trials, rng, n=n, delta=delta)
    records += certify_sample_complexity(trials, rng, delta=delta)
    return CertificationReport(records)
