"""Affordance-restricted SMDP Q-value iteration and success-rate evaluation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .affordances import AffordanceSet, LivenessError
from .mdp_core import TabularMDP
from .option_models import MissingEntryError
from .options import DEFAULT_T_MAX, Option, execute_option

__all__ = [
    "OptionQFunction",
    "smdp_qvi",
    "policy_over_options",
    "evaluate_success",
    "success_by_start",
    "epochs_for_accuracy",
    "NO_OPTION",
]

NO_OPTION = -1


@dataclass(frozen=True)
class OptionQFunction:
    """Q over (state, option); entries outside ``defined`` are NaN and never read."""

    values: np.ndarray
    defined: np.ndarray
    state_values: np.ndarray
    iterations: int
    residual: float
    contraction: float  # largest observed ratio of successive sup-norm changes

    def q(self, state: int, option: int) -> float:
        if not self.defined[state, option]:
            raise KeyError(f"Q({state}, {option}) is undefined")
        return float(self.values[state, option])


def epochs_for_accuracy(eps: float, gamma_bar: float) -> int:
    """Smallest K with ``gamma_bar^K <= eps (1 - gamma_bar)``."""
    if not (0 < gamma_bar < 1 and eps > 0):
        raise ValueError("need 0 < gamma_bar < 1 and eps > 0")
    return max(1, math.ceil(math.log(eps * (1 - gamma_bar)) / math.log(gamma_bar)))


def smdp_qvi(model, affordances: AffordanceSet | np.ndarray, epochs: int = 100_000, tol: float = 1e-10,
             terminal_mask: np.ndarray | None = None, allow_empty: bool = False,
             empty_value: float = 0.0) -> OptionQFunction:
    """Jacobi SMDP Q-value iteration from ``V_0 = 0``.

    ``Q_k(s, o) = r(s, o) + sum_s' P(s'|s, o) V_{k-1}(s')`` on afforded pairs,
    ``V_k(s)`` the max over afforded options, and ``V = 0`` at terminal states.
    Stops after ``epochs`` sweeps or once ``||V_k - V_{k-1}|| <= tol``.

    Every afforded pair must be defined in ``model``. A non-terminal state with
    no afforded option is an error unless ``allow_empty``, in which case its
    value is pinned to ``empty_value``.
    """
    mask = affordances.membership if isinstance(affordances, AffordanceSet) else np.asarray(affordances, bool)
    S, O = model.reward.shape
    if mask.shape != (S, O):
        raise ValueError(f"affordance table shape {mask.shape} does not match model {(S, O)}")
    terminal = np.zeros(S, bool) if terminal_mask is None else np.asarray(terminal_mask, bool)
    mask = mask & ~terminal[:, None]
    missing = mask & ~model.defined
    if missing.any():
        raise MissingEntryError(np.argwhere(missing))
    empty = ~mask.any(axis=1) & ~terminal
    if empty.any() and not allow_empty:
        raise LivenessError(np.flatnonzero(empty))
    if epochs < 1:
        raise ValueError("epochs must be positive")

    reward = np.where(mask, model.reward, 0.0)
    V = np.zeros(S)
    V[empty] = empty_value
    Q = np.full((S, O), np.nan)
    has = mask.any(axis=1)
    prev_delta = None
    ratio = 0.0
    delta = np.inf
    it = 0
    for it in range(1, epochs + 1):
        Q = reward + model.expected_next(V)
        Qm = np.where(mask, Q, -np.inf)
        V_new = np.where(has, Qm.max(axis=1), V)
        delta = float(np.max(np.abs(V_new - V)))
        if prev_delta:
            ratio = max(ratio, delta / prev_delta)
        prev_delta = delta
        V = V_new
        if delta <= tol:
            break
    Q = np.where(mask, Q, np.nan)
    return OptionQFunction(Q, mask, V, it, delta, ratio)


def policy_over_options(q: OptionQFunction, affordances: AffordanceSet | np.ndarray | None = None,
                        terminal_mask: np.ndarray | None = None,
                        fallback: AffordanceSet | np.ndarray | None = None) -> np.ndarray:
    """Greedy afforded option per state, lowest index on ties.

    Terminal states get :data:`NO_OPTION`. States where ``q`` has no afforded
    entry take the lowest-index option of ``fallback`` if given, else raise.
    """
    mask = q.defined if affordances is None else (
        affordances.membership if isinstance(affordances, AffordanceSet) else np.asarray(affordances, bool))
    mask = mask & q.defined
    S = mask.shape[0]
    terminal = np.zeros(S, bool) if terminal_mask is None else np.asarray(terminal_mask, bool)
    scores = np.where(mask, q.values, -np.inf)
    policy = np.argmax(scores, axis=1)
    empty = ~mask.any(axis=1)
    policy[terminal] = NO_OPTION
    stuck = empty & ~terminal
    if stuck.any():
        if fallback is None:
            raise LivenessError(np.flatnonzero(stuck))
        fb = fallback.membership if isinstance(fallback, AffordanceSet) else np.asarray(fallback, bool)
        for s in np.flatnonzero(stuck):
            choices = np.flatnonzero(fb[s])
            if len(choices) == 0:
                raise LivenessError([s])
            policy[s] = choices[0]
    return policy


def _deterministic(mdp: TabularMDP, options: Sequence[Option]) -> bool:
    if not mdp.is_deterministic:
        return False
    return all(np.all((o.termination == 0) | (o.termination == 1)) for o in options)


def _run_episode(mdp, policy, options, start, cap, t_max, rng) -> bool:
    s, steps = start, 0
    while steps < cap:
        o = int(policy[s])
        if o == NO_OPTION:
            return False
        tr = execute_option(mdp, s, options[o], min(t_max, cap - steps), rng)
        steps += tr.duration
        s = tr.end
        if mdp.terminal_mask[s]:
            return True
    return False


def success_by_start(mdp: TabularMDP, policy: np.ndarray, options: Sequence[Option], starts: np.ndarray,
                     cap: int = 200, t_max: int = DEFAULT_T_MAX,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Success flag of one call-and-return episode from each start state."""
    rng = np.random.default_rng(0) if rng is None else rng
    return np.array([_run_episode(mdp, policy, options, int(s), cap, t_max, rng) for s in starts])


def evaluate_success(mdp: TabularMDP, policy: np.ndarray, options: Sequence[Option], episodes: int,
                     cap: int, rng: np.random.Generator, starts: np.ndarray | None = None,
                     t_max: int = DEFAULT_T_MAX) -> float:
    """Fraction of episodes from random initial states that reach the goal within ``cap`` steps.

    Reaching any terminal state counts as success; in Taxi the only way in is
    the final +20 drop. With deterministic dynamics and 0/1 terminations each
    start state has a fixed outcome, which is computed once and reused.
    """
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    if starts is None:
        starts = np.flatnonzero(~mdp.terminal_mask)
    picks = starts[rng.integers(len(starts), size=episodes)]
    if _deterministic(mdp, options):
        uniq, inverse = np.unique(picks, return_inverse=True)
        ok = success_by_start(mdp, policy, options, uniq, cap, t_max, rng)
        return float(ok[inverse].mean())
    return float(np.mean([_run_episode(mdp, policy, options, int(s), cap, t_max, rng) for s in picks]))
