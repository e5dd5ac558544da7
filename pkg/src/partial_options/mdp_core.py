"""Finite MDPs and the exact dynamic-programming solvers built on them.

Everything here is a pure function of immutable numpy arrays. Value
iteration, policy evaluation and greedy extraction are the ground truth the
rest of the package (option pretraining, oracle values, primitive baselines)
is checked against.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

__all__ = [
    "ConvergenceError",
    "TabularMDP",
    "SolveResult",
    "bellman_backup",
    "value_iteration",
    "policy_value",
    "greedy_policy",
    "random_mdp",
    "dump_mdp",
    "load_mdp",
    "dumps_mdp",
    "loads_mdp",
    "save_mdp",
    "read_mdp",
]

PROB_ATOL = 1e-12


class ConvergenceError(RuntimeError):
    """An iterative solver ran out of iterations before reaching its tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual={residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


def _frozen(array, dtype=float) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite MDP with dense ``transition[s, a, s']`` and ``reward[s, a]``.

    Terminal states are absorbing zero-reward self-loops; the constructor
    refuses anything else so episodic tasks fit the discounted formalism.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    terminal_states: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        P = _frozen(self.transition)
        r = _frozen(self.reward)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "terminal_states", frozenset(int(s) for s in self.terminal_states))

        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        n_states, n_actions, _ = P.shape
        if n_states < 1 or n_actions < 1:
            raise ValueError("an MDP needs at least one state and one action")
        if r.shape != (n_states, n_actions):
            raise ValueError(f"reward must have shape {(n_states, n_actions)}, got {r.shape}")
        if not (np.all(np.isfinite(P)) and np.all(np.isfinite(r))):
            raise ValueError("transition and reward must be finite")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.gamma}")
        if np.any(P < 0.0):
            raise ValueError("transition probabilities must be non-negative")
        row_sums = P.sum(axis=2)
        if np.max(np.abs(row_sums - 1.0)) > PROB_ATOL:
            raise ValueError("every transition row must sum to 1")
        for s in self.terminal_states:
            if not 0 <= s < n_states:
                raise ValueError(f"terminal state {s} out of range")
            if np.any(P[s, :, s] != 1.0) or np.any(r[s] != 0.0):
                raise ValueError(f"terminal state {s} must be a zero-reward absorbing self-loop")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @cached_property
    def terminal_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.terminal_states)] = True
        mask.flags.writeable = False
        return mask

    @cached_property
    def is_deterministic(self) -> bool:
        return bool(np.all(self.transition.max(axis=2) == 1.0))

    @cached_property
    def next_state_table(self) -> np.ndarray:
        """``(S, A)`` successor table; only defined for deterministic MDPs."""
        if not self.is_deterministic:
            raise ValueError("next_state_table requires deterministic transitions")
        table = self.transition.argmax(axis=2)
        table.flags.writeable = False
        return table

    @cached_property
    def _cdf(self) -> np.ndarray:
        cdf = np.cumsum(self.transition, axis=2)
        cdf[..., -1] = 1.0
        return cdf

    def sample_next(self, state: int, action: int, rng: np.random.Generator) -> int:
        if self.is_deterministic:
            return int(self.next_state_table[state, action])
        return int(np.searchsorted(self._cdf[state, action], rng.random(), side="right"))

    def sample_next_many(self, states: np.ndarray, actions: np.ndarray,
                         rng: np.random.Generator) -> np.ndarray:
        """Vectorised successor sampling for a batch of (state, action) pairs."""
        if self.is_deterministic:
            return self.next_state_table[states, actions]
        cdf = self._cdf[states, actions]
        u = rng.random(len(states))
        return (cdf <= u[:, None]).sum(axis=1).clip(max=self.n_states - 1)


@dataclass(frozen=True)
class SolveResult:
    values: np.ndarray
    q_values: np.ndarray
    iterations: int
    residual: float


def bellman_backup(mdp: TabularMDP, values: np.ndarray) -> np.ndarray:
    """One optimality backup, returned as ``Q[s, a] = r + gamma * P V``."""
    return mdp.reward + mdp.gamma * (mdp.transition @ values)


def value_iteration(mdp: TabularMDP, tol: float = 1e-10, max_iter: int = 100_000,
                    initial_values: np.ndarray | None = None) -> SolveResult:
    """Jacobi value iteration to a sup-norm tolerance.

    Iteration stops once successive iterates differ by at most
    ``tol * (1 - gamma)``, which keeps both the Bellman residual of the
    returned values and their distance to V* below ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    V = np.zeros(mdp.n_states) if initial_values is None else np.array(initial_values, dtype=float)
    if not np.all(np.isfinite(V)):
        raise ValueError("initial values must be finite")
    threshold = tol * (1.0 - mdp.gamma)
    residual = np.inf
    for it in range(1, max_iter + 1):
        Q = bellman_backup(mdp, V)
        V_new = Q.max(axis=1)
        residual = float(np.max(np.abs(V_new - V)))
        V = V_new
        if residual <= threshold:
            return SolveResult(V, Q, it, residual)
    raise ConvergenceError("value iteration did not converge", residual, max_iter)


def _check_policy(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy)
    if policy.shape != (mdp.n_states,):
        raise ValueError(f"policy must assign one action to each of {mdp.n_states} states")
    if not np.issubdtype(policy.dtype, np.integer):
        raise ValueError("policy entries must be integer action indices")
    if np.any(policy < 0) or np.any(policy >= mdp.n_actions):
        raise ValueError("policy contains an invalid action index")
    return policy


def policy_value(mdp: TabularMDP, policy: np.ndarray, tol: float = 1e-10,
                 max_iter: int = 1_000_000) -> np.ndarray:
    """Evaluate a deterministic policy by fixed-point iteration on V = r_pi + gamma P_pi V."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    policy = _check_policy(mdp, policy)
    idx = np.arange(mdp.n_states)
    P_pi = mdp.transition[idx, policy]
    r_pi = mdp.reward[idx, policy]
    threshold = tol * (1.0 - mdp.gamma)
    V = np.zeros(mdp.n_states)
    residual = np.inf
    for _ in range(max_iter):
        V_new = r_pi + mdp.gamma * (P_pi @ V)
        residual = float(np.max(np.abs(V_new - V)))
        V = V_new
        if residual <= threshold:
            return V
    raise ConvergenceError("policy evaluation did not converge", residual, max_iter)


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """Row-wise argmax with ties going to the lowest index."""
    q = np.asarray(q, dtype=float)
    if q.ndim != 2 or q.shape[1] == 0:
        raise ValueError("q must be a (states, actions) table with at least one action")
    if not np.all(np.isfinite(q)):
        raise ValueError("q must be finite")
    return np.argmax(q, axis=1)


def random_mdp(n_states: int, n_actions: int, gamma: float, rng: np.random.Generator,
               reward_range: tuple[float, float] = (0.0, 1.0),
               sparsity: float = 0.0) -> TabularMDP:
    """Random dense MDP; ``sparsity`` zeroes that fraction of successor entries per row."""
    P = rng.random((n_states, n_actions, n_states))
    if sparsity > 0:
        keep = rng.random(P.shape) >= sparsity
        # at least one successor per row
        keep[np.arange(n_states)[:, None], np.arange(n_actions)[None, :],
             rng.integers(n_states, size=(n_states, n_actions))] = True
        P = P * keep
    P /= P.sum(axis=2, keepdims=True)
    lo, hi = reward_range
    r = rng.uniform(lo, hi, size=(n_states, n_actions))
    return TabularMDP(P, r, gamma)


# --- plain-text matrix format -------------------------------------------------
#
#   <n_states> <n_actions> <gamma>
#   S*A transition rows (state-major), each with S probabilities
#   S reward rows, each with A entries
#   terminal <indices...>          (optional)

def dump_mdp(mdp: TabularMDP, fh: TextIO) -> None:
    fh.write(f"{mdp.n_states} {mdp.n_actions} {mdp.gamma!r}\n")
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            fh.write(" ".join(repr(float(x)) for x in mdp.transition[s, a]) + "\n")
    for s in range(mdp.n_states):
        fh.write(" ".join(repr(float(x)) for x in mdp.reward[s]) + "\n")
    if mdp.terminal_states:
        fh.write("terminal " + " ".join(str(s) for s in sorted(mdp.terminal_states)) + "\n")


def _data_lines(lines: Iterable[str]) -> list[str]:
    return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


def load_mdp(fh: TextIO) -> TabularMDP:
    lines = _data_lines(fh)
    if not lines:
        raise ValueError("empty MDP file")
    head = lines[0].split()
    if len(head) != 3:
        raise ValueError("header must be '<n_states> <n_actions> <gamma>'")
    n_states, n_actions, gamma = int(head[0]), int(head[1]), float(head[2])
    body = lines[1:]
    n_rows = n_states * n_actions + n_states
    if len(body) < n_rows:
        raise ValueError(f"expected {n_rows} data rows, found {len(body)}")
    P = np.array([[float(x) for x in ln.split()] for ln in body[: n_states * n_actions]])
    r = np.array([[float(x) for x in ln.split()] for ln in body[n_states * n_actions: n_rows]])
    terminal: list[int] = []
    for ln in body[n_rows:]:
        parts = ln.split()
        if parts[0] != "terminal":
            raise ValueError(f"unexpected trailing line: {ln!r}")
        terminal.extend(int(x) for x in parts[1:])
    return TabularMDP(P.reshape(n_states, n_actions, n_states), r, gamma, frozenset(terminal))


def dumps_mdp(mdp: TabularMDP) -> str:
    buf = io.StringIO()
    dump_mdp(mdp, buf)
    return buf.getvalue()


def loads_mdp(text: str) -> TabularMDP:
    return load_mdp(io.StringIO(text))


def save_mdp(mdp: TabularMDP, path: str | Path) -> None:
    with open(path, "w") as fh:
        dump_mdp(mdp, fh)


def read_mdp(path: str | Path) -> TabularMDP:
    with open(path) as fh:
        return load_mdp(fh)
