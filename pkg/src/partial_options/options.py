"""Markov options, the 75 taxi-centric options, and call-and-return execution.

An option is (initiation set, deterministic intra-option policy, termination
probabilities). Execution always takes at least one primitive step, even when
the start state already satisfies the termination condition, so recorded
durations are >= 1.
"""
from __future__ import annotations

import csv
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import taxi
from .mdp_core import TabularMDP, value_iteration

__all__ = [
    "Option",
    "OptionTransition",
    "Dataset",
    "primitive_options",
    "random_options",
    "pretrain_taxi_options",
    "taxi_option_index",
    "navigation_policy",
    "execute_option",
    "collect_transitions",
    "EpisodeState",
    "DEFAULT_T_MAX",
]

DEFAULT_T_MAX = 100


@dataclass(frozen=True, eq=False)
class Option:
    id: int
    initiation: np.ndarray  # bool per state
    policy: np.ndarray      # action per state
    termination: np.ndarray  # beta per state
    name: str = ""

    def __post_init__(self):
        init = np.array(self.initiation, dtype=bool)
        pol = np.array(self.policy, dtype=np.int64)
        beta = np.array(self.termination, dtype=float)
        if not (init.shape == pol.shape == beta.shape) or init.ndim != 1:
            raise ValueError("initiation, policy and termination must be per-state vectors")
        if not init.any():
            raise ValueError(f"option {self.id} has an empty initiation set")
        if np.any(beta < 0) or np.any(beta > 1) or not np.all(np.isfinite(beta)):
            raise ValueError("termination probabilities must lie in [0, 1]")
        if np.any(pol < 0):
            raise ValueError("intra-option policy has a negative action index")
        for arr in (init, pol, beta):
            arr.flags.writeable = False
        object.__setattr__(self, "initiation", init)
        object.__setattr__(self, "policy", pol)
        object.__setattr__(self, "termination", beta)

    @property
    def n_states(self) -> int:
        return len(self.policy)

    def check(self, mdp: TabularMDP) -> None:
        if self.n_states != mdp.n_states:
            raise ValueError(f"option {self.id} is defined over {self.n_states} states, MDP has {mdp.n_states}")
        if np.any(self.policy >= mdp.n_actions):
            raise ValueError(f"option {self.id} uses an action the MDP does not have")


def primitive_options(mdp: TabularMDP) -> list[Option]:
    """One beta == 1 option per primitive action."""
    n = mdp.n_states
    return [Option(a, np.ones(n, bool), np.full(n, a), np.ones(n), name=f"primitive-{a}")
            for a in range(mdp.n_actions)]


def random_options(mdp: TabularMDP, n_options: int, rng: np.random.Generator,
                   beta_range: tuple[float, float] = (0.2, 1.0)) -> list[Option]:
    """Options with random deterministic policies and random termination probabilities."""
    n = mdp.n_states
    out = []
    for i in range(n_options):
        policy = rng.integers(mdp.n_actions, size=n)
        beta = rng.uniform(*beta_range, size=n)
        out.append(Option(i, np.ones(n, bool), policy, beta, name=f"random-{i}"))
    return out


# --- taxi options ------------------------------------------------------------

GOTO, PICKUP_AT, DROP_AT = "goto", "pickup", "drop"
_KINDS = (GOTO, PICKUP_AT, DROP_AT)


def taxi_option_index(kind: str, row: int, col: int) -> int:
    """Option id layout: go-to cells 0-24, pickup 25-49, drop 50-74 (row-major cells)."""
    return _KINDS.index(kind) * 25 + row * 5 + col


def navigation_policy(goal: tuple[int, int], layout: taxi.TaxiLayout = taxi.LAYOUT,
                      gamma: float = 0.99) -> np.ndarray:
    """Shortest-path move per cell, from value iteration on a 25-cell navigation MDP.

    Every move costs -1 and the goal cell is absorbing. At the goal itself the
    returned action is a blocked move when the walls offer one (so the taxi
    stays put), else -1 as a marker for "no in-place move".
    """
    n_cells = taxi.N_ROWS * taxi.N_COLS
    P = np.zeros((n_cells, 4, n_cells))
    r = np.full((n_cells, 4), -1.0)
    g = goal[0] * taxi.N_COLS + goal[1]
    for cell in range(n_cells):
        here = divmod(cell, taxi.N_COLS)
        for a in taxi.MOVE_ACTIONS:
            if cell == g:
                P[cell, a, cell] = 1.0
                r[cell, a] = 0.0
                continue
            there = layout.move(here, a)
            P[cell, a, there[0] * taxi.N_COLS + there[1]] = 1.0
    solved = value_iteration(TabularMDP(P, r, gamma, frozenset({g})))
    choice = np.argmax(solved.q_values, axis=1)
    stay = [a for a in taxi.MOVE_ACTIONS if layout.move(goal, a) == goal]
    choice[g] = stay[0] if stay else -1
    return choice


def pretrain_taxi_options(mdp: TabularMDP, layout: taxi.TaxiLayout = taxi.LAYOUT) -> list[Option]:
    """The 75 taxi-centric options, all initiable everywhere.

    go-to(r,c) terminates when the taxi reaches (r,c); pickup(r,c) drives there
    and retries Pickup until the passenger is aboard; drop(r,c) drives there
    and retries Drop until the passenger is out of the taxi.
    """
    if mdp.n_states != taxi.N_STATES or mdp.n_actions != taxi.N_ACTIONS:
        raise ValueError("pretrain_taxi_options needs the 500-state, 6-action Taxi MDP")
    states = [taxi.decode_state(i) for i in range(taxi.N_STATES)]
    in_taxi = np.array([s.in_taxi for s in states])
    cells = np.array([s.row * taxi.N_COLS + s.col for s in states])
    everywhere = np.ones(taxi.N_STATES, bool)
    options: list[Option] = []
    navs = {}
    for row in range(taxi.N_ROWS):
        for col in range(taxi.N_COLS):
            navs[row, col] = navigation_policy((row, col), layout)
    for kind in _KINDS:
        for (row, col), nav in navs.items():
            at_goal = cells == row * taxi.N_COLS + col
            policy = nav[cells].copy()
            if kind == GOTO:
                # no blocked move at the goal: Pickup is the in-place fallback
                policy[policy < 0] = taxi.PICKUP
                beta = at_goal.astype(float)
            elif kind == PICKUP_AT:
                policy[at_goal] = taxi.PICKUP
                beta = in_taxi.astype(float)
            else:
                policy[at_goal] = taxi.DROP
                beta = (~in_taxi).astype(float)
            options.append(Option(len(options), everywhere, policy, beta, name=f"{kind}({row},{col})"))
    return options


# --- execution ---------------------------------------------------------------

@dataclass(frozen=True)
class OptionTransition:
    start: int
    option: int
    duration: int
    end: int
    reward: float               # undiscounted sum of step rewards
    discounted_reward: float    # sum_i gamma^i r_i
    truncated: bool
    trace: tuple | None = field(default=None, compare=False)


def execute_option(mdp: TabularMDP, start: int, option: Option, t_max: int = DEFAULT_T_MAX,
                   rng: np.random.Generator | None = None, debug: bool = False) -> OptionTransition:
    """Run ``option`` from ``start`` until beta fires, the episode ends, or ``t_max`` steps pass."""
    if not option.initiation[start]:
        raise ValueError(f"state {start} is outside the initiation set of option {option.id}")
    if mdp.terminal_mask[start]:
        raise ValueError(f"cannot start an option in terminal state {start}")
    if t_max < 1:
        raise ValueError("t_max must be positive")
    if rng is None:
        rng = np.random.default_rng()
    gamma = mdp.gamma
    beta = option.termination
    s = start
    total = disc = 0.0
    weight = 1.0
    trace = [] if debug else None
    truncated = False
    t = 0
    while True:
        a = int(option.policy[s])
        r = float(mdp.reward[s, a])
        nxt = mdp.sample_next(s, a, rng)
        total += r
        disc += weight * r
        weight *= gamma
        t += 1
        if debug:
            trace.append((s, a, r))
        s = nxt
        if mdp.terminal_mask[s]:
            break
        b = beta[s]
        if b >= 1.0 or (b > 0.0 and rng.random() < b):
            break
        if t >= t_max:
            truncated = True
            break
    return OptionTransition(start, option.id, t, s, total, disc, truncated,
                            tuple(trace) if debug else None)


class Dataset:
    """Append-only store of option transitions with per-(state, option) counts.

    Appends are serialised through a lock; :meth:`arrays` returns a consistent
    prefix snapshot. With ``capacity`` set, the oldest rows are dropped from the
    snapshot window (counts and ``total`` still cover everything appended).
    """

    COLUMNS = ("start_state", "option_id", "duration", "end_state",
               "undiscounted_reward", "discounted_reward", "truncated")

    def __init__(self, n_states: int, n_options: int, capacity: int | None = None):
        self.n_states = n_states
        self.n_options = n_options
        self.capacity = capacity
        self._lock = threading.Lock()
        self._rows: list[OptionTransition] = []
        self._cols: dict[str, list] = {c: [] for c in self.COLUMNS}
        self._counts = np.zeros((n_states, n_options), dtype=np.int64)
        self._cache: tuple[int, dict] | None = None

    def __len__(self) -> int:
        return len(self._rows)

    def __iter__(self):
        return iter(list(self._rows))

    def __getitem__(self, i):
        return self._rows[i]

    @property
    def total(self) -> int:
        return len(self._rows)

    @property
    def counts(self) -> np.ndarray:
        with self._lock:
            return self._counts.copy()

    def append(self, tr: OptionTransition) -> None:
        if not (0 <= tr.start < self.n_states and 0 <= tr.end < self.n_states):
            raise ValueError("transition state out of range")
        if not 0 <= tr.option < self.n_options:
            raise ValueError("transition option out of range")
        with self._lock:
            self._rows.append(tr)
            c = self._cols
            c["start_state"].append(tr.start)
            c["option_id"].append(tr.option)
            c["duration"].append(tr.duration)
            c["end_state"].append(tr.end)
            c["undiscounted_reward"].append(tr.reward)
            c["discounted_reward"].append(tr.discounted_reward)
            c["truncated"].append(tr.truncated)
            self._counts[tr.start, tr.option] += 1

    def extend(self, rows: Iterable[OptionTransition]) -> None:
        for tr in rows:
            self.append(tr)

    def arrays(self) -> dict[str, np.ndarray]:
        """Column arrays of the current snapshot window."""
        with self._lock:
            n = len(self._rows)
            if self._cache is not None and self._cache[0] == n:
                return self._cache[1]
            lo = 0 if self.capacity is None else max(0, n - self.capacity)
            out = {
                "start": np.array(self._cols["start_state"][lo:n], dtype=np.int64),
                "option": np.array(self._cols["option_id"][lo:n], dtype=np.int64),
                "duration": np.array(self._cols["duration"][lo:n], dtype=np.int64),
                "end": np.array(self._cols["end_state"][lo:n], dtype=np.int64),
                "reward": np.array(self._cols["undiscounted_reward"][lo:n], dtype=float),
                "discounted_reward": np.array(self._cols["discounted_reward"][lo:n], dtype=float),
                "truncated": np.array(self._cols["truncated"][lo:n], dtype=bool),
            }
            self._cache = (n, out)
            return out

    def save(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for tr in list(self._rows):
                w.writerow([tr.start, tr.option, tr.duration, tr.end,
                            repr(float(tr.reward)), repr(float(tr.discounted_reward)), int(tr.truncated)])

    @classmethod
    def load(cls, path: str | Path, n_states: int, n_options: int) -> "Dataset":
        ds = cls(n_states, n_options)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != cls.COLUMNS:
                raise ValueError(f"unexpected dataset header {header}")
            for row in reader:
                ds.append(OptionTransition(int(row[0]), int(row[1]), int(row[2]), int(row[3]),
                                           float(row[4]), float(row[5]), bool(int(row[6]))))
        return ds


Selector = Callable[[int], Sequence[int]]


@dataclass
class EpisodeState:
    """Where a collector left off: the current decision state and steps used."""

    state: int
    steps: int = 0


def collect_transitions(mdp: TabularMDP, options: Sequence[Option], selector: Selector, n: int,
                        rng: np.random.Generator, t_max: int = DEFAULT_T_MAX,
                        start_states: np.ndarray | None = None, dataset: Dataset | None = None,
                        episode: EpisodeState | None = None,
                        episode_cap: int | None = taxi.DEFAULT_EPISODE_CAP) -> Dataset:
    """Append ``n`` call-and-return option transitions to ``dataset``.

    Episodes start from ``start_states`` (uniformly) and continue across option
    calls until a terminal state or ``episode_cap`` primitive steps. Options are
    drawn uniformly from whatever ``selector`` affords at the decision state.
    Pass an :class:`EpisodeState` to resume an unfinished episode across calls.
    """
    if dataset is None:
        dataset = Dataset(mdp.n_states, len(options))
    if start_states is None:
        start_states = np.flatnonzero(~mdp.terminal_mask)
    if episode is None:
        episode = EpisodeState(int(start_states[rng.integers(len(start_states))]))
    for _ in range(n):
        menu = selector(episode.state)
        if len(menu) == 0:
            raise ValueError(f"selector afforded no option at state {episode.state}")
        o = int(menu[rng.integers(len(menu))])
        tr = execute_option(mdp, episode.state, options[o], t_max, rng)
        dataset.append(tr)
        episode.steps += tr.duration
        if mdp.terminal_mask[tr.end] or (episode_cap is not None and episode.steps >= episode_cap):
            episode.state = int(start_states[rng.integers(len(start_states))])
            episode.steps = 0
        else:
            episode.state = tr.end
    return dataset
