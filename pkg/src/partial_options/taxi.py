"""The 5x5 Taxi domain, laid out and encoded like the Gym ``toy_text`` version.

State index = ((row * 5 + col) * 5 + passenger) * 4 + destination, with
depots ordered R, G, Y, B and passenger location 4 meaning "in the taxi".
Action ids follow Gym: 0 down (south), 1 up (north), 2 right (east),
3 left (west), 4 pickup, 5 drop.

States whose passenger already sits at the destination are the post-success
states; they are modelled as absorbing zero-reward terminals.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .mdp_core import TabularMDP

__all__ = [
    "MAP",
    "DEPOTS",
    "DEPOT_NAMES",
    "IN_TAXI",
    "N_STATES",
    "N_ACTIONS",
    "DOWN", "UP", "RIGHT", "LEFT", "PICKUP", "DROP",
    "MOVE_ACTIONS",
    "TaxiState",
    "TaxiLayout",
    "LAYOUT",
    "encode_state",
    "decode_state",
    "build_taxi_mdp",
    "initial_states",
    "TaxiEnv",
]

MAP = (
    "+---------+",
    "|R: | : :G|",
    "| : | : : |",
    "| : : : : |",
    "| | : | : |",
    "|Y| : |B: |",
    "+---------+",
)

N_ROWS = N_COLS = 5
DEPOTS = ((0, 0), (0, 4), (4, 0), (4, 3))
DEPOT_NAMES = ("R", "G", "Y", "B")
IN_TAXI = 4
N_STATES = 500
N_ACTIONS = 6

DOWN, UP, RIGHT, LEFT, PICKUP, DROP = range(6)
MOVE_ACTIONS = (DOWN, UP, RIGHT, LEFT)
ACTION_NAMES = ("down", "up", "right", "left", "pickup", "drop")

STEP_REWARD = -1.0
ILLEGAL_REWARD = -10.0
SUCCESS_REWARD = 20.0
DEFAULT_GAMMA = 0.99
DEFAULT_EPISODE_CAP = 200


@dataclass(frozen=True)
class TaxiState:
    row: int
    col: int
    passenger: int
    destination: int

    def __post_init__(self):
        if not (0 <= self.row < N_ROWS and 0 <= self.col < N_COLS):
            raise ValueError(f"taxi position ({self.row}, {self.col}) is off the grid")
        if not 0 <= self.passenger <= IN_TAXI:
            raise ValueError(f"passenger location {self.passenger} out of range")
        if not 0 <= self.destination < len(DEPOTS):
            raise ValueError(f"destination {self.destination} out of range")

    @property
    def cell(self) -> tuple[int, int]:
        return (self.row, self.col)

    @property
    def in_taxi(self) -> bool:
        return self.passenger == IN_TAXI


def encode_state(s: TaxiState) -> int:
    return ((s.row * N_COLS + s.col) * 5 + s.passenger) * 4 + s.destination


def decode_state(index: int) -> TaxiState:
    index = int(index)
    if not 0 <= index < N_STATES:
        raise ValueError(f"state index {index} out of range")
    destination = index % 4
    index //= 4
    passenger = index % 5
    index //= 5
    return TaxiState(index // N_COLS, index % N_COLS, passenger, destination)


@dataclass(frozen=True)
class TaxiLayout:
    depots: tuple[tuple[int, int], ...]
    # unordered pairs of horizontally adjacent cells with a wall between them
    walls: frozenset[frozenset[tuple[int, int]]]

    @classmethod
    def from_ascii(cls, lines=MAP, depots=DEPOTS) -> "TaxiLayout":
        walls = set()
        for row in range(N_ROWS):
            text = lines[row + 1]
            for col in range(N_COLS - 1):
                if text[2 * col + 2] == "|":
                    walls.add(frozenset({(row, col), (row, col + 1)}))
        return cls(tuple(depots), frozenset(walls))

    def to_ascii(self) -> tuple[str, ...]:
        out = ["+" + "-" * (2 * N_COLS - 1) + "+"]
        for row in range(N_ROWS):
            chars = ["|"]
            for col in range(N_COLS):
                name = " "
                if (row, col) in self.depots:
                    name = DEPOT_NAMES[self.depots.index((row, col))]
                chars.append(name)
                if col < N_COLS - 1:
                    chars.append("|" if self.blocked((row, col), (row, col + 1)) else ":")
            chars.append("|")
            out.append("".join(chars))
        out.append(out[0])
        return tuple(out)

    def blocked(self, a: tuple[int, int], b: tuple[int, int]) -> bool:
        return frozenset({a, b}) in self.walls

    def move(self, cell: tuple[int, int], action: int) -> tuple[int, int]:
        row, col = cell
        if action == DOWN:
            return (min(row + 1, N_ROWS - 1), col)
        if action == UP:
            return (max(row - 1, 0), col)
        if action == RIGHT:
            target = (row, min(col + 1, N_COLS - 1))
        elif action == LEFT:
            target = (row, max(col - 1, 0))
        else:
            raise ValueError(f"{action} is not a movement action")
        return cell if self.blocked(cell, target) else target


LAYOUT = TaxiLayout.from_ascii()


def _apply(layout: TaxiLayout, s: TaxiState, action: int) -> tuple[TaxiState, float, bool]:
    if action in MOVE_ACTIONS:
        row, col = layout.move(s.cell, action)
        return TaxiState(row, col, s.passenger, s.destination), STEP_REWARD, False
    if action == PICKUP:
        if s.passenger < IN_TAXI and s.cell == layout.depots[s.passenger]:
            return TaxiState(s.row, s.col, IN_TAXI, s.destination), STEP_REWARD, False
        return s, ILLEGAL_REWARD, False
    if action == DROP:
        if s.in_taxi and s.cell == layout.depots[s.destination]:
            return TaxiState(s.row, s.col, s.destination, s.destination), SUCCESS_REWARD, True
        if s.in_taxi and s.cell in layout.depots:
            return TaxiState(s.row, s.col, layout.depots.index(s.cell), s.destination), STEP_REWARD, False
        return s, ILLEGAL_REWARD, False
    raise ValueError(f"invalid action {action}")


def is_terminal(index: int) -> bool:
    s = decode_state(index)
    return s.passenger == s.destination


@lru_cache(maxsize=8)
def _tables(layout: TaxiLayout) -> tuple[np.ndarray, np.ndarray, frozenset[int]]:
    next_state = np.zeros((N_STATES, N_ACTIONS), dtype=np.int64)
    reward = np.zeros((N_STATES, N_ACTIONS))
    terminal = frozenset(i for i in range(N_STATES) if is_terminal(i))
    for i in range(N_STATES):
        s = decode_state(i)
        for a in range(N_ACTIONS):
            if i in terminal:
                next_state[i, a] = i
                continue
            nxt, r, _ = _apply(layout, s, a)
            next_state[i, a] = encode_state(nxt)
            reward[i, a] = r
    next_state.flags.writeable = False
    reward.flags.writeable = False
    return next_state, reward, terminal


def build_taxi_mdp(gamma: float = DEFAULT_GAMMA, layout: TaxiLayout = LAYOUT) -> TabularMDP:
    """Deterministic 500-state, 6-action Taxi MDP."""
    next_state, reward, terminal = _tables(layout)
    P = np.zeros((N_STATES, N_ACTIONS, N_STATES))
    P[np.arange(N_STATES)[:, None], np.arange(N_ACTIONS)[None, :], next_state] = 1.0
    return TabularMDP(P, reward, gamma, terminal)


def initial_states() -> np.ndarray:
    """Start states: any cell, passenger at a depot other than the destination."""
    out = [encode_state(TaxiState(r, c, p, d))
           for r in range(N_ROWS) for c in range(N_COLS)
           for p in range(4) for d in range(4) if p != d]
    return np.array(out, dtype=np.int64)


class TaxiEnv:
    """Thin episodic wrapper; immutable tables, the caller owns the generator."""

    def __init__(self, gamma: float = DEFAULT_GAMMA, episode_cap: int = DEFAULT_EPISODE_CAP,
                 layout: TaxiLayout = LAYOUT):
        self.layout = layout
        self.gamma = gamma
        self.episode_cap = episode_cap
        self.next_state, self.reward, self.terminal_states = _tables(layout)
        self.starts = initial_states()

    def reset(self, rng: np.random.Generator) -> int:
        return int(self.starts[rng.integers(len(self.starts))])

    def step(self, state: int, action: int, rng: np.random.Generator | None = None) -> tuple[int, float, bool]:
        # rng is accepted for interface uniformity; dynamics are deterministic
        if state in self.terminal_states:
            raise ValueError(f"cannot step terminal state {state}")
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"invalid action {action}")
        nxt = int(self.next_state[state, action])
        return nxt, float(self.reward[state, action]), nxt in self.terminal_states

    def mdp(self) -> TabularMDP:
        return build_taxi_mdp(self.gamma, self.layout)
