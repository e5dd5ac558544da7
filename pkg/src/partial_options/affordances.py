"""Intents, affordance sets and the learned affordance classifier.

An intent describes what an option is meant to achieve, either as a target
end-state sub-distribution per start state or as a completion predicate on
logged transitions. A pair (s, o) is afforded when the option's model is close
enough, in total variation, to what its intent asks for.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import taxi
from .option_models import OptionModel, TrajectoryDistribution
from .options import Dataset, OptionTransition, taxi_option_index

__all__ = [
    "Intent",
    "AffordanceSet",
    "LivenessError",
    "intent_satisfaction_zeta",
    "model_intents",
    "trajectory_zeta",
    "zeta_table",
    "derive_affordances",
    "taxi_heuristic_affordances",
    "HEURISTIC_SETS",
    "taxi_intents",
    "intent_completion",
    "completion_labels",
    "AffordanceClassifier",
    "train_affordance_classifier",
    "classifier_affordance_set",
    "end_state_distribution",
    "K_SWEEP",
]

HEURISTIC_SETS = ("everything", "pickup_drop", "pickup_drop_at_goal")
K_SWEEP = tuple(round(0.1 * i, 1) for i in range(10))
INIT_SHIFT = 2.0


class LivenessError(ValueError):
    def __init__(self, states):
        self.states = [int(s) for s in states]
        super().__init__(f"{len(self.states)} non-terminal states have no afforded option, "
                         f"e.g. {self.states[:10]}")


@dataclass(frozen=True, eq=False)
class Intent:
    """Either a target distribution ``distribution[s, s']`` for one option, or a
    vectorised completion predicate ``predicate(start, end) -> bool``.

    A predicate intent with ``option`` set is only completed by that option.
    """

    option: int | None = None
    distribution: np.ndarray | None = None
    predicate: Callable | None = None
    label: str = ""

    def __post_init__(self):
        if (self.distribution is None) == (self.predicate is None):
            raise ValueError("an intent needs exactly one of distribution or predicate")
        if self.distribution is not None:
            d = np.array(self.distribution, dtype=float)
            if d.ndim != 2 or np.any(d < 0) or np.any(d.sum(axis=1) > 1 + 1e-12):
                raise ValueError("intent distribution must be a non-negative (S, S) sub-stochastic table")
            if self.option is None:
                raise ValueError("distribution intents belong to one option")
            d.flags.writeable = False
            object.__setattr__(self, "distribution", d)


@dataclass(frozen=True, eq=False)
class AffordanceSet:
    membership: np.ndarray
    provenance: str = ""
    repaired: tuple[int, ...] = field(default=())

    def __post_init__(self):
        m = np.array(self.membership, dtype=bool)
        if m.ndim != 2:
            raise ValueError("membership must be a (states, options) table")
        m.flags.writeable = False
        object.__setattr__(self, "membership", m)

    @property
    def size(self) -> int:
        return int(self.membership.sum())

    def __len__(self) -> int:
        return self.size

    def __contains__(self, pair) -> bool:
        s, o = pair
        return bool(self.membership[s, o])

    def options_at(self, state: int) -> np.ndarray:
        return np.flatnonzero(self.membership[state])

    def empty_states(self, terminal_mask: np.ndarray | None = None) -> np.ndarray:
        empty = ~self.membership.any(axis=1)
        if terminal_mask is not None:
            empty &= ~np.asarray(terminal_mask, bool)
        return np.flatnonzero(empty)

    def check_liveness(self, terminal_mask: np.ndarray | None = None) -> None:
        empty = self.empty_states(terminal_mask)
        if len(empty):
            raise LivenessError(empty)

    def restrict(self, mask: np.ndarray, provenance: str | None = None) -> "AffordanceSet":
        return AffordanceSet(self.membership & mask, provenance or self.provenance, self.repaired)

    def issubset(self, other: "AffordanceSet") -> bool:
        return bool(np.all(~self.membership | other.membership))

    def save(self, path: str | Path) -> None:
        S, O = self.membership.shape
        with open(path, "w") as fh:
            fh.write(f"# affordances states={S} options={O} provenance={self.provenance}\n")
            for s, o in np.argwhere(self.membership):
                fh.write(f"{s},{o}\n")

    @classmethod
    def load(cls, path: str | Path) -> "AffordanceSet":
        with open(path) as fh:
            header = fh.readline().split(maxsplit=4)
            if header[:2] != ["#", "affordances"]:
                raise ValueError("not an affordance file")
            meta = dict(kv.split("=", 1) for kv in header[2:])
            m = np.zeros((int(meta["states"]), int(meta["options"])), bool)
            for line in fh:
                if line.strip():
                    s, o = line.split(",")
                    m[int(s), int(o)] = True
        return cls(m, meta.get("provenance", "").strip())


def _repair(membership: np.ndarray, preference: np.ndarray, terminal_mask) -> tuple[np.ndarray, tuple]:
    """Re-add the most preferred option wherever a non-terminal state lost all options."""
    out = membership.copy()
    empty = ~out.any(axis=1)
    if terminal_mask is not None:
        empty &= ~np.asarray(terminal_mask, bool)
    states = np.flatnonzero(empty)
    if len(states):
        out[states, np.argmax(preference[states], axis=1)] = True
    return out, tuple(int(s) for s in states)


# --- intent satisfaction ---------------------------------------------------------

def intent_satisfaction_zeta(model: OptionModel, intent: Intent, state: int, option: int | None = None) -> float:
    """Total variation ``sum_s' |P_I(s'|s,o) - P(s'|s,o)|`` in the model's sub-probability form."""
    if intent.distribution is None:
        raise ValueError("degree of satisfaction needs a distribution intent")
    option = intent.option if option is None else option
    p = model.distribution(state, option)
    return float(np.abs(intent.distribution[state] - p).sum())


def trajectory_zeta(option_traj: TrajectoryDistribution, intent_traj: TrajectoryDistribution) -> float:
    """Deviation summed over (end state, duration) cells, plus the mass still running at the horizon."""
    if option_traj.mass.shape != intent_traj.mass.shape:
        raise ValueError("trajectory distributions must share states and horizon")
    return float(np.abs(option_traj.mass - intent_traj.mass).sum()
                 + abs(option_traj.residual - intent_traj.residual))


def model_intents(model: OptionModel) -> list[Intent]:
    """One distribution intent per option equal to the model's own rows (ζ = 0)."""
    dense = model.dense()
    return [Intent(option=o, distribution=dense[:, o, :], label=f"model-{o}") for o in range(model.n_options)]


def zeta_table(model: OptionModel, intents: Sequence[Intent],
               terminal_mask: np.ndarray | None = None) -> np.ndarray:
    """ζ for every (state, option); options must each carry exactly one intent.

    Terminal states (no decisions are taken there) get NaN; any other pair
    without a model entry is an error.
    """
    S, O = model.n_states, model.n_options
    by_option = {i.option: i for i in intents}
    if sorted(by_option) != list(range(O)) or len(intents) != O:
        raise ValueError("derive_affordances needs exactly one distribution intent per option")
    terminal = np.zeros(S, bool) if terminal_mask is None else np.asarray(terminal_mask, bool)
    model.require(~terminal[:, None] & np.ones((S, O), bool))
    dense = model.dense()
    out = np.empty((S, O))
    for o, intent in by_option.items():
        out[:, o] = np.abs(intent.distribution - dense[:, o, :]).sum(axis=1)
    out[terminal] = np.nan
    return out


def derive_affordances(intents: Sequence[Intent], model: OptionModel, threshold: float,
                       terminal_mask: np.ndarray | None = None) -> AffordanceSet:
    """Afford (s, o) iff ζ_{s,o} <= threshold, repairing empty menus with the lowest-ζ option."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    zeta = zeta_table(model, intents, terminal_mask)
    with np.errstate(invalid="ignore"):
        afforded = zeta <= threshold
    membership, repaired = _repair(afforded, -np.nan_to_num(zeta, nan=np.inf), terminal_mask)
    return AffordanceSet(membership, f"zeta<={threshold!r}", repaired)


# --- taxi heuristics and intents -------------------------------------------------

def taxi_heuristic_affordances(kind: str) -> AffordanceSet:
    n_options = 75
    m = np.zeros((taxi.N_STATES, n_options), bool)
    if kind == "everything":
        m[:] = True
    elif kind == "pickup_drop":
        m[:, 25:] = True
    elif kind == "pickup_drop_at_goal":
        for row, col in taxi.DEPOTS:
            m[:, taxi_option_index("pickup", row, col)] = True
            m[:, taxi_option_index("drop", row, col)] = True
    else:
        raise ValueError(f"unknown heuristic affordance set {kind!r}; expected one of {HEURISTIC_SETS}")
    return AffordanceSet(m, kind)


def _taxi_features():
    states = [taxi.decode_state(i) for i in range(taxi.N_STATES)]
    in_taxi = np.array([s.in_taxi for s in states])
    passenger = np.array([s.passenger for s in states])
    destination = np.array([s.destination for s in states])
    depot_here = np.array([taxi.DEPOTS.index(s.cell) if s.cell in taxi.DEPOTS else -1 for s in states])
    return in_taxi, passenger, destination, depot_here


_IN_TAXI, _PASSENGER, _DESTINATION, _DEPOT_HERE = _taxi_features()


def taxi_intents(pickup_variant: str = "depot") -> list[Intent]:
    """The eight completion intents, one per Pickup+Drop@Goal option: passenger
    picked up at depot d, passenger dropped at depot d.

    ``pickup_variant="destination"`` additionally requires depot d to be the
    episode's destination.
    """
    if pickup_variant not in ("depot", "destination"):
        raise ValueError("pickup_variant must be 'depot' or 'destination'")
    out = []
    for d, name in enumerate(taxi.DEPOT_NAMES):
        def picked(start, end, d=d):
            ok = _IN_TAXI[end] & (_DEPOT_HERE[end] == d)
            if pickup_variant == "destination":
                ok = ok & (_DESTINATION[end] == d)
            return ok
        option = taxi_option_index("pickup", *taxi.DEPOTS[d])
        out.append(Intent(option=option, predicate=picked, label=f"pickup@{name}"))
    for d, name in enumerate(taxi.DEPOT_NAMES):
        def dropped(start, end, d=d):
            return _IN_TAXI[start] & (_PASSENGER[end] == d)
        option = taxi_option_index("drop", *taxi.DEPOTS[d])
        out.append(Intent(option=option, predicate=dropped, label=f"drop@{name}"))
    return out


def intent_completion(transition: OptionTransition, intent: Intent) -> bool:
    if intent.predicate is None:
        raise ValueError("intent has no completion predicate")
    if intent.option is not None and transition.option != intent.option:
        return False
    return bool(intent.predicate(transition.start, transition.end))


def completion_labels(start: np.ndarray, option: np.ndarray, end: np.ndarray,
                      intents: Sequence[Intent]) -> np.ndarray:
    """``(n, n_intents)`` 0/1 labels for arrays of logged transitions."""
    start = np.asarray(start, dtype=np.int64)
    option = np.asarray(option, dtype=np.int64)
    end = np.asarray(end, dtype=np.int64)
    cols = []
    for i in intents:
        ok = np.asarray(i.predicate(start, end), dtype=bool)
        if i.option is not None:
            ok = ok & (option == i.option)
        cols.append(ok.astype(float))
    return np.stack(cols, axis=1)


# --- classifier ------------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class AffordanceClassifier:
    """``A(s, o, s', I) = sigmoid(W_s[I, s] + W_o[I, o] + W_e[I, s'] + b[I] + 2)``.

    A linear model over concatenated one-hot state, option and end-state
    features, one output per intent. All weights start at zero, so a fresh
    classifier outputs ``sigmoid(2)`` everywhere. An end state of -1 means
    "unknown": its one-hot block is all zeros.
    """

    def __init__(self, n_states: int, n_options: int, n_intents: int):
        self.W_s = np.zeros((n_intents, n_states))
        self.W_o = np.zeros((n_intents, n_options))
        self.W_e = np.zeros((n_intents, n_states))
        self.b = np.zeros(n_intents)
        self.steps = 0

    @property
    def n_intents(self) -> int:
        return len(self.b)

    def logits(self, start, option, end) -> np.ndarray:
        """Pre-sigmoid scores, shape ``broadcast(start, option, end) + (n_intents,)``."""
        start, option, end = np.broadcast_arrays(np.asarray(start), np.asarray(option), np.asarray(end))
        w_end = np.where(end >= 0, self.W_e[:, np.maximum(end, 0)], 0.0)
        f = self.W_s[:, start] + self.W_o[:, option] + w_end + self.b.reshape((-1,) + (1,) * start.ndim)
        return np.moveaxis(f + INIT_SHIFT, 0, -1)

    def predict(self, start, option, end) -> np.ndarray:
        return _sigmoid(self.logits(start, option, end))

    def score(self, start, option, end) -> np.ndarray:
        """Max over intents."""
        return self.predict(start, option, end).max(axis=-1)

    def transition_mask(self, k: float):
        """Per-transition indicator ``max_I A(s, o, s', I) > k`` on observed end states."""
        def mask(batch: Sequence[OptionTransition]) -> np.ndarray:
            start = np.fromiter((tr.start for tr in batch), np.int64, len(batch))
            option = np.fromiter((tr.option for tr in batch), np.int64, len(batch))
            end = np.fromiter((tr.end for tr in batch), np.int64, len(batch))
            return self.score(start, option, end) > k
        return mask

    def loss(self, start, option, end, labels) -> float:
        z = self.logits(start, option, end)
        # binary cross-entropy in a numerically stable form
        return float(np.sum(np.logaddexp(0.0, z) - labels * z))

    def gradient(self, start, option, end, labels):
        start, option, end = (np.asarray(x, dtype=np.int64) for x in (start, option, end))
        err = self.predict(start, option, end) - labels  # (n, I)
        known = end >= 0
        gs = np.zeros_like(self.W_s)
        go = np.zeros_like(self.W_o)
        ge = np.zeros_like(self.W_e)
        for i in range(self.n_intents):
            np.add.at(gs[i], start, err[:, i])
            np.add.at(go[i], option, err[:, i])
            np.add.at(ge[i], end[known], err[known, i])
        return gs, go, ge, err.sum(axis=0)

    def apply(self, grads, lr: float) -> None:
        gs, go, ge, gb = grads
        self.W_s -= lr * gs
        self.W_o -= lr * go
        self.W_e -= lr * ge
        self.b -= lr * gb

    def parameters(self) -> np.ndarray:
        return np.concatenate([self.W_s.ravel(), self.W_o.ravel(), self.W_e.ravel(), self.b])

    def set_parameters(self, flat: np.ndarray) -> None:
        sizes = [self.W_s.size, self.W_o.size, self.W_e.size]
        a, b_, c = np.cumsum(sizes)
        self.W_s = flat[:a].reshape(self.W_s.shape).copy()
        self.W_o = flat[a:b_].reshape(self.W_o.shape).copy()
        self.W_e = flat[b_:c].reshape(self.W_e.shape).copy()
        self.b = flat[c:].copy()

    def copy(self) -> "AffordanceClassifier":
        out = AffordanceClassifier(self.W_s.shape[1], self.W_o.shape[1], self.n_intents)
        out.set_parameters(self.parameters())
        out.steps = self.steps
        return out


def train_affordance_classifier(classifier: AffordanceClassifier, dataset: Dataset,
                                intents: Sequence[Intent], lr: float, steps: int,
                                rng: np.random.Generator, batch_size: int = 32,
                                window: int | None = None) -> AffordanceClassifier:
    """SGD on the mean per-transition cross-entropy against completion labels."""
    if steps <= 0:
        raise ValueError("steps must be positive")
    cols = dataset.arrays()
    n = len(cols["start"])
    if n == 0:
        return classifier
    lo = 0 if window is None else max(0, n - window)
    labels = completion_labels(cols["start"][lo:], cols["option"][lo:], cols["end"][lo:], intents)
    start, option, end = cols["start"][lo:], cols["option"][lo:], cols["end"][lo:]
    for _ in range(steps):
        idx = rng.integers(n - lo, size=batch_size)
        loss = classifier.loss(start[idx], option[idx], end[idx], labels[idx])
        if not np.isfinite(loss):
            raise FloatingPointError(f"classifier loss not finite at step {classifier.steps}")
        classifier.apply(classifier.gradient(start[idx], option[idx], end[idx], labels[idx]),
                         lr / batch_size)
        classifier.steps += 1
    return classifier


def end_state_distribution(model, option: int) -> np.ndarray:
    """Normalised ``(S, S)`` end-state distribution of ``option`` under ``model``."""
    S, O = model.n_states, model.n_options
    rows = np.arange(S) * O + option
    if hasattr(model, "shared"):
        dist = model.base[rows].toarray() + model.shared[rows][:, None]
    else:
        dist = model.P[rows].toarray()
    total = dist.sum(axis=1, keepdims=True)
    return np.divide(dist, total, out=np.zeros_like(dist), where=total > 0)


def classifier_affordance_set(classifier: AffordanceClassifier, model, k: float,
                              terminal_mask: np.ndarray | None = None,
                              aggregate: str = "argmax") -> AffordanceSet:
    """Afford (s, o) iff ``max_I A(s, o, s', I) > k``.

    ``aggregate="argmax"`` scores each pair at the model's most likely end
    state, or with the end state unknown where the model predicts none;
    ``"expected"`` averages the score over the model's end-state distribution.
    """
    if not 0.0 <= k < 1.0:
        raise ValueError("k must lie in [0, 1)")
    S, O = model.n_states, model.n_options
    if aggregate == "argmax":
        ends = model.argmax_end()
        s_idx = np.broadcast_to(np.arange(S)[:, None], (S, O))
        o_idx = np.broadcast_to(np.arange(O)[None, :], (S, O))
        score = classifier.score(s_idx, o_idx, ends)
    elif aggregate == "expected":
        score = np.empty((S, O))
        for o in range(O):
            dist = end_state_distribution(model, o)
            f = classifier.W_s[:, :, None] + classifier.W_o[:, o, None, None] + classifier.W_e[:, None, :] \
                + classifier.b[:, None, None] + INIT_SHIFT
            score[:, o] = (_sigmoid(f).max(axis=0) * dist).sum(axis=1)
    else:
        raise ValueError("aggregate must be 'argmax' or 'expected'")
    membership, repaired = _repair(score > k, score, terminal_mask)
    return AffordanceSet(membership, f"classifier k={k!r} ({aggregate})", repaired)
