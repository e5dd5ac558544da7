"""Multi-time option models: exact, empirical and learned.

A model stores, per (state, option) pair,

* ``P[s, o, s'] = sum_k gamma^k Pr(option from s stops in s' after k steps)``,
  a sub-probability whose total mass is ``E[gamma^T] <= gamma``;
* ``R[s, o]``, the expected discounted reward accumulated while it runs;
* ``L[s, o]``, the expected duration (``inf`` if it may never stop).

``P`` is kept as a sparse ``(S * O, S)`` matrix, row ``s * O + o``. Planners
only need :meth:`OptionModel.expected_next`, ``reward``, ``defined`` and
:meth:`OptionModel.mass`, which :class:`LearnedSnapshot` also provides.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .mdp_core import TabularMDP
from .options import DEFAULT_T_MAX, Dataset, Option, OptionTransition

__all__ = [
    "MissingEntryError",
    "DivergenceError",
    "OptionModel",
    "exact_option_model",
    "TrajectoryDistribution",
    "enumerate_trajectories",
    "sample_option_outcomes",
    "empirical_option_model",
    "empirical_from_samples",
    "LearnedModel",
    "LearnedSnapshot",
    "masked_loss",
    "train_partial_model",
    "PROB_FLOOR",
]

PROB_FLOOR = 1e-12
ENUM_MAX_STATES = 64
ENUM_MAX_HORIZON = 64


class MissingEntryError(KeyError):
    """A (state, option) entry was queried that the model has no data for."""

    def __init__(self, pairs):
        self.pairs = [tuple(int(x) for x in p) for p in pairs]
        shown = ", ".join(map(str, self.pairs[:10]))
        more = "" if len(self.pairs) <= 10 else f" (+{len(self.pairs) - 10} more)"
        super().__init__(f"no model entry for (state, option) pairs {shown}{more}")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (mean loss {loss:.3e})")
        self.step = step
        self.loss = loss


def _as_options(options) -> list[Option]:
    return [options] if isinstance(options, Option) else list(options)


@dataclass(frozen=True, eq=False)
class OptionModel:
    P: sparse.csr_matrix
    R: np.ndarray
    L: np.ndarray
    gamma: float
    kind: str
    defined: np.ndarray
    residual: float = 0.0
    counts: np.ndarray | None = None

    def __post_init__(self):
        S = self.P.shape[1]
        if self.R.ndim != 2 or self.R.shape[0] != S or self.P.shape[0] != self.R.size:
            raise ValueError("P must be (S*O, S) and R must be (S, O)")
        if self.L.shape != self.R.shape or self.defined.shape != self.R.shape:
            raise ValueError("L and defined must match R's shape")
        for arr in (self.R, self.L, self.defined):
            arr.flags.writeable = False

    @classmethod
    def from_dense(cls, P: np.ndarray, R: np.ndarray, L: np.ndarray, gamma: float,
                   kind: str = "exact", defined: np.ndarray | None = None, **kw) -> "OptionModel":
        S, O, _ = P.shape
        if defined is None:
            defined = np.ones((S, O), bool)
        return cls(sparse.csr_matrix(P.reshape(S * O, S)), np.array(R, float), np.array(L, float),
                   float(gamma), kind, np.array(defined, bool), **kw)

    @property
    def n_states(self) -> int:
        return self.R.shape[0]

    @property
    def n_options(self) -> int:
        return self.R.shape[1]

    @property
    def reward(self) -> np.ndarray:
        return self.R

    def mass(self) -> np.ndarray:
        """Total discounted termination mass per pair, i.e. E[gamma^T]."""
        return np.asarray(self.P.sum(axis=1)).reshape(self.R.shape)

    def expected_next(self, values: np.ndarray) -> np.ndarray:
        """``sum_s' P[s, o, s'] * values[s']`` for every pair."""
        return (self.P @ values).reshape(self.R.shape)

    def dense(self) -> np.ndarray:
        return self.P.toarray().reshape(self.n_states, self.n_options, self.n_states)

    def require(self, mask: np.ndarray | None = None) -> None:
        """Raise :class:`MissingEntryError` for pairs in ``mask`` without data."""
        missing = ~self.defined if mask is None else (np.asarray(mask, bool) & ~self.defined)
        if missing.any():
            raise MissingEntryError(np.argwhere(missing))

    def distribution(self, state: int, option: int) -> np.ndarray:
        self.require(_single(self.R.shape, state, option))
        return self.P[state * self.n_options + option].toarray().ravel()

    def argmax_end(self) -> np.ndarray:
        """Most likely end state per pair, lowest index on ties; -1 where the row is empty."""
        P = self.P.tocsr()
        out = np.full(P.shape[0], -1, dtype=np.int64)
        for i in range(P.shape[0]):
            lo, hi = P.indptr[i], P.indptr[i + 1]
            if hi > lo:
                row = P.data[lo:hi]
                best = row.max()
                out[i] = P.indices[lo:hi][row == best].min()
        return out.reshape(self.R.shape)

    # delimited text: a header, then "P s o s' value" rows and "R s o r l defined" rows
    def save(self, path: str | Path) -> None:
        coo = self.P.tocoo()
        O = self.n_options
        with open(path, "w") as fh:
            fh.write(f"# option-model v1 kind={self.kind} states={self.n_states} "
                     f"options={O} gamma={float(self.gamma)!r}\n")
            for i, j, v in sorted(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist())):
                fh.write(f"P,{i // O},{i % O},{j},{v!r}\n")
            for s in range(self.n_states):
                for o in range(O):
                    fh.write(f"R,{s},{o},{float(self.R[s, o])!r},{float(self.L[s, o])!r},{int(self.defined[s, o])}\n")

    @classmethod
    def load(cls, path: str | Path) -> "OptionModel":
        with open(path) as fh:
            header = fh.readline().split()
            if header[:3] != ["#", "option-model", "v1"]:
                raise ValueError("not an option-model v1 file")
            meta = dict(kv.split("=", 1) for kv in header[3:])
            S, O = int(meta["states"]), int(meta["options"])
            rows, cols, vals = [], [], []
            R = np.full((S, O), np.nan)
            L = np.full((S, O), np.nan)
            defined = np.zeros((S, O), bool)
            for line in fh:
                parts = line.strip().split(",")
                if parts[0] == "P":
                    s, o, e = int(parts[1]), int(parts[2]), int(parts[3])
                    rows.append(s * O + o)
                    cols.append(e)
                    vals.append(float(parts[4]))
                elif parts[0] == "R":
                    s, o = int(parts[1]), int(parts[2])
                    R[s, o], L[s, o], defined[s, o] = float(parts[3]), float(parts[4]), parts[5] == "1"
        P = sparse.csr_matrix((vals, (rows, cols)), shape=(S * O, S))
        return cls(P, R, L, float(meta["gamma"]), meta["kind"], defined)


def _single(shape, state, option) -> np.ndarray:
    m = np.zeros(shape, bool)
    m[state, option] = True
    return m


# --- exact models ------------------------------------------------------------

def _option_chain(mdp: TabularMDP, option: Option):
    option.check(mdp)
    idx = np.arange(mdp.n_states)
    M = sparse.csr_matrix(mdp.transition[idx, option.policy])
    r = mdp.reward[idx, option.policy]
    beta = np.where(mdp.terminal_mask, 1.0, option.termination)
    return M, r, beta


def _never_stopping(M: sparse.csr_matrix, beta: np.ndarray) -> np.ndarray:
    """States from which the option fails to terminate with positive probability."""
    n = len(beta)
    coo = M.tocoo()
    edges = coo.data > 0
    src, dst = coo.row[edges], coo.col[edges]
    # reverse reachability of "can stop": one step into a state with beta > 0
    can_stop = np.zeros(n, bool)
    can_stop[src[beta[dst] > 0]] = True
    cont = beta[dst] < 1
    c_src, c_dst = src[cont], dst[cont]
    while True:
        grow = np.zeros(n, bool)
        grow[c_src[can_stop[c_dst]]] = True
        new = can_stop | grow
        if (new == can_stop).all():
            break
        can_stop = new
    bad = ~can_stop
    while True:
        grow = np.zeros(n, bool)
        grow[c_src[bad[c_dst]]] = True
        new = bad | grow
        if (new == bad).all():
            return bad
        bad = new


def exact_option_model(mdp: TabularMDP, options: Option | Sequence[Option],
                       tol: float = 1e-10) -> OptionModel:
    """Solve the option-model fixed-point equations for every option.

    With ``M`` the option policy's transition matrix and ``D = diag(beta)``
    (beta forced to 1 at terminal states), the model satisfies

        P = gamma M D + gamma M (I - D) P
        R = r_pi + gamma M (I - D) R
        L = 1 + M (I - D) L

    The first two are solved with one sparse LU factorisation per option. ``L``
    is solved only on states that stop with probability one; the rest get
    ``inf``. The achieved sup-norm residual of all three is checked against
    ``tol``. Pairs outside an option's initiation set, or starting in a
    terminal state, are left undefined.
    """
    options = _as_options(options)
    S, O, gamma = mdp.n_states, len(options), mdp.gamma
    blocks = []
    R = np.zeros((S, O))
    L = np.zeros((S, O))
    defined = np.zeros((S, O), bool)
    eye = sparse.identity(S, format="csc")
    worst = 0.0
    for j, opt in enumerate(options):
        M, r, beta = _option_chain(mdp, opt)
        C = (M @ sparse.diags(1.0 - beta)).tocsc()
        B = (M @ sparse.diags(beta)).toarray() * gamma
        lu = splu((eye - gamma * C).tocsc())
        P_o = lu.solve(B)
        R_o = lu.solve(r)
        bad = _never_stopping(M, beta)
        L_o = np.full(S, np.inf)
        good = np.flatnonzero(~bad)
        if len(good):
            Cg = C.tocsr()[good][:, good]
            L_o[good] = splu((sparse.identity(len(good), format="csc") - Cg).tocsc()).solve(np.ones(len(good)))
        res_P = np.max(np.abs(P_o - B - gamma * (C @ P_o)))
        res_R = np.max(np.abs(R_o - r - gamma * (C @ R_o)))
        res_L = np.max(np.abs(L_o[good] - 1.0 - C.tocsr()[good][:, good] @ L_o[good])) if len(good) else 0.0
        worst = max(worst, res_P, res_R, res_L)
        P_o[np.abs(P_o) < 1e-300] = 0.0
        blocks.append(sparse.csr_matrix(np.clip(P_o, 0.0, None)))
        R[:, j] = R_o
        L[:, j] = L_o
        defined[:, j] = opt.initiation & ~mdp.terminal_mask
    if worst > tol:
        raise ArithmeticError(f"exact option model residual {worst:.3e} exceeds tol {tol:.1e}")
    P = _interleave(blocks, S, O)
    R[~defined] = np.nan
    L[~defined] = np.nan
    return OptionModel(P, R, L, gamma, "exact", defined, residual=worst)


def _interleave(blocks: list[sparse.csr_matrix], S: int, O: int) -> sparse.csr_matrix:
    """Stack per-option (S, S) blocks into rows ``s * O + o``, dropping undefined rows later."""
    stacked = sparse.vstack(blocks, format="csr")  # row o * S + s
    perm = (np.arange(S)[:, None] + S * np.arange(O)[None, :]).ravel()
    return stacked[perm]


# --- trajectory enumeration --------------------------------------------------

@dataclass(frozen=True)
class TrajectoryDistribution:
    """Exact per-(end state, duration) statistics for one option from one start.

    ``mass[s', t]`` is the probability of stopping in ``s'`` after exactly
    ``t`` steps (column 0 is unused), ``returns[s', t]`` the probability-weighted
    discounted return of those trajectories. ``residual`` is the mass still
    running after ``horizon`` steps and ``residual_return`` its weighted return.
    """

    mass: np.ndarray
    returns: np.ndarray
    residual: float
    residual_return: float
    gamma: float

    @property
    def horizon(self) -> int:
        return self.mass.shape[1] - 1

    def discounted_distribution(self) -> np.ndarray:
        return self.mass @ (self.gamma ** np.arange(self.horizon + 1))

    def expected_return(self) -> float:
        return float(self.returns.sum() + self.residual_return)

    def expected_duration(self) -> float:
        """Mean duration counting unfinished trajectories at the horizon (a lower bound)."""
        return float(self.mass.sum(axis=0) @ np.arange(self.horizon + 1) + self.residual * self.horizon)


def enumerate_trajectories(mdp: TabularMDP, option: Option, start: int,
                           horizon: int) -> TrajectoryDistribution:
    """Forward recursion over the not-yet-terminated probability mass."""
    if mdp.n_states > ENUM_MAX_STATES or horizon > ENUM_MAX_HORIZON:
        raise ValueError(f"enumeration limited to {ENUM_MAX_STATES} states and horizon {ENUM_MAX_HORIZON}")
    if horizon < 1:
        raise ValueError("horizon must be positive")
    M, r, beta = _option_chain(mdp, option)
    M = M.toarray()
    S = mdp.n_states
    mass = np.zeros((S, horizon + 1))
    returns = np.zeros((S, horizon + 1))
    alive = np.zeros(S)
    alive[start] = 1.0
    ret = np.zeros(S)  # probability-weighted return of running mass
    for t in range(1, horizon + 1):
        flow_p = alive @ M
        flow_g = (ret + alive * r * mdp.gamma ** (t - 1)) @ M
        mass[:, t] = flow_p * beta
        returns[:, t] = flow_g * beta
        alive = flow_p * (1.0 - beta)
        ret = flow_g * (1.0 - beta)
    return TrajectoryDistribution(mass, returns, float(alive.sum()), float(ret.sum()), mdp.gamma)


# --- sampling and empirical models ---------------------------------------------

def sample_option_outcomes(mdp: TabularMDP, option: Option, starts: np.ndarray,
                           rng: np.random.Generator, t_max: int = DEFAULT_T_MAX):
    """Vectorised call-and-return execution from each entry of ``starts``.

    Returns ``(end, duration, discounted_reward, reward, truncated)`` arrays,
    with the same semantics as :func:`~partial_options.options.execute_option`.
    """
    starts = np.asarray(starts, dtype=np.int64)
    n = len(starts)
    state = starts.copy()
    duration = np.zeros(n, dtype=np.int64)
    disc = np.zeros(n)
    total = np.zeros(n)
    truncated = np.zeros(n, bool)
    running = np.ones(n, bool)
    beta = option.termination
    for t in range(t_max):
        idx = np.flatnonzero(running)
        if len(idx) == 0:
            break
        s = state[idx]
        a = option.policy[s]
        rew = mdp.reward[s, a]
        nxt = mdp.sample_next_many(s, a, rng)
        total[idx] += rew
        disc[idx] += mdp.gamma ** t * rew
        duration[idx] += 1
        state[idx] = nxt
        stop = mdp.terminal_mask[nxt] | (rng.random(len(idx)) < beta[nxt])
        running[idx[stop]] = False
    truncated[running] = True
    return state, duration, disc, total, truncated


def _empirical(S: int, O: int, gamma: float, start, option, end, duration, disc,
               truncated=None) -> OptionModel:
    pair = start * O + option
    counts = np.bincount(pair, minlength=S * O)
    ok = np.ones(len(pair), bool) if truncated is None else ~np.asarray(truncated, bool)
    w = np.where(ok, gamma ** duration.astype(float), 0.0) / np.maximum(counts[pair], 1)
    P = sparse.csr_matrix((w, (pair, end)), shape=(S * O, S))
    P.sum_duplicates()
    P.eliminate_zeros()
    with np.errstate(invalid="ignore", divide="ignore"):
        R = np.bincount(pair, weights=disc, minlength=S * O) / counts
        L = np.bincount(pair, weights=duration.astype(float), minlength=S * O) / counts
    defined = (counts > 0).reshape(S, O)
    return OptionModel(P, R.reshape(S, O), L.reshape(S, O), gamma, "empirical", defined,
                       counts=counts.reshape(S, O))


def empirical_option_model(dataset: Dataset, gamma: float, n_states: int | None = None,
                           n_options: int | None = None) -> OptionModel:
    """Count estimator ``P(s'|s,o) = (1/N) sum_i 1{s'_i = s'} gamma^tau_i``.

    Every logged sample counts towards ``N``; truncated samples contribute no
    end-state mass (they stopped, if at all, beyond ``t_max``). Pairs without
    samples stay undefined rather than zero.
    """
    S = dataset.n_states if n_states is None else n_states
    O = dataset.n_options if n_options is None else n_options
    cols = dataset.arrays()
    return _empirical(S, O, gamma, cols["start"], cols["option"], cols["end"],
                      cols["duration"], cols["discounted_reward"], cols["truncated"])


def empirical_from_samples(n_states: int, n_options: int, gamma: float, start, option, end,
                           duration, discounted_reward, truncated=None) -> OptionModel:
    return _empirical(n_states, n_options, gamma, np.asarray(start), np.asarray(option),
                      np.asarray(end), np.asarray(duration), np.asarray(discounted_reward, float),
                      truncated)


# --- learned models ------------------------------------------------------------

class LearnedModel:
    """Tabular linear model over one-hot (state, option) features.

    Next-state logits are stored sparsely: each pair keeps explicit logits for
    end states it has been trained on plus one shared logit for all the rest.
    Under softmax gradient descent the logits of never-seen end states receive
    identical updates, so sharing them is exact rather than an approximation.
    A new end state's logit starts at the shared value it had all along.

    ``L_hat`` and ``r_hat`` are per-pair scalars. The predicted next-state
    distribution is undiscounted; planning discounts it by
    ``gamma ** max(L_hat, 1)``.
    """

    VERSION = 1

    def __init__(self, n_states: int, n_options: int, gamma: float, lr: float = 1e-4,
                 reward_target: str = "discounted"):
        if reward_target not in ("discounted", "undiscounted"):
            raise ValueError("reward_target must be 'discounted' or 'undiscounted'")
        self.n_states = n_states
        self.n_options = n_options
        self.gamma = float(gamma)
        self.lr = float(lr)
        self.reward_target = reward_target
        n_pairs = n_states * n_options
        self.background = np.zeros(n_pairs)
        self.L_hat = np.zeros(n_pairs)
        self.r_hat = np.zeros(n_pairs)
        self.updates = np.zeros(n_pairs, dtype=np.int64)
        self.slots: dict[int, tuple[list[int], list[float]]] = {}
        self.steps = 0
        self.floor_hits = 0

    # -- prediction --
    def _row(self, pair: int):
        return self.slots.get(pair, ([], []))

    def _softmax(self, pair: int):
        """(explicit end states, their probabilities, probability of each other state)."""
        ends, logits = self._row(pair)
        bg = self.background[pair]
        n_bg = self.n_states - len(ends)
        m = max(logits + [bg]) if logits else bg
        ex = [math.exp(x - m) for x in logits]
        e_bg = math.exp(bg - m)
        Z = sum(ex) + n_bg * e_bg
        return ends, [x / Z for x in ex], e_bg / Z

    def next_state_distribution(self, state: int, option: int) -> np.ndarray:
        ends, probs, q = self._softmax(state * self.n_options + option)
        out = np.full(self.n_states, q)
        out[ends] = probs
        return out

    def prob(self, state: int, option: int, end: int) -> float:
        ends, probs, q = self._softmax(state * self.n_options + option)
        return probs[ends.index(end)] if end in ends else q

    # -- loss and gradient --
    def _target_reward(self, tr: OptionTransition) -> float:
        return tr.discounted_reward if self.reward_target == "discounted" else tr.reward

    def loss_terms(self, tr: OptionTransition) -> tuple[float, float, float]:
        pair = tr.start * self.n_options + tr.option
        nll = 0.0
        if not tr.truncated:
            p = self.prob(tr.start, tr.option, tr.end)
            if p < PROB_FLOOR:
                self.floor_hits += 1
            nll = -math.log(max(p, PROB_FLOOR))
        return (nll, (self.L_hat[pair] - tr.duration) ** 2,
                (self.r_hat[pair] - self._target_reward(tr)) ** 2)

    def gradient(self, batch: Sequence[OptionTransition], mask: Sequence[float], weight: float = 1.0):
        """Gradient of ``weight * masked_loss`` as sparse per-parameter contributions.

        Returns dicts keyed by pair: ``slots[pair] = {end: grad}``,
        ``background[pair] = grad per never-seen logit``, and per-pair scalar
        gradients for ``L_hat`` and ``r_hat``. The background entry is the
        gradient of each individual never-seen logit, not of their sum.
        """
        g_slot: dict[int, dict[int, float]] = {}
        g_bg: dict[int, float] = {}
        g_L: dict[int, float] = {}
        g_r: dict[int, float] = {}
        for tr, a in zip(batch, mask):
            if not a:
                continue
            w = weight * a
            pair = tr.start * self.n_options + tr.option
            if not tr.truncated:
                ends, probs, q = self._softmax(pair)
                row = g_slot.setdefault(pair, {})
                for e, p in zip(ends, probs):
                    row[e] = row.get(e, 0.0) + w * p
                # for an end state without its own logit yet, the entry only
                # holds the -w target part; apply() adds the shared gradient
                row[tr.end] = row.get(tr.end, 0.0) - w
                g_bg[pair] = g_bg.get(pair, 0.0) + w * q
            g_L[pair] = g_L.get(pair, 0.0) + w * 2.0 * (self.L_hat[pair] - tr.duration)
            g_r[pair] = g_r.get(pair, 0.0) + w * 2.0 * (self.r_hat[pair] - self._target_reward(tr))
        return g_slot, g_bg, g_L, g_r

    def apply(self, grads, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        g_slot, g_bg, g_L, g_r = grads
        for pair, row in g_slot.items():
            ends, logits = self.slots.setdefault(pair, ([], []))
            bg = self.background[pair]
            shared = g_bg.get(pair, 0.0)
            for e, g in row.items():
                if e in ends:
                    logits[ends.index(e)] -= lr * g
                else:
                    ends.append(e)
                    logits.append(bg - lr * (shared + g))
        for pair, g in g_bg.items():
            self.background[pair] -= lr * g
        for pair, g in g_L.items():
            self.L_hat[pair] -= lr * g
            self.updates[pair] += 1
        for pair, g in g_r.items():
            self.r_hat[pair] -= lr * g

    # -- flat parameter view, for checkpoints and finite-difference checks --
    def parameters(self) -> np.ndarray:
        keys = sorted(self.slots)
        flat = [self.background, self.L_hat, self.r_hat]
        flat += [np.array(self.slots[k][1]) for k in keys]
        return np.concatenate(flat)

    def set_parameters(self, flat: np.ndarray) -> None:
        n = self.n_states * self.n_options
        flat = np.asarray(flat, dtype=float)
        self.background = flat[:n].copy()
        self.L_hat = flat[n:2 * n].copy()
        self.r_hat = flat[2 * n:3 * n].copy()
        pos = 3 * n
        for k in sorted(self.slots):
            m = len(self.slots[k][1])
            self.slots[k] = (self.slots[k][0], flat[pos:pos + m].tolist())
            pos += m

    def save(self, path: str | Path) -> None:
        keys = sorted(self.slots)
        with open(path, "w") as fh:
            fh.write(f"# learned-model v{self.VERSION} states={self.n_states} options={self.n_options} "
                     f"gamma={float(self.gamma)!r} lr={float(self.lr)!r} reward_target={self.reward_target} "
                     f"steps={self.steps}\n")
            for name, arr in (("background", self.background), ("L_hat", self.L_hat),
                              ("r_hat", self.r_hat), ("updates", self.updates)):
                fh.write(name + " " + " ".join(repr(float(x)) for x in arr) + "\n")
            for k in keys:
                ends, logits = self.slots[k]
                fh.write(f"slot {k} " + " ".join(f"{e}:{float(x)!r}" for e, x in zip(ends, logits)) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "LearnedModel":
        with open(path) as fh:
            header = fh.readline().split()
            if len(header) < 2 or header[1] != "learned-model" or header[2] != f"v{cls.VERSION}":
                raise ValueError("not a learned-model checkpoint of a supported version")
            meta = dict(kv.split("=", 1) for kv in header[3:])
            model = cls(int(meta["states"]), int(meta["options"]), float(meta["gamma"]),
                        float(meta["lr"]), meta["reward_target"])
            model.steps = int(meta["steps"])
            for line in fh:
                parts = line.split()
                if parts[0] == "slot":
                    pairs = [p.split(":") for p in parts[2:]]
                    model.slots[int(parts[1])] = ([int(e) for e, _ in pairs], [float(x) for _, x in pairs])
                else:
                    arr = np.array([float(x) for x in parts[1:]])
                    setattr(model, parts[0], arr.astype(np.int64) if parts[0] == "updates" else arr)
        return model

    # -- planning view --
    @property
    def defined(self) -> np.ndarray:
        return (self.updates > 0).reshape(self.n_states, self.n_options)

    def snapshot(self) -> "LearnedSnapshot":
        S, O = self.n_states, self.n_options
        rows, cols, vals = [], [], []
        q = np.zeros(S * O)
        for pair in np.flatnonzero(self.updates > 0):
            ends, probs, qp = self._softmax(int(pair))
            q[pair] = qp
            for e, p in zip(ends, probs):
                rows.append(pair)
                cols.append(e)
                vals.append(p - qp)
        base = sparse.csr_matrix((vals, (rows, cols)), shape=(S * O, S))
        discount = self.gamma ** np.maximum(self.L_hat, 1.0)
        return LearnedSnapshot(base, q, discount.reshape(S, O), self.r_hat.reshape(S, O).copy(),
                               self.L_hat.reshape(S, O).copy(), self.defined.copy(), self.gamma)


@dataclass(frozen=True, eq=False)
class LearnedSnapshot:
    """Immutable planning view of a :class:`LearnedModel` at one moment."""

    base: sparse.csr_matrix  # explicit probability minus the shared one
    shared: np.ndarray       # probability of each non-explicit end state
    discount: np.ndarray
    reward: np.ndarray
    L: np.ndarray
    defined: np.ndarray
    gamma: float
    kind: str = field(default="learned")

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_options(self) -> int:
        return self.reward.shape[1]

    def mass(self) -> np.ndarray:
        return np.where(self.defined, self.discount, 0.0)

    def expected_next(self, values: np.ndarray) -> np.ndarray:
        flat = self.base @ values + self.shared * values.sum()
        return flat.reshape(self.reward.shape) * self.discount

    def argmax_end(self) -> np.ndarray:
        """Most likely explicitly trained end state; -1 for pairs with none."""
        P = self.base.tocsr()
        out = np.full(P.shape[0], -1, dtype=np.int64)
        for i in np.flatnonzero(np.diff(P.indptr)):
            lo, hi = P.indptr[i], P.indptr[i + 1]
            row = P.data[lo:hi]
            out[i] = P.indices[lo:hi][row == row.max()].min()
        return out.reshape(self.reward.shape)

    def require(self, mask: np.ndarray | None = None) -> None:
        missing = ~self.defined if mask is None else (np.asarray(mask, bool) & ~self.defined)
        if missing.any():
            raise MissingEntryError(np.argwhere(missing))


def masked_loss(model: LearnedModel, batch: Sequence[OptionTransition],
                mask: Sequence[float] | np.ndarray) -> float:
    """``sum_i A_i [-log P(s'_i|s_i,o_i) + (L_hat - T_i)^2 + (r_hat - r_i)^2]``.

    ``mask`` holds the affordance indicator of each transition. Truncated
    transitions skip the next-state term.
    """
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    if len(mask) != len(batch):
        raise ValueError("mask and batch lengths differ")
    total = 0.0
    for tr, a in zip(batch, mask):
        if a:
            total += a * sum(model.loss_terms(tr))
    return total


def train_partial_model(model: LearnedModel, dataset: Dataset, affordances,
                        steps: int, rng: np.random.Generator, batch_size: int = 32,
                        window: int | None = None, divergence_threshold: float = 1e6) -> LearnedModel:
    """Minibatch SGD on the masked loss summed over the replay window.

    Each step draws ``batch_size`` transitions uniformly from the most recent
    ``window`` rows of ``dataset`` and scales the batch gradient by
    ``window / batch_size``, an unbiased estimate of the gradient of the loss
    summed over the window. ``affordances`` is either an ``(S, O)`` mask, a
    callable mapping a batch of transitions to per-transition indicators, or
    ``None`` to afford everything. Raises :class:`DivergenceError` when the mean
    per-transition loss of a batch exceeds ``divergence_threshold`` or is not
    finite.
    """
    if steps <= 0:
        raise ValueError("steps must be positive")
    n = len(dataset)
    if n == 0:
        return model
    lo = 0 if window is None else max(0, n - window)
    size = n - lo
    scale = size / batch_size
    for _ in range(steps):
        picks = lo + rng.integers(size, size=batch_size)
        batch = [dataset[int(i)] for i in picks]
        if affordances is None:
            mask = [1.0] * batch_size
        elif callable(affordances):
            mask = [float(a) for a in affordances(batch)]
        else:
            mask = [float(affordances[tr.start, tr.option]) for tr in batch]
        loss = masked_loss(model, batch, mask)
        active = sum(1 for a in mask if a)
        if not math.isfinite(loss) or (active and loss / active > divergence_threshold):
            raise DivergenceError(model.steps, loss / max(active, 1))
        model.apply(model.gradient(batch, mask, weight=scale))
        model.steps += 1
    return model
