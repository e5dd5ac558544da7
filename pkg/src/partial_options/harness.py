"""Experiment orchestration: collect option transitions, train, plan, evaluate.

Three stages share one dataset and one learned model:

* rollout: call-and-return option execution under the train-time affordances;
* trainer: masked SGD on the partial model (and the affordance classifier);
* evaluator: SMDP-QVI on a model snapshot under the plan-time affordances,
  followed by a success-rate measurement.

Sequential mode interleaves the stages in fixed rounds on one thread and is
bitwise reproducible per seed. Concurrent mode runs them as threads that only
communicate through the dataset's append channel and published snapshots.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import taxi
from .affordances import (AffordanceClassifier, AffordanceSet, HEURISTIC_SETS, K_SWEEP, classifier_affordance_set,
                          taxi_heuristic_affordances, taxi_intents, train_affordance_classifier)
from .option_models import DivergenceError, LearnedModel, train_partial_model
from .options import Dataset, EpisodeState, collect_transitions, pretrain_taxi_options
from .planner import evaluate_success, policy_over_options, smdp_qvi

__all__ = [
    "ExperimentConfig",
    "ResultRow",
    "RunResult",
    "RESULT_COLUMNS",
    "run_seed",
    "run_experiment",
    "run_learned_affordance_sweep",
    "transitions_to_success",
    "write_results",
    "read_results",
    "write_set_sizes",
    "sweep_summary",
    "seed_from_env",
]

SET_SIZE_COLUMNS = ("k", "seed", "env_transitions", "learned_set_size")
RESULT_COLUMNS = ("seed", "env_transitions", "learner_updates", "success_rate",
                  "train_set_size", "plan_set_size", "learned_set_size", "wall_ms")
SEED_ENV = "PARTIAL_OPTIONS_SEED"
LEARNED = "learned"


def seed_from_env(default: int = 0) -> int:
    return int(os.environ.get(SEED_ENV, default))


@dataclass(frozen=True)
class ExperimentConfig:
    env: str = "taxi"
    train_set: str = "everything"
    plan_set: str = "everything"
    lr: float = 1e-4
    budget: int = 200_000            # environment (option) transitions per seed
    collect_per_round: int = 1000
    eval_every: int = 500            # learner updates between evaluations
    batch_size: int = 32
    window: int | None = None        # replay window; None keeps everything
    episodes: int = 1000
    t_max: int = 100
    episode_cap: int = taxi.DEFAULT_EPISODE_CAP
    gamma: float = taxi.DEFAULT_GAMMA
    seeds: tuple[int, ...] = (0, 1, 2, 3)
    classifier: bool = False
    classifier_lr: float = 0.5
    k: float = 0.5
    k_sweep: tuple[float, ...] = K_SWEEP
    pickup_variant: str = "depot"
    set_aggregate: str = "argmax"
    qvi_epochs: int = 2000
    qvi_tol: float = 1e-6
    stop_success: float | None = None
    mode: str = "sequential"
    record_wall_time: bool = True

    def __post_init__(self):
        if self.env != "taxi":
            raise ValueError(f"unknown environment {self.env!r}")
        for name in (self.train_set, self.plan_set):
            if name not in HEURISTIC_SETS + (LEARNED,):
                raise ValueError(f"unknown affordance set {name!r}")
        if LEARNED in (self.train_set, self.plan_set) and not self.classifier:
            raise ValueError("learned affordance sets need classifier=true")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ValueError("seeds must be distinct and non-empty")
        if self.mode not in ("sequential", "concurrent"):
            raise ValueError("mode must be sequential or concurrent")
        if self.lr <= 0 or self.budget < 1 or self.collect_per_round < 1 or self.eval_every < 1:
            raise ValueError("lr, budget, collect_per_round and eval_every must be positive")
        if not 0.0 <= self.k < 1.0:
            raise ValueError("k must lie in [0, 1)")

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ExperimentConfig":
        """Build from string values, e.g. a parsed ``key=value`` file."""
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _parse(key, str(raw), fields[key].default)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path, overrides: dict[str, str] | None = None,
                  defaults: dict[str, str] | None = None) -> "ExperimentConfig":
        """Precedence: ``overrides`` over the file over ``defaults`` over field defaults."""
        values = dict(defaults or {})
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line without '=': {line!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
        values.update(overrides or {})
        return cls.from_mapping(values)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _parse(key: str, raw: str, default):
    if key in ("seeds", "k_sweep"):
        items = [x for x in raw.replace(",", " ").split() if x]
        return tuple(int(x) for x in items) if key == "seeds" else tuple(float(x) for x in items)
    if key in ("window", "stop_success"):
        if raw.lower() in ("", "none"):
            return None
        return int(raw) if key == "window" else float(raw)
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{key} expects a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


@dataclass(frozen=True)
class ResultRow:
    seed: int
    env_transitions: int
    learner_updates: int
    success_rate: float
    train_set_size: int
    plan_set_size: int
    learned_set_size: int
    wall_ms: int

    def validate(self) -> None:
        if not 0.0 <= self.success_rate <= 1.0:
            raise ValueError(f"success rate {self.success_rate} outside [0, 1]")
        if min(self.env_transitions, self.learner_updates, self.train_set_size, self.plan_set_size) < 0:
            raise ValueError("counts must be non-negative")


@dataclass
class RunResult:
    seed: int
    rows: list[ResultRow]
    diverged: bool = False
    divergence: str = ""
    set_sizes: list[tuple[int, int]] = field(default_factory=list)  # (env_transitions, learned size)


def _validate_series(rows: Sequence[ResultRow]) -> None:
    last = -1
    for row in rows:
        row.validate()
        if row.env_transitions < last:
            raise ValueError("env_transitions decreased within a run")
        last = row.env_transitions


class _Pipeline:
    """State shared by the three stages for one seed."""

    def __init__(self, config: ExperimentConfig, seed: int):
        self.config = config
        self.seed = seed
        self.mdp = taxi.build_taxi_mdp(config.gamma)
        self.options = pretrain_taxi_options(self.mdp)
        self.starts = taxi.initial_states()
        self.terminal = self.mdp.terminal_mask
        S, O = self.mdp.n_states, len(self.options)
        seeds = np.random.SeedSequence(seed).spawn(3)
        self.rollout_rng, self.train_rng, self.eval_rng = (np.random.default_rng(s) for s in seeds)
        self.dataset = Dataset(S, O)
        self.model = LearnedModel(S, O, config.gamma, config.lr)
        self.intents = taxi_intents(config.pickup_variant) if config.classifier else []
        self.classifier = AffordanceClassifier(S, O, len(self.intents)) if config.classifier else None
        self.episode = EpisodeState(int(self.starts[self.rollout_rng.integers(len(self.starts))]))
        self.fixed = {name: taxi_heuristic_affordances(name) for name in {config.train_set, config.plan_set}
                      if name != LEARNED}
        self.learned: AffordanceSet | None = None
        if config.classifier:
            self.learned = classifier_affordance_set(self.classifier, self.model.snapshot(), config.k,
                                                     self.terminal, config.set_aggregate)
        self.lock = threading.Lock()
        self.t0 = time.perf_counter()

    def affordances(self, name: str) -> AffordanceSet:
        return self.learned if name == LEARNED else self.fixed[name]

    def collect(self, n: int) -> None:
        train = self.affordances(self.config.train_set)
        collect_transitions(self.mdp, self.options, train.options_at, n, self.rollout_rng,
                            self.config.t_max, self.starts, self.dataset, self.episode,
                            self.config.episode_cap)

    def train(self, steps: int) -> None:
        c = self.config
        if self.classifier is not None:
            train_affordance_classifier(self.classifier, self.dataset, self.intents, c.classifier_lr, steps,
                                        self.train_rng, c.batch_size, c.window)
            mask = self.classifier.transition_mask(c.k)
        else:
            mask = self.affordances(c.train_set).membership
        train_partial_model(self.model, self.dataset, mask, steps, self.train_rng, c.batch_size, c.window)

    def refresh_learned(self, snapshot) -> None:
        if self.classifier is not None:
            self.learned = classifier_affordance_set(self.classifier, snapshot, self.config.k, self.terminal,
                                                     self.config.set_aggregate)

    def evaluate(self, snapshot, plan: AffordanceSet, env_transitions: int, updates: int) -> ResultRow:
        c = self.config
        mask = plan.membership & snapshot.defined
        q = smdp_qvi(snapshot, mask, c.qvi_epochs, c.qvi_tol, self.terminal, allow_empty=True)
        policy = policy_over_options(q, mask, self.terminal, fallback=plan)
        rate = evaluate_success(self.mdp, policy, self.options, c.episodes, c.episode_cap, self.eval_rng,
                                self.starts, c.t_max)
        train = self.affordances(c.train_set)
        wall = int(round(1000 * (time.perf_counter() - self.t0))) if c.record_wall_time else 0
        return ResultRow(self.seed, env_transitions, updates, rate, train.size, plan.size,
                         self.learned.size if self.learned is not None else 0, wall)


def _run_sequential(p: _Pipeline) -> RunResult:
    c = p.config
    result = RunResult(p.seed, [])
    while len(p.dataset) < c.budget:
        p.collect(min(c.collect_per_round, c.budget - len(p.dataset)))
        try:
            p.train(c.eval_every)
        except DivergenceError as err:
            result.diverged, result.divergence = True, str(err)
            break
        snapshot = p.model.snapshot()
        p.refresh_learned(snapshot)
        row = p.evaluate(snapshot, p.affordances(c.plan_set), len(p.dataset), p.model.steps)
        result.rows.append(row)
        if p.learned is not None:
            result.set_sizes.append((len(p.dataset), p.learned.size))
        if c.stop_success is not None and row.success_rate >= c.stop_success:
            break
    return result


def _run_concurrent(p: _Pipeline) -> RunResult:
    """Rollout, trainer and evaluator threads; snapshots are the only shared model state."""
    c = p.config
    result = RunResult(p.seed, [])
    done = threading.Event()
    published = threading.Condition()
    state = {"snapshot": None, "version": 0, "transitions": 0, "updates": 0, "trained_rounds": 0}

    def rollout():
        while not done.is_set() and len(p.dataset) < c.budget:
            # backpressure: stay at most one round ahead of the trainer
            with published:
                while (not done.is_set() and
                       len(p.dataset) >= (state["trained_rounds"] + 1) * c.collect_per_round):
                    published.wait(0.05)
            if done.is_set():
                return
            p.collect(min(c.collect_per_round, c.budget - len(p.dataset)))

    def trainer():
        while not done.is_set():
            if len(p.dataset) == 0:
                time.sleep(0.001)
                continue
            n_seen = len(p.dataset)
            try:
                p.train(c.eval_every)
            except DivergenceError as err:
                result.diverged, result.divergence = True, str(err)
                done.set()
                break
            snapshot = p.model.snapshot()
            p.refresh_learned(snapshot)
            with published:
                state.update(snapshot=snapshot, transitions=n_seen, updates=p.model.steps)
                state["version"] += 1
                state["trained_rounds"] += 1
                published.notify_all()
            if n_seen >= c.budget:
                break

    def evaluator():
        seen = 0
        while True:
            with published:
                while state["version"] == seen and not done.is_set():
                    published.wait(0.05)
                if state["version"] == seen and done.is_set():
                    return
                seen = state["version"]
                snapshot, transitions, updates = state["snapshot"], state["transitions"], state["updates"]
            row = p.evaluate(snapshot, p.affordances(c.plan_set), transitions, updates)
            result.rows.append(row)
            if p.learned is not None:
                result.set_sizes.append((transitions, p.learned.size))
            if (c.stop_success is not None and row.success_rate >= c.stop_success) or transitions >= c.budget:
                done.set()
                with published:
                    published.notify_all()
                return

    threads = [threading.Thread(target=f, daemon=True) for f in (rollout, trainer, evaluator)]
    for t in threads:
        t.start()
    threads[2].join()
    done.set()
    for t in threads[:2]:
        t.join()
    return result


def run_seed(config: ExperimentConfig, seed: int) -> RunResult:
    p = _Pipeline(config, seed)
    result = _run_sequential(p) if config.mode == "sequential" else _run_concurrent(p)
    _validate_series(result.rows)
    return result


def run_experiment(config: ExperimentConfig) -> list[RunResult]:
    return [run_seed(config, s) for s in config.seeds]


def run_learned_affordance_sweep(config: ExperimentConfig, ks: Iterable[float] | None = None):
    """One learned-affordance run per threshold ``k``.

    Data is collected under ``config.train_set``; the classifier masks the
    model loss and defines the planning set.

    Returns ``{k: [RunResult per seed]}``; each result's ``set_sizes`` traces
    the learned set size over training.
    """
    ks = config.k_sweep if ks is None else tuple(ks)
    base = config.replace(classifier=True, plan_set=LEARNED)
    return {k: run_experiment(base.replace(k=k)) for k in ks}


def transitions_to_success(result: RunResult, threshold: float = 0.9) -> float:
    """Environment transitions at the first evaluation reaching ``threshold`` (inf if never)."""
    for row in result.rows:
        if row.success_rate >= threshold:
            return float(row.env_transitions)
    return float("inf")


def write_set_sizes(sweep: dict[float, list[RunResult]], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SET_SIZE_COLUMNS)
    for k, results in sweep.items():
        for r in results:
            for transitions, size in r.set_sizes:
                w.writerow([repr(float(k)), r.seed, transitions, size])


def sweep_summary(sweep: dict[float, list[RunResult]], threshold: float = 0.9) -> list[dict]:
    """Per k: mean final learned-set size and mean transitions to ``threshold`` success."""
    out = []
    for k, results in sweep.items():
        sizes = [r.set_sizes[-1][1] for r in results if r.set_sizes]
        reach = [transitions_to_success(r, threshold) for r in results]
        out.append({"k": k,
                    "final_set_size": float(np.mean(sizes)) if sizes else float("nan"),
                    "transitions_to_success": float(np.mean(reach)),
                    "diverged": sum(r.diverged for r in results)})
    return out


def write_results(rows: Iterable[ResultRow], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for row in rows:
        row.validate()
        w.writerow([row.seed, row.env_transitions, row.learner_updates, repr(float(row.success_rate)),
                    row.train_set_size, row.plan_set_size, row.learned_set_size, row.wall_ms])


def results_text(rows: Iterable[ResultRow]) -> str:
    buf = io.StringIO()
    write_results(rows, buf)
    return buf.getvalue()


def read_results(fh) -> list[ResultRow]:
    reader = csv.DictReader(fh)
    if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
        raise ValueError(f"unexpected result header {reader.fieldnames}")
    return [ResultRow(int(r["seed"]), int(r["env_transitions"]), int(r["learner_updates"]),
                      float(r["success_rate"]), int(r["train_set_size"]), int(r["plan_set_size"]),
                      int(r["learned_set_size"]), int(r["wall_ms"])) for r in reader]
