"""Population-based training: members train in parallel, then the weakest
copy weights and hyperparameters from the strongest and perturb them."""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

import numpy as np

from .model import EncoderConfig, build_model
from .optim import AdamWState
from .rng import stream
from .trainer import QASession, TrainConfig


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: str  # log_uniform | uniform | categorical
    low: float | None = None
    high: float | None = None
    choices: tuple = ()

    def __post_init__(self):
        if self.kind in ("log_uniform", "uniform"):
            if self.low is None or self.high is None or self.low > self.high:
                raise ValueError(f"{self.name}: bounds must satisfy low <= high")
            if self.kind == "log_uniform" and self.low <= 0:
                raise ValueError(f"{self.name}: log_uniform bounds must be positive")
        elif self.kind == "categorical":
            if not self.choices:
                raise ValueError(f"{self.name}: categorical choices must be non-empty")
        else:
            raise ValueError(f"{self.name}: unknown kind {self.kind!r}")

    def sample(self, rng: np.random.Generator):
        if self.kind == "log_uniform":
            return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))
        if self.kind == "uniform":
            return float(rng.uniform(self.low, self.high))
        return self.choices[int(rng.integers(len(self.choices)))]

    def clip(self, value):
        if self.kind == "categorical":
            return value
        return float(min(self.high, max(self.low, value)))


@dataclass(frozen=True)
class SearchSpace:
    params: tuple[ParamSpec, ...]

    def __getitem__(self, name: str) -> ParamSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def names(self) -> list[str]:
        return [p.name for p in self.params]

    @classmethod
    def from_dict(cls, d: dict) -> SearchSpace:
        specs = []
        for name, spec in d.items():
            if spec["kind"] == "categorical":
                specs.append(ParamSpec(name, "categorical", choices=tuple(spec["choices"])))
            else:
                specs.append(ParamSpec(name, spec["kind"], float(spec["low"]), float(spec["high"])))
        return cls(tuple(specs))

    def to_dict(self) -> dict:
        out = {}
        for p in self.params:
            if p.kind == "categorical":
                out[p.name] = {"kind": p.kind, "choices": list(p.choices)}
            else:
                out[p.name] = {"kind": p.kind, "low": p.low, "high": p.high}
        return out


DEFAULT_SPACE = SearchSpace((
    ParamSpec("learning_rate", "log_uniform", 1e-5, 1e-4),
    ParamSpec("dropout", "uniform", 0.0, 0.3),
    ParamSpec("warmup_fraction", "uniform", 0.0, 0.2),
    ParamSpec("batch_size", "categorical", choices=(4, 8, 16)),
))


def sample_space(space: SearchSpace, rng: np.random.Generator) -> dict[str, Any]:
    return {p.name: p.sample(rng) for p in space.params}


@dataclass
class PopulationMember:
    member_id: int
    hyperparameters: dict[str, Any]
    snapshot: Any = None
    score: float | None = None
    tiebreak: float = 0.0
    lineage: list[tuple] = field(default_factory=list)


def _rank_key(m: PopulationMember):
    return (-m.score, -m.tiebreak, m.member_id)


def explore(hparams: dict[str, Any], space: SearchSpace, rng: np.random.Generator,
            perturb_factors=(0.8, 1.25), resample_prob: float = 0.25) -> dict[str, Any]:
    """Resample each hyperparameter with ``resample_prob``, otherwise perturb it.

    Numeric values are scaled by a random factor and clipped to their bounds;
    categorical values step to a neighbouring choice.
    """
    out = dict(hparams)
    for spec in space.params:
        if spec.name not in out:
            continue
        if rng.random() < resample_prob:
            out[spec.name] = spec.sample(rng)
        elif spec.kind == "categorical":
            idx = list(spec.choices).index(out[spec.name]) if out[spec.name] in spec.choices else 0
            step = -1 if rng.random() < 0.5 else 1
            out[spec.name] = spec.choices[min(len(spec.choices) - 1, max(0, idx + step))]
        else:
            factor = perturb_factors[int(rng.integers(len(perturb_factors)))]
            out[spec.name] = spec.clip(out[spec.name] * factor)
    return out


def pbt_step(population: list[PopulationMember], space: SearchSpace, rng: np.random.Generator,
             generation: int = 0, quantile: float = 0.25, perturb_factors=(0.8, 1.25),
             resample_prob: float = 0.25) -> list[PopulationMember]:
    """Exploit/explore one generation; mutates and returns ``population``."""
    if len(population) < 2:
        raise ValueError("pbt_step needs a population of at least 2")
    for m in population:
        if m.score is None:
            raise ValueError(f"member {m.member_id} has no score this generation")
    ranked = sorted(population, key=_rank_key)
    k = max(1, int(math.floor(quantile * len(ranked))))
    top, bottom = ranked[:k], ranked[-k:]
    bottom_ids = {m.member_id for m in bottom}
    for m in population:
        if m.member_id not in bottom_ids:
            m.lineage.append((generation, "kept"))
    for m in bottom:
        src = top[int(rng.integers(len(top)))]
        m.snapshot = copy.deepcopy(src.snapshot)
        m.hyperparameters = explore(src.hyperparameters, space, rng, perturb_factors, resample_prob)
        m.lineage.append((generation, f"exploited-from({src.member_id})"))
        m.lineage.append((generation, "explored"))
    return population


class Trainable(Protocol):
    def set_hyperparameters(self, hparams: dict[str, Any]) -> None: ...
    def train(self, steps: int) -> None: ...
    def evaluate(self) -> float | tuple[float, float]: ...
    def get_state(self) -> Any: ...
    def set_state(self, state: Any) -> None: ...


@dataclass
class PBTResult:
    best_hyperparameters: dict[str, Any]
    best_score: float
    best_state: Any
    best_member: int
    best_generation: int
    history: list[dict] = field(default_factory=list)
    best_so_far: list[float] = field(default_factory=list)
    lineages: dict[int, list[tuple]] = field(default_factory=dict)

    def history_csv(self) -> str:
        keys = sorted({k for row in self.history for k in row["hyperparameters"]})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["generation", "member", "score", "tiebreak", *keys])
        for row in self.history:
            w.writerow([row["generation"], row["member"], repr(row["score"]), repr(row["tiebreak"]),
                        *[row["hyperparameters"].get(k, "") for k in keys]])
        return buf.getvalue()

    def to_json(self) -> str:
        d = {
            "best_hyperparameters": self.best_hyperparameters,
            "best_score": self.best_score,
            "best_member": self.best_member,
            "best_generation": self.best_generation,
            "best_so_far": self.best_so_far,
            "history": self.history,
            "lineages": {str(k): [list(x) for x in v] for k, v in self.lineages.items()},
        }
        return json.dumps(d, indent=1) + "\n"


def _score_pair(result) -> tuple[float, float]:
    if isinstance(result, tuple):
        return float(result[0]), float(result[1])
    return float(result), 0.0


def pbt_search(trainable_factory: Callable[[dict[str, Any], int], Trainable], space: SearchSpace,
               population_size: int = 8, generations: int = 10, steps_per_generation: int = 1,
               seed: int = 0, quantile: float = 0.25, perturb_factors=(0.8, 1.25),
               resample_prob: float = 0.25, initial: list[dict[str, Any]] | None = None,
               jobs: int = 1) -> PBTResult:
    """Run PBT and return the best member ever scored.

    ``trainable_factory(hparams, member_seed)`` builds one member.  Each
    member draws its randomness from its own sub-stream of ``seed``, so
    ``jobs > 1`` reproduces the serial history.  ``initial`` optionally fixes
    the hyperparameters of the first members.
    """
    if population_size < 1:
        raise ValueError("population_size must be >= 1")
    init_rng = stream(seed, "hpo-init")
    members, trainables = [], []
    for i in range(population_size):
        hp = dict(initial[i]) if initial and i < len(initial) else sample_space(space, init_rng)
        members.append(PopulationMember(i, hp))
        trainables.append(trainable_factory(hp, int(stream(seed, "hpo-member", i).integers(2**31))))

    history: list[dict] = []
    best: tuple | None = None
    best_so_far: list[float] = []

    def run(i: int):
        t = trainables[i]
        try:
            t.train(steps_per_generation)
            return _score_pair(t.evaluate())
        except Exception as exc:
            raise RuntimeError(f"population member {i} failed: {exc}") from exc

    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for gen in range(generations):
            results = list(pool.map(run, range(population_size))) if pool else [run(i) for i in range(population_size)]
            for m, (score, tie) in zip(members, results):
                m.score, m.tiebreak = score, tie
                m.snapshot = trainables[m.member_id].get_state()
                history.append({"generation": gen, "member": m.member_id, "score": score, "tiebreak": tie,
                                "hyperparameters": dict(m.hyperparameters)})
                if best is None or (score, tie) > (best[0], best[1]):
                    best = (score, tie, m.member_id, gen, dict(m.hyperparameters), copy.deepcopy(m.snapshot))
            best_so_far.append(best[0])
            if population_size >= 2 and gen < generations - 1:
                before = {m.member_id: len(m.lineage) for m in members}
                pbt_step(members, space, stream(seed, "hpo", gen), gen, quantile, perturb_factors, resample_prob)
                for m in members:
                    if any(a.startswith("exploited") for _, a in m.lineage[before[m.member_id]:]):
                        trainables[m.member_id].set_state(copy.deepcopy(m.snapshot))
                        trainables[m.member_id].set_hyperparameters(m.hyperparameters)
            else:
                for m in members:
                    m.lineage.append((gen, "kept"))
    finally:
        if pool:
            pool.shutdown()
    if best is None:
        raise ValueError("pbt_search needs at least one generation")
    score, _tie, mid, gen, hp, state = best
    return PBTResult(hp, score, state, mid, gen, history, best_so_far,
                     {m.member_id: list(m.lineage) for m in members})


# ---------------------------------------------------------------- trainables


class SurrogateTrainable:
    """Weightless analytic objective ``1 - (ln lr - ln optimum)^2 / K``."""

    def __init__(self, hparams: dict[str, Any], seed: int = 0, optimum: float = 3e-5, K: float = 10.0):
        self.hparams = dict(hparams)
        self.optimum = optimum
        self.K = K

    def set_hyperparameters(self, hparams):
        self.hparams = dict(hparams)

    def train(self, steps: int) -> None:
        pass

    def evaluate(self) -> float:
        d = math.log(self.hparams["learning_rate"]) - math.log(self.optimum)
        return 1.0 - d * d / self.K

    def get_state(self):
        return None

    def set_state(self, state) -> None:
        pass


def surrogate_factory(optimum: float = 3e-5, K: float = 10.0):
    return lambda hp, seed: SurrogateTrainable(hp, seed, optimum, K)


class QATrainable:
    """One fine-tuning run; ``train(steps)`` runs ``steps`` epochs.

    ``learning_rate``, ``warmup_fraction``, ``batch_size`` and ``dropout``
    hyperparameters override the base training and model configs.  Every
    member starts from the same initialization (``init_seed``) and shuffles
    with its own ``seed``.
    """

    def __init__(self, hparams: dict[str, Any], seed: int, model_config: EncoderConfig,
                 base_config: TrainConfig, train_features, val, total_epochs: int, init_seed: int = 0):
        model = build_model(model_config, init_seed)
        config = dataclasses.replace(base_config, seed=seed)
        self.session = QASession(model, train_features, config, total_epochs)
        self.val = val
        self.set_hyperparameters(hparams)

    def set_hyperparameters(self, hparams: dict[str, Any]) -> None:
        changes = {k: hparams[k] for k in ("learning_rate", "warmup_fraction") if k in hparams}
        if "batch_size" in hparams:
            changes["batch_size"] = int(hparams["batch_size"])
        self.session.config = dataclasses.replace(self.session.config, **changes)
        if "dropout" in hparams:
            self.session.model = self.session.model.with_dropout(float(hparams["dropout"]))

    def train(self, steps: int) -> None:
        for _ in range(steps):
            self.session.run_epoch()

    def evaluate(self) -> tuple[float, float]:
        report = self.session.evaluate(self.val)
        return report.f1, report.exact_match

    def get_state(self):
        return self.session.model.state_dict()

    def set_state(self, state) -> None:
        self.session.model.load_state_dict(state)
        self.session.state = AdamWState()


def qa_factory(model_config: EncoderConfig, base_config: TrainConfig, train_features, val,
               total_epochs: int, init_seed: int = 0):
    return lambda hp, seed: QATrainable(hp, seed, model_config, base_config, train_features, val,
                                        total_epochs, init_seed)
