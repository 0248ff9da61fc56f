"""RMSprop updates, validation-driven learning-rate halving and random search."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .errors import NumericError

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    lr: float
    alpha: float = 0.95
    eps: float = 1e-8
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


def rmsprop_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                 state: OptimizerState) -> dict[str, np.ndarray]:
    """One RMSprop update. Returns new parameter arrays; ``state.v`` is replaced in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    new_params = {}
    new_v = dict(state.v)
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name}")
        v = state.v.get(name)
        if v is None:
            v = np.zeros_like(theta)
        v = state.alpha * v + (1.0 - state.alpha) * g * g
        new_v[name] = v
        new_params[name] = theta - state.lr * g / (np.sqrt(v) + state.eps)
    state.v = new_v
    return new_params


def lr_schedule(prev_metric: float | None, new_metric: float, lr: float,
                threshold: float = 0.001, factor: float = 0.5) -> float:
    """Halve ``lr`` when the relative improvement of an error metric falls below ``threshold``."""
    if prev_metric is None:
        return lr
    if prev_metric <= 0:
        raise ValueError(f"previous metric must be positive, got {prev_metric}")
    improvement = (prev_metric - new_metric) / prev_metric
    if improvement < threshold:
        return lr * factor
    return lr


# Random search.

@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"degenerate uniform range [{self.low}, {self.high}]")

    def draw(self, rng):
        return float(rng.uniform(self.low, self.high))


@dataclass(frozen=True)
class LogUniform:
    low: float
    high: float

    def __post_init__(self):
        if not 0 < self.low < self.high:
            raise ValueError(f"log-uniform range needs 0 < low < high, got [{self.low}, {self.high}]")

    def draw(self, rng):
        value = math.exp(rng.uniform(math.log(self.low), math.log(self.high)))
        return float(min(max(value, self.low), self.high))


@dataclass(frozen=True)
class Choice:
    options: tuple

    def __post_init__(self):
        if not self.options:
            raise ValueError("categorical domain needs at least one option")

    def draw(self, rng):
        return self.options[int(rng.integers(len(self.options)))]


@dataclass(frozen=True)
class SearchSpace:
    domains: tuple[tuple[str, Any], ...]

    @classmethod
    def of(cls, **domains) -> "SearchSpace":
        return cls(tuple(domains.items()))

    def draw(self, rng) -> dict[str, Any]:
        return {name: dom.draw(rng) for name, dom in self.domains}


@dataclass
class Trial:
    trial_id: int
    params: dict[str, Any]
    objective: float
    error: str | None = None

    def log_line(self) -> str:
        values = " ".join(f"{k}={v}" for k, v in self.params.items())
        result = f"{self.objective!r}" if self.error is None else f"failed:{self.error}"
        return f"{self.trial_id}\t{values}\t{result}"


def trial_seed(seed: int, trial_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, trial_id])


def random_search(space: SearchSpace, n_trials: int, seed: int,
                  objective: Callable[[dict[str, Any], int], float]) -> list[Trial]:
    """Evaluate ``n_trials`` independent draws, ranked by objective (failures last).

    ``objective(params, trial_id)`` may raise; the failure is recorded on the trial.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    trials = []
    for i in range(n_trials):
        params = space.draw(np.random.default_rng(trial_seed(seed, i)))
        try:
            value = float(objective(params, i))
            trials.append(Trial(i, params, value))
        except Exception as exc:  # noqa: BLE001 - one bad trial must not end the search
            log.warning("trial %d failed: %s", i, exc)
            trials.append(Trial(i, params, math.inf, error=f"{type(exc).__name__}: {exc}"))
    return sorted(trials, key=lambda t: (t.error is not None, t.objective, t.trial_id))


def format_trial_log(trials: Sequence[Trial]) -> str:
    return "".join(t.log_line() + "\n" for t in trials)
