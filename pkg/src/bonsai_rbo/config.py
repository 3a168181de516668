"""Experiment configuration files (JSON, schema-versioned)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .acquisition import AcquisitionOptions, DesignBox, UncertaintySet
from .benchmarks import BENCHMARK_NAMES, make_benchmark
from .driver import RECOMMENDERS, STRATEGIES, RunSettings
from .network import FunctionNetwork
from .problem import RobustProblem

CONFIG_SCHEMA = "bonsai_config/1"
REGRET_SCHEMA = "bonsai_regret_config/1"
PROBLEM_SCHEMA = "bonsai_problem/1"

__all__ = [
    "AcquisitionConfig", "ExperimentConfig", "RegretConfig", "ConfigError",
    "load_config", "load_problem_file", "problem_to_dict",
]


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class AcquisitionConfig(_Strict):
    tau: float = Field(1e-2, gt=0)
    raw: int = Field(512, ge=1)
    starts: int = Field(10, ge=1)
    steps: int = Field(200, ge=1)
    population: int = Field(32, ge=4)
    generations: int = Field(60, ge=1)
    sigma0: float = Field(0.2, gt=0)
    features: int = Field(1024, ge=1)
    polish: bool = True

    def options(self) -> AcquisitionOptions:
        return AcquisitionOptions(**self.model_dump())


class ExperimentConfig(_Strict):
    """One campaign: every strategy crossed with every seed on one problem."""

    schema_version: Literal[CONFIG_SCHEMA] = CONFIG_SCHEMA
    benchmark: Optional[str] = None
    variant: str = "default"
    network_file: Optional[str] = None
    strategies: List[str] = Field(default_factory=lambda: ["BONSAI"], min_length=1)
    budget: int = Field(100, ge=1)
    seeds: List[int] = Field(min_length=1)
    acquisition: AcquisitionConfig = Field(default_factory=AcquisitionConfig)
    recommender: Optional[str] = None
    recommend_every: int = Field(5, ge=1)
    fit_restarts: int = Field(8, ge=1)
    refit_restarts: int = Field(2, ge=1)
    output_dir: str = "runs"

    @field_validator("strategies")
    @classmethod
    def _known_strategies(cls, v):
        bad = [s for s in v if s not in STRATEGIES]
        if bad:
            raise ValueError(f"unknown strategies {bad}; valid: {list(STRATEGIES)}")
        if len(set(v)) != len(v):
            raise ValueError("strategies must be distinct")
        return v

    @field_validator("seeds")
    @classmethod
    def _distinct_seeds(cls, v):
        if len(set(v)) != len(v):
            raise ValueError("seeds must be distinct")
        if any(s < 0 for s in v):
            raise ValueError("seeds must be nonnegative")
        return v

    @field_validator("recommender")
    @classmethod
    def _known_recommender(cls, v):
        if v is not None and v not in RECOMMENDERS:
            raise ValueError(f"unknown recommender {v!r}; valid: {list(RECOMMENDERS)}")
        return v

    @model_validator(mode="after")
    def _problem_and_budget(self):
        if (self.benchmark is None) == (self.network_file is None):
            raise ValueError("set exactly one of 'benchmark' and 'network_file'")
        if self.benchmark is not None and self.benchmark not in BENCHMARK_NAMES:
            raise ValueError(f"unknown benchmark {self.benchmark!r}; valid: {list(BENCHMARK_NAMES)}")
        if self.benchmark is not None:
            n_init = self.problem().n_init
            if self.budget < n_init:
                raise ValueError(f"budget {self.budget} is below the initial design size; "
                                 f"the minimum for {self.benchmark} is {n_init}")
        return self

    def problem(self, base: Optional[Path] = None) -> RobustProblem:
        if self.benchmark is not None:
            return make_benchmark(self.benchmark, self.variant).problem
        path = Path(self.network_file)
        if base is not None and not path.is_absolute():
            path = base / path
        return load_problem_file(path)

    def settings(self) -> RunSettings:
        return RunSettings(acquisition=self.acquisition.options(),
                           recommend_every=self.recommend_every,
                           fit_restarts=self.fit_restarts,
                           refit_restarts=self.refit_restarts,
                           recommender=self.recommender)

    def dumps(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


class RegretConfig(_Strict):
    """Nominal Thompson-sampling regret study on a prior-drawn chain."""

    schema_version: Literal[REGRET_SCHEMA] = REGRET_SCHEMA
    problem: Literal["chain", "single"] = "chain"
    nodes: int = Field(3, ge=1)
    n_designs: int = Field(50, ge=2)
    noise: float = Field(1e-2, gt=0)
    T: int = Field(100, ge=1)
    seeds: List[int] = Field(min_length=1)
    checkpoints: List[int] = Field(default_factory=lambda: [25, 50, 100])
    features: int = Field(1024, ge=1)
    kappa: float = Field(1.0, gt=0)
    output_dir: str = "regret"

    @field_validator("seeds")
    @classmethod
    def _distinct_seeds(cls, v):
        if len(set(v)) != len(v):
            raise ValueError("seeds must be distinct")
        return v

    @model_validator(mode="after")
    def _checkpoints_in_range(self):
        bad = [t for t in self.checkpoints if not 1 <= t <= self.T]
        if bad:
            raise ValueError(f"checkpoints {bad} lie outside 1..{self.T}")
        return self

    def dumps(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"  {loc}: {err['msg']}")
    return "\n".join(lines)


def load_config(path, model=None):
    """Parse a config file; the model is chosen from its ``schema_version``."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if model is None:
        version = raw.get("schema_version", CONFIG_SCHEMA) if isinstance(raw, dict) else None
        model = {CONFIG_SCHEMA: ExperimentConfig, REGRET_SCHEMA: RegretConfig}.get(version)
        if model is None:
            raise ConfigError(f"{path}: unknown schema_version {version!r}")
    try:
        return model.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{path}: invalid configuration\n{_format_errors(exc)}") from None


def problem_to_dict(problem: RobustProblem) -> dict:
    return {
        "schema_version": PROBLEM_SCHEMA,
        "name": problem.name,
        "network": problem.net.to_dict(),
        "design_box": problem.X.to_list(),
        "uncertainty_points": problem.W.points.tolist(),
        "nominal": problem.W.nominal.tolist(),
    }


def load_problem_file(path) -> RobustProblem:
    """A custom problem: network with importable node functions, box and scenarios."""
    d = json.loads(Path(path).read_text())
    if d.get("schema_version") != PROBLEM_SCHEMA:
        raise ConfigError(f"{path}: expected schema_version {PROBLEM_SCHEMA!r}")
    net = FunctionNetwork.from_dict(d["network"])
    return RobustProblem(d.get("name", Path(path).stem), net, DesignBox.from_pairs(d["design_box"]),
                         UncertaintySet(d["uncertainty_points"], d["nominal"]))
