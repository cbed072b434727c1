"""Run configuration: one strict JSON document driving every command.

Unknown keys are rejected at every level so a typo fails fast instead of
silently training with a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .training import JointTrainConfig, PriorTrainConfig

__all__ = ["ConfigError", "RunConfig", "load_config"]


class ConfigError(ValueError):
    """Invalid run configuration (maps to exit code 2)."""


def _build(cls, data, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in {section}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from None


@dataclass
class Paths:
    graph: str | None = None
    domains: str | None = None
    fitness: str | None = None
    output: str = "out"


@dataclass
class PriorsSection(PriorTrainConfig):
    domains: list | None = None


@dataclass
class JointSection(JointTrainConfig):
    depth: int = 1
    priors_checkpoint: str | None = None
    disjointness: dict | None = None
    holdout_test_edges: bool = False

    def __post_init__(self):
        super().__post_init__()
        if self.depth < 1:
            raise ValueError("depth must be >= 1")


@dataclass
class FitnessSection:
    epochs: int = 160
    lr: float = 1e-4
    alpha: float = 0.1
    beta_neg: float = 0.05
    gamma_random: float = 0.0
    lambda_wd: float = 0.1
    lambda_small: float = 0.0
    l0: float = 1.0
    folds: int = 5
    batch_size: int | None = None
    depth: int = 2
    combiner: str = "product"
    head_dims: list = field(default_factory=lambda: [64, 1])
    temp: float = 0.25
    norm: str = "l2"
    exclude_gene_domain: bool = True
    include_layer0: bool = True
    freeze_gnn: bool = False
    fine_tune_priors: bool = True
    gene_domain: str = "gene"
    priors_checkpoint: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not self.head_dims or self.head_dims[-1] != 1:
            raise ValueError("head_dims must end with a single output neuron")


@dataclass
class AttributionSection:
    pairs: list | None = None
    allow_predicates: list = field(default_factory=list)
    allow_superclasses: list = field(default_factory=list)


@dataclass
class LinkEvalSection:
    test_fraction: float = 0.2
    displacement_mode: str = "corners"
    kinds: list = field(default_factory=lambda: ["real", "constrained", "random"])
    split_seed: int | None = None

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.displacement_mode not in ("corners", "eq6"):
            raise ValueError(f"unknown displacement_mode {self.displacement_mode!r}")


@dataclass
class SyntheticSection:
    preset: str = "fitness"
    n_genes: int = 30
    dim_prior: int | None = None
    dim_gnn: int | None = None

    def __post_init__(self):
        if self.preset not in ("fitness", "hierarchy"):
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.n_genes < 2:
            raise ValueError("n_genes must be >= 2")


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    mode: str = "distance"
    seed: int = 0
    dims: dict = field(default_factory=dict)
    priors: PriorsSection = field(default_factory=PriorsSection)
    joint: JointSection = field(default_factory=JointSection)
    fitness: FitnessSection = field(default_factory=FitnessSection)
    attribution: AttributionSection = field(default_factory=AttributionSection)
    linkeval: LinkEvalSection = field(default_factory=LinkEvalSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)

    def __post_init__(self):
        if self.mode not in ("distance", "overlap"):
            raise ConfigError(f"mode must be 'distance' or 'overlap', got {self.mode!r}")
        for name, dims in self.dims.items():
            ok = (
                isinstance(dims, (list, tuple))
                and len(dims) == 2
                and all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in dims)
            )
            if not ok:
                raise ConfigError(
                    f"dims[{name!r}] must be [dim_prior, dim_gnn] with positive integers"
                )

    def snapshot(self) -> dict:
        """Plain-dict copy for embedding in checkpoints."""
        return dataclasses.asdict(self)


_SECTIONS = {
    "paths": Paths,
    "priors": PriorsSection,
    "joint": JointSection,
    "fitness": FitnessSection,
    "attribution": AttributionSection,
    "linkeval": LinkEvalSection,
    "synthetic": SyntheticSection,
}


def parse_config(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"mode", "seed", "dims"})
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in config")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build(cls, raw[name], name)
    if "dims" in raw:
        if not isinstance(raw["dims"], dict):
            raise ConfigError("dims: expected an object")
        kwargs["dims"] = raw["dims"]
    if "mode" in raw:
        kwargs["mode"] = raw["mode"]
    if "seed" in raw:
        seed = raw["seed"]
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = seed
    return RunConfig(**kwargs)


def load_config(path: str | None) -> RunConfig:
    """Parse the file at `path`; None gives the all-defaults configuration."""
    if path is None:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text)
