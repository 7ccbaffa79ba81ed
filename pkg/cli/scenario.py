"""
cli/scenario.py
───────────────
Scenario schema (pydantic) and its translation into a differential
structure, a θ assignment and solver options.

Complex matrices are written row-major as a flat list of [re, im] pairs;
nested rows of pairs are accepted on input and normalized to the flat form.
"""

import json
import logging
import os
import sys
from typing import Annotated, Any, Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from shared.errors import ScenarioError
from core.matalg import Algebra
from core.diffstruct import Direction, DifferentialStructure, identity_hom, parity_hom, validate_structure
from core.builders import BUILDERS, random_lindblad
from core.opcalc import arithmetic
from core.transport import SolverOptions, ThetaAssignment

logger = logging.getLogger("Scenario")

ComplexMatrix = List[List[float]]


def _flatten(value):
    """Accept flat [[re,im],...] or nested rows [[[re,im],...],...]."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 3 and arr.shape[-1] == 2:
        arr = arr.reshape(-1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("complex matrix must be a row-major list of [re, im] pairs")
    n = int(round(np.sqrt(arr.shape[0])))
    if n * n != arr.shape[0]:
        raise ValueError(f"{arr.shape[0]} entries do not form a square matrix")
    return arr.tolist()


def to_matrix(pairs) -> np.ndarray:
    arr = np.asarray(pairs, dtype=float)
    n = int(round(np.sqrt(arr.shape[0])))
    return (arr[:, 0] + 1j * arr[:, 1]).reshape(n, n)


def from_matrix(M) -> ComplexMatrix:
    return [[float(z.real), float(z.imag)] for z in np.asarray(M, dtype=complex).ravel()]


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ─── Structure ───────────────────────────────────────────────────────────────

class BuilderStructure(_Model):
    kind:   Literal["builder"] = "builder"
    name:   Literal["lindblad", "random_lindblad", "markov_lindblad", "markov_graph",
                    "hypercube", "fermion_ou", "depolarizing"]
    params: Dict[str, Any] = Field(default_factory=dict)


class AlgebraSpec(_Model):
    kind:    Literal["full", "diagonal", "clifford"] = "full"
    n:       int = Field(ge=1)
    weights: Optional[List[float]] = None


class DirectionSpec(_Model):
    V:     ComplexMatrix
    omega: float
    jstar: int = Field(ge=0)
    ell:   Literal["identity", "parity"] = "identity"
    r:     Literal["identity", "parity"] = "identity"

    @field_validator("V", mode="before")
    @classmethod
    def _flat_V(cls, v):
        return _flatten(v)


class ExplicitStructure(_Model):
    kind:       Literal["explicit"] = "explicit"
    algebra:    AlgebraSpec
    directions: List[DirectionSpec] = Field(min_length=1)
    sigma:      ComplexMatrix

    @field_validator("sigma", mode="before")
    @classmethod
    def _flat_sigma(cls, v):
        return _flatten(v)

    @model_validator(mode="after")
    def _jstar_in_range(self):
        k = len(self.directions)
        for i, d in enumerate(self.directions):
            if d.jstar >= k:
                raise ValueError(f"directions[{i}].jstar = {d.jstar} out of range")
        return self


StructureSpec = Annotated[Union[BuilderStructure, ExplicitStructure], Field(discriminator="kind")]


class ThetaSpec(_Model):
    kind: Literal["logarithmic", "power", "arithmetic"] = "logarithmic"
    m:    Optional[float] = None


class SolverSpec(_Model):
    grid_n:          int = Field(default=16, ge=1)
    max_iter:        int = Field(default=500, ge=1)
    primal_tol:      float = Field(default=1e-7, gt=0)
    eps_boundary:    float = Field(default=1e-6, gt=0)
    allow_nonconvex: bool = False


# ─── Tasks ───────────────────────────────────────────────────────────────────

class _Task(_Model):
    name: Optional[str] = None


class ValidateTask(_Task):
    command: Literal["validate"]


class DistanceTask(_Task):
    command:   Literal["distance"]
    endpoints: List[ComplexMatrix] = Field(min_length=1)
    reference: Optional[List[ComplexMatrix]] = None

    @field_validator("endpoints", "reference", mode="before")
    @classmethod
    def _flat_list(cls, v):
        return None if v is None else [_flatten(m) for m in v]


class RicciTask(_Task):
    command:   Literal["ricci"]
    samples:   int = Field(default=200, ge=1)
    refine:    int = Field(default=5, ge=0)
    witnesses: bool = False


class InequalitiesTask(_Task):
    command:           Literal["inequalities"]
    samples:           int = Field(default=100, ge=1)
    transport_samples: Optional[int] = Field(default=None, ge=1)   # None: INEQ_SAMPLES


class EvolveTask(_Task):
    command: Literal["evolve"]
    rho0:    ComplexMatrix
    t_max:   float = Field(default=2.0, gt=0)
    steps:   int = Field(default=20, ge=1)

    @field_validator("rho0", mode="before")
    @classmethod
    def _flat_rho(cls, v):
        return _flatten(v)


class GeodesicTask(_Task):
    command: Literal["geodesic"]
    rho0:    ComplexMatrix
    A0:      ComplexMatrix
    T:       float = Field(default=1.0, gt=0)
    steps:   int = Field(default=100, ge=1)

    @field_validator("rho0", "A0", mode="before")
    @classmethod
    def _flat(cls, v):
        return _flatten(v)


Task = Annotated[
    Union[ValidateTask, DistanceTask, RicciTask, InequalitiesTask, EvolveTask, GeodesicTask],
    Field(discriminator="command"),
]


class OutputSpec(_Model):
    dir:      Optional[str] = None
    prefix:   str = ""


class Scenario(_Model):
    structure: StructureSpec
    theta:     ThetaSpec = Field(default_factory=ThetaSpec)
    solver:    SolverSpec = Field(default_factory=SolverSpec)
    tasks:     List[Task] = Field(default_factory=lambda: [ValidateTask(command="validate")])
    output:    OutputSpec = Field(default_factory=OutputSpec)
    seed:      int = 0

    def normalized(self) -> Dict:
        return self.model_dump(mode="json")


# ─── Loading ─────────────────────────────────────────────────────────────────

def parse_scenario(text: str, source="<scenario>") -> Scenario:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{source}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    try:
        return Scenario.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(p) for p in first["loc"])
        raise ScenarioError(f"{source}: {loc}: {first['msg']}") from e


def load_scenario(path) -> Scenario:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ScenarioError(f"cannot read scenario {path}: {e}") from e
    return parse_scenario(text, os.path.basename(str(path)))


# ─── Construction ────────────────────────────────────────────────────────────

def _builder_structure(spec: BuilderStructure, seed) -> DifferentialStructure:
    p = dict(spec.params)
    try:
        if spec.name == "lindblad":
            V_list = [to_matrix(_flatten(v)) for v in p["V"]]
            return BUILDERS["lindblad"](V_list, to_matrix(_flatten(p["sigma"])))
        if spec.name == "random_lindblad":
            rng = np.random.default_rng(p.get("seed", seed))
            return random_lindblad(rng, int(p.get("n", 3)), p.get("pairs"))
        if spec.name in ("markov_lindblad", "markov_graph"):
            return BUILDERS[spec.name](np.asarray(p["q"], dtype=float), np.asarray(p["pi"], dtype=float))
        if spec.name in ("hypercube", "fermion_ou"):
            return BUILDERS[spec.name](int(p["n"]))
        alg = p.get("n", 2)
        if p.get("diagonal"):
            alg = Algebra.diagonal(int(p.get("n", 2)), p.get("weights"))
        return BUILDERS["depolarizing"](float(p.get("gamma", 1.0)), alg, p.get("pauli"))
    except KeyError as e:
        raise ScenarioError(f"structure.params: missing {e.args[0]!r} for builder '{spec.name}'") from e


def _explicit_structure(spec: ExplicitStructure) -> DifferentialStructure:
    a = spec.algebra
    if a.kind == "full":
        alg = Algebra.full(a.n)
    elif a.kind == "diagonal":
        alg = Algebra.diagonal(a.n, a.weights)
    else:
        alg = Algebra.clifford(a.n)
    homs = {"identity": identity_hom(alg)}
    if any("parity" in (d.ell, d.r) for d in spec.directions):
        if a.kind != "clifford":
            raise ScenarioError("structure.directions: parity maps need a clifford algebra")
        homs["parity"] = parity_hom(alg)
    dirs = [Direction(alg, homs[d.ell], homs[d.r], to_matrix(d.V), d.omega, d.jstar, f"d{j}")
            for j, d in enumerate(spec.directions)]
    sigma = alg.state(to_matrix(spec.sigma))
    ds = DifferentialStructure(alg, dirs, sigma, "explicit")
    validate_structure(ds)
    return ds


def build_structure(scn: Scenario) -> DifferentialStructure:
    """Structure for ``scn``; builder errors propagate, explicit structures
    come back validated or with a failing report attached."""
    if isinstance(scn.structure, BuilderStructure):
        return _builder_structure(scn.structure, scn.seed)
    return _explicit_structure(scn.structure)


def build_theta(scn: Scenario, ds: DifferentialStructure) -> ThetaAssignment:
    t = scn.theta
    if t.kind == "logarithmic":
        return ThetaAssignment.default(ds)
    if t.kind == "arithmetic":
        return ThetaAssignment.uniform(ds, arithmetic())
    if t.m is None:
        raise ScenarioError("theta.m: required for the power family")
    return ThetaAssignment.power(ds, t.m)


def build_options(scn: Scenario, allow_nonconvex=False) -> SolverOptions:
    s = scn.solver
    return SolverOptions(s.grid_n, s.max_iter, s.primal_tol, s.eps_boundary,
                         s.allow_nonconvex or allow_nonconvex)


