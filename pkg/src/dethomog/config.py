"""Strict, versioned experiment configuration and slow-system construction."""
from __future__ import annotations

import hashlib
import json
from typing import Literal, Optional

import numpy as np
import sympy as sp
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .fastflow import FlowSpec
from .observables import Observable, ergodic_center, from_config, stack
from .sim import SlowSystem

CONFIG_VERSION = 1


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FlowBlock(Strict):
    name: Literal["lorenz", "rotation"] = "lorenz"
    params: dict[str, float] = Field(default_factory=dict)


class ObservableBlock(Strict):
    kind: Literal["coordinate", "polynomial", "constant"]
    index: Optional[int] = None
    mean: Optional[float] = None
    terms: Optional[list[tuple[float, list[int]]]] = None
    value: Optional[float] = None
    scale: Optional[float] = None
    center: bool = False
    name: Optional[str] = None


class SlowBlock(Strict):
    """Slow fields as expressions in x1..xd and y1..yM."""

    form: Literal["general", "product"]
    d: int = Field(ge=1)
    xi: list[float]
    a: Optional[list[str]] = None
    b: Optional[list[str]] = None
    f: Optional[list[list[str]]] = None
    u: Optional[list[ObservableBlock]] = None
    h: Optional[list[list[str]]] = None
    v: Optional[list[ObservableBlock]] = None

    @model_validator(mode="after")
    def _shape(self):
        if len(self.xi) != self.d:
            raise ValueError("xi must have d entries")
        if self.form == "general":
            if self.a is None or self.b is None or len(self.a) != self.d or len(self.b) != self.d:
                raise ValueError("general form needs a and b with d entries each")
            if any(x is not None for x in (self.f, self.u, self.h, self.v)):
                raise ValueError("f, u, h, v belong to the product form")
        else:
            if self.h is None or self.v is None:
                raise ValueError("product form needs h and v")
            if len(self.h) != self.d or any(len(r) != len(self.v) for r in self.h):
                raise ValueError("h must be d x len(v)")
            if self.a is not None or self.b is not None:
                raise ValueError("a and b belong to the general form")
            n_u = len(self.u) if self.u else 1
            if self.f is not None and (len(self.f) != self.d or any(len(r) != n_u for r in self.f)):
                raise ValueError("f must be d x len(u)")
        return self


class SamplingBlock(Strict):
    members: int = Field(200, ge=2)
    burn_in: float = Field(100.0, gt=0)
    dt: float = Field(0.01, gt=0)
    origins: int = Field(1, ge=1)
    gap: float = Field(5.0, gt=0)
    chunk: int = Field(256, ge=1)


class CenteringBlock(Strict):
    members: int = Field(200, ge=1)
    horizon: float = Field(200.0, gt=0)


class EstimatorBlock(Strict):
    method: Literal["window", "correlation", "suspension"] = "window"
    n: float = Field(200.0, gt=0)
    min_n: float = 50.0
    t_max: float = Field(50.0, gt=0)
    lag_step: float = Field(0.02, gt=0)
    n_max: int = Field(20, ge=1)
    returns: int = Field(400, ge=2)
    sampling: SamplingBlock = Field(default_factory=SamplingBlock)
    centering: CenteringBlock = Field(default_factory=CenteringBlock)
    grid: list[tuple[float, float, int]] = Field(default_factory=lambda: [(-3.0, 3.0, 61)])
    interpolation: Literal["nearest", "multilinear"] = "multilinear"
    outside: Literal["clamp", "error"] = "clamp"
    tol_psd: Optional[float] = None


class SimulationBlock(Strict):
    eps: list[float] = Field(default_factory=lambda: [0.5, 0.2, 0.1, 0.05])
    T: float = Field(1.0, gt=0)
    N: int = Field(2000, ge=1)
    dt_fast: float = Field(0.005, gt=0)
    max_dt_fast: float = Field(0.02, gt=0)
    sde_dt: float = Field(1e-3, gt=0)
    guard: float = Field(1e3, gt=0)
    burn_in: float = Field(100.0, gt=0)
    burn_dt: float = Field(0.01, gt=0)
    chunk: int = Field(500, ge=1)
    record_stride: Optional[int] = None
    ks_threshold: float = 0.05
    slack: float = 0.01
    acceptance: bool = False
    null_check: bool = False
    coeff_file: Optional[str] = None


class WipBlock(Strict):
    n: float = Field(100.0, gt=0)
    points: int = Field(11, ge=2)
    dt: float = Field(0.01, gt=0)
    members: int = Field(200, ge=1)
    burn_in: float = Field(100.0, gt=0)
    observables: Optional[list[ObservableBlock]] = None


class SuspensionBlock(Strict):
    members: int = Field(20, ge=2)
    returns: int = Field(200, ge=2)
    n_max: int = Field(20, ge=1)
    dt: float = Field(0.01, gt=0)
    burn_in: float = Field(100.0, gt=0)
    min_return_time: float = Field(0.2, gt=0)
    observables: Optional[list[ObservableBlock]] = None


class RoughBlock(Strict):
    trials: int = Field(10, ge=1)
    dt: float = Field(1e-4, gt=0)
    tol: float = 1e-5


class OutputBlock(Strict):
    directory: str = "out"


class ExperimentConfig(Strict):
    version: Literal[1]
    seed: int = 0
    workers: int = Field(1, ge=1)
    flow: FlowBlock = Field(default_factory=FlowBlock)
    slow: Optional[SlowBlock] = None
    estimator: EstimatorBlock = Field(default_factory=EstimatorBlock)
    simulation: SimulationBlock = Field(default_factory=SimulationBlock)
    wip: WipBlock = Field(default_factory=WipBlock)
    suspension: SuspensionBlock = Field(default_factory=SuspensionBlock)
    rough: RoughBlock = Field(default_factory=RoughBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form (after overrides).

        The thread count and output directory do not affect results and are
        left out, so identical experiments share a hash.
        """
        doc = self.model_dump(mode="json")
        doc.pop("workers", None)
        doc.get("output", {}).pop("directory", None)
        text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ValueError("config must be a mapping")
    return ExperimentConfig.model_validate(raw)


def flow_spec(block: FlowBlock) -> FlowSpec:
    if block.name == "lorenz":
        return FlowSpec.lorenz(**block.params)
    if block.params:
        raise ValueError("the rotation flow takes no parameters")
    return FlowSpec.rotation()


def build_observable(blocks: list[ObservableBlock], spec: FlowSpec, seed: int, centering: CenteringBlock) -> Observable:
    """Stack the listed observables; ``center: true`` uses an ergodic mean."""
    parts = []
    for k, blk in enumerate(blocks):
        cfg = blk.model_dump(exclude_none=True)
        cfg.pop("center")
        obs = from_config(cfg)
        if blk.center:
            obs = ergodic_center(spec, obs, seed + 101 + k, centering.members, centering.horizon)
        parts.append(obs)
    return parts[0] if len(parts) == 1 else stack(*parts)


class _Lambda:
    """Vectorized evaluation of a sympy expression array in (x, y)."""

    def __init__(self, exprs, xs, ys, shape):
        self.shape = shape
        self.fns = [sp.lambdify((xs, ys), e, "numpy") for e in exprs]

    def __call__(self, x, y=None):
        x = np.asarray(x, dtype=float)
        xa = [x[..., i] for i in range(x.shape[-1])]
        if y is None:
            lead = x.shape[:-1]
            ya = []
        else:
            y = np.asarray(y, dtype=float)
            lead = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
            ya = [y[..., i] for i in range(y.shape[-1])]
        vals = [np.broadcast_to(np.asarray(fn(xa, ya), dtype=float), lead) for fn in self.fns]
        return np.stack(vals, axis=-1).reshape(lead + self.shape)


def _symbols(d, M):
    return list(sp.symbols(f"x1:{d + 1}")), list(sp.symbols(f"y1:{M + 1}"))


def _parse(text, names):
    return sp.sympify(text, locals=names)


def build_system(block: SlowBlock, spec: FlowSpec, seed: int, centering: CenteringBlock) -> SlowSystem:
    d, M = block.d, spec.dimension
    xs, ys = _symbols(d, M)
    names = {str(s): s for s in xs + ys}
    if block.form == "general":
        a = [_parse(e, names) for e in block.a]
        b = [_parse(e, names) for e in block.b]
        db = [sp.diff(bi, xk) for bi in b for xk in xs]
        return SlowSystem.general(d, _Lambda(a, xs, ys, (d,)), _Lambda(b, xs, ys, (d,)), _Lambda(db, xs, ys, (d, d)))
    xnames = {str(s): s for s in xs}
    h = [_parse(e, xnames) for row in block.h for e in row]
    e = len(block.v)
    dh = [sp.diff(hi, xk) for hi in h for xk in xs]
    v = build_observable(block.v, spec, seed, centering)
    u = build_observable(block.u, spec, seed + 50, centering) if block.u else None
    kw = {}
    if block.f is not None:
        f = [_parse(t, xnames) for row in block.f for t in row]
        eu = len(block.f[0])
        df = [sp.diff(fi, xk) for fi in f for xk in xs]
        kw = {"f": _Lambda(f, xs, [], (d, eu)), "df": _Lambda(df, xs, [], (d, eu, d))}
    return SlowSystem.product(_Lambda(h, xs, [], (d, e)), _Lambda(dh, xs, [], (d, e, d)), v, d, u=u, **kw)
