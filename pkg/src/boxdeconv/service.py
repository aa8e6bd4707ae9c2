"""In-process HTTP service exposing validation, blur, and reconstruction.

The service owns payload validation (unknown keys are rejected) and maps
domain failures to structured error bodies; the command-line client talks
to it through an in-process ASGI transport, so the HTTP surface is the
single entry point for all I/O.
"""

from __future__ import annotations

import time
from typing import Literal

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, ConfigDict, model_validator

from .errors import DeconvError, ResidualTooLarge, StaircaseViolation, ZeroMeasure
from .forward import BlurredFn, QuadratureRule, blur, default_region, grid_axes
from .geometry import BlurConfig, Rect, validate_staircase
from .reconstruct import ReconstructOptions, ReconstructionResult, reconstruct
from .smoothfn import C2Fn, PolyBump, PolyFn, add

__all__ = ["app", "create_app"]


class ProblemIn(BaseModel):
    """Rectangle family and weights of the averaging kernel."""

    model_config = ConfigDict(extra="forbid")

    rectangles: list[list[float]]
    weights: list[float | list[float]]

    @model_validator(mode="after")
    def _check_shapes(self) -> "ProblemIn":
        for i, quad in enumerate(self.rectangles):
            if len(quad) != 4:
                raise ValueError(f"rectangle {i + 1} needs exactly [a, b, c, d]")
        for i, w in enumerate(self.weights):
            if isinstance(w, list) and len(w) not in (1, 2):
                raise ValueError(f"weight {i + 1} needs a scalar or [re, im]")
        return self


class FunctionIn(BaseModel):
    """Built-in function descriptor: bump, polynomial, sum, or blurred data."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["polybump", "polynomial", "sum-of-bumps", "blurred"]
    x0: float = 0.0
    y0: float = 0.0
    rx: float = 1.0
    ry: float = 1.0
    amp: float = 1.0
    coeffs: list[list[float]] | None = None
    bumps: list[FunctionIn] | None = None
    inner: FunctionIn | None = None

    @model_validator(mode="after")
    def _check_kind(self) -> FunctionIn:
        if self.kind == "polynomial" and self.coeffs is None:
            raise ValueError("polynomial functions need coeffs")
        if self.kind == "sum-of-bumps" and not self.bumps:
            raise ValueError("sum-of-bumps needs a nonempty bumps list")
        if self.kind == "blurred" and self.inner is None:
            raise ValueError("blurred functions need an inner descriptor")
        return self


class GridIn(BaseModel):
    """Verification / sampling grid over a rectangular region."""

    model_config = ConfigDict(extra="forbid")

    region: list[float] | None = None
    nx: int = 21
    ny: int = 21

    @model_validator(mode="after")
    def _check_region(self) -> "GridIn":
        if self.region is not None and len(self.region) != 4:
            raise ValueError("region needs exactly [x0, x1, y0, y1]")
        return self


class TolerancesIn(BaseModel):
    """Residual bound and numerical knobs of the pipeline."""

    model_config = ConfigDict(extra="forbid")

    residual: float = 1e-6
    split_width: float = 1.0
    quad_order: int = 8
    depth_cap: int = 10_000
    threads: int = 1


class ValidateIn(BaseModel):
    model_config = ConfigDict(extra="forbid")

    problem: ProblemIn


class ForwardIn(BaseModel):
    model_config = ConfigDict(extra="forbid")

    problem: ProblemIn
    function: FunctionIn
    grid: GridIn = GridIn()
    tolerances: TolerancesIn = TolerancesIn()


class ReconstructIn(BaseModel):
    model_config = ConfigDict(extra="forbid")

    problem: ProblemIn
    function: FunctionIn
    grid: GridIn = GridIn()
    tolerances: TolerancesIn = TolerancesIn()


def _domain_error(status: int, kind: str, message: str) -> HTTPException:
    return HTTPException(status_code=status, detail={"kind": kind, "message": message})


def _build_config(problem: ProblemIn) -> BlurConfig:
    weights = []
    for w in problem.weights:
        if isinstance(w, list):
            re = w[0]
            im = w[1] if len(w) == 2 else 0.0
            weights.append(complex(re, im) if im != 0.0 else float(re))
        else:
            weights.append(float(w))
    try:
        rects = tuple(Rect(*quad) for quad in problem.rectangles)
        return BlurConfig(rects=rects, weights=tuple(weights))
    except ValueError as e:
        raise _domain_error(422, "ConfigError", str(e)) from e


def _build_fn(desc: FunctionIn, cfg: BlurConfig) -> C2Fn:
    try:
        return _build_fn_inner(desc, cfg)
    except ValueError as e:
        raise _domain_error(422, "ConfigError", str(e)) from e


def _build_fn_inner(desc: FunctionIn, cfg: BlurConfig) -> C2Fn:
    if desc.kind == "polybump":
        return PolyBump(desc.x0, desc.y0, desc.rx, desc.ry, desc.amp)
    if desc.kind == "polynomial":
        return PolyFn(desc.coeffs)
    if desc.kind == "sum-of-bumps":
        fns = [_build_fn_inner(b, cfg) for b in desc.bumps]
        out = fns[0]
        for fn in fns[1:]:
            out = add(out, fn)
        return out
    return BlurredFn(_build_fn_inner(desc.inner, cfg), cfg)


def _check_grid(nx: int, ny: int) -> None:
    if nx < 2 or ny < 2:
        raise _domain_error(422, "GridError", f"grid must be at least 2x2, got {nx}x{ny}")


def create_app() -> FastAPI:
    app = FastAPI(title="boxdeconv", version="1.0.0")

    @app.get("/api/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.post("/api/validate")
    def validate(payload: ValidateIn) -> dict:
        cfg = _build_config(payload.problem)
        try:
            orientation = validate_staircase(cfg)
        except StaircaseViolation as e:
            return {
                "orientation": None,
                "violation": {
                    "index": e.index,
                    "field": e.field,
                    "lo": e.lo,
                    "hi": e.hi,
                    "message": str(e),
                },
            }
        return {"orientation": orientation, "violation": None}

    @app.post("/api/forward")
    def forward(payload: ForwardIn) -> dict:
        cfg = _build_config(payload.problem)
        f = _build_fn(payload.function, cfg)
        grid = payload.grid
        _check_grid(grid.nx, grid.ny)
        region = tuple(grid.region) if grid.region is not None else default_region(cfg)
        rule = QuadratureRule(order=payload.tolerances.quad_order)
        xs, ys = grid_axes(region, grid.nx, grid.ny)
        rows = []
        for y in ys:
            for x in xs:
                v = blur(f, cfg, float(x), float(y), rule)
                rows.append([float(x), float(y), v.real, v.imag])
        return {"region": list(region), "nx": grid.nx, "ny": grid.ny, "rows": rows}

    @app.post("/api/reconstruct")
    def run_reconstruct(payload: ReconstructIn) -> dict:
        cfg = _build_config(payload.problem)
        g = _build_fn(payload.function, cfg)
        grid = payload.grid
        _check_grid(grid.nx, grid.ny)
        tol = payload.tolerances
        opts = ReconstructOptions(
            tolerance=tol.residual,
            region=tuple(grid.region) if grid.region is not None else None,
            nx=grid.nx,
            ny=grid.ny,
            split_width=tol.split_width,
            quad_order=tol.quad_order,
            depth_cap=tol.depth_cap,
            threads=tol.threads,
        )
        t0 = time.perf_counter()
        try:
            result = reconstruct(cfg, g, opts)
            verdict = "pass"
        except ResidualTooLarge as e:
            result = e.result
            verdict = "fail"
        except (StaircaseViolation, ZeroMeasure) as e:
            raise _domain_error(422, type(e).__name__, str(e)) from e
        except DeconvError as e:
            raise _domain_error(400, type(e).__name__, str(e)) from e
        wall = time.perf_counter() - t0
        return {
            "report": _report(result, verdict, opts.tolerance, wall),
            "fhat": _sample_fhat(result),
        }

    return app


def _report(result: ReconstructionResult, verdict: str, tolerance: float, wall: float) -> dict:
    stats = result.residual_stats
    report = {
        "orientation": result.orientation,
        "v1": result.cone.v.v1,
        "v2": result.cone.v.v2,
        "beta": result.beta,
        "residual_max": stats.max_abs,
        "residual_rms": stats.rms,
        "verdict": verdict,
        "tolerance": tolerance,
        "split_width": result.split_width,
    }
    for key in sorted(result.atom_counts):
        report[key] = result.atom_counts[key]
    report["wall_total_s"] = wall
    return report


def _sample_fhat(result: ReconstructionResult) -> dict:
    stats = result.residual_stats
    gx, gy = np.meshgrid(stats.xs, stats.ys)
    vals = np.asarray(result.f.val(gx.ravel(), gy.ravel()), dtype=complex)
    rows = [
        [float(x), float(y), v.real, v.imag]
        for x, y, v in zip(gx.ravel(), gy.ravel(), vals)
    ]
    return {"region": list(stats.region), "nx": stats.nx, "ny": stats.ny, "rows": rows}


app = create_app()
