"""Command-line client: config ingestion, subcommands, and report emission.

Subcommands call the HTTP service through an in-process transport, so the
service owns all payload validation; this module only reads the config
file, applies flag overrides, writes CSV/report files, and maps outcomes
to exit codes (0 ok/pass, 2 validation, 3 residual failure, 1 otherwise).
"""

from __future__ import annotations

import asyncio
import math
import sys
from dataclasses import replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import click
import numpy as np

from .forward import QuadratureRule, default_region, residual_grid
from .geometry import BlurConfig, Direction, Rect
from .measure import Atom, Conv, MeasureExpr, cone_for_pair, measure
from .neumann import PerturbedIdentityProblem, solve_general, solve_perturbed_identity
from .reconstruct import (
    CaseMeasures,
    ReconstructOptions,
    assemble_f,
    build_case_measures,
    reconstruct as run_reconstruct,
)
from .smoothfn import PolyBump, add, conv_measure, split_halfplane

__all__ = ["main"]

_TOP_KEYS = {"problem", "function", "grid", "tolerances", "output"}


class ConfigError(Exception):
    """Unreadable, malformed, or structurally invalid config file."""


def _load_config(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"malformed config: {e}") from e
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
    out = doc.get("output", {})
    if not isinstance(out, dict) or set(out) - {"dir"}:
        raise ConfigError("the [output] section allows only the key 'dir'")
    if "problem" not in doc:
        raise ConfigError("config needs a [problem] section")
    return doc


def _payload(
    doc: dict,
    need_function: bool = False,
    grid: tuple[int, int] | None = None,
    tol: float | None = None,
    quad_order: int | None = None,
    threads: int | None = None,
) -> dict:
    payload: dict = {"problem": doc["problem"]}
    if need_function:
        if "function" not in doc:
            raise ConfigError("config needs a [function] section")
        payload["function"] = doc["function"]
    grid_sec = dict(doc.get("grid", {}))
    if grid is not None:
        grid_sec["nx"], grid_sec["ny"] = grid
    if grid_sec:
        payload["grid"] = grid_sec
    tol_sec = dict(doc.get("tolerances", {}))
    if tol is not None:
        tol_sec["residual"] = tol
    if quad_order is not None:
        tol_sec["quad_order"] = quad_order
    if threads is not None:
        tol_sec["threads"] = threads
    if tol_sec:
        payload["tolerances"] = tol_sec
    return payload


def _call(path: str, payload: dict) -> tuple[int, dict]:
    from httpx import ASGITransport, AsyncClient

    from .service import app

    async def go() -> tuple[int, dict]:
        async with AsyncClient(
            transport=ASGITransport(app=app), base_url="http://boxdeconv"
        ) as client:
            resp = await client.post(path, json=payload)
            return resp.status_code, resp.json()

    return asyncio.run(go())


def _error_kind(body: dict) -> str | None:
    detail = body.get("detail")
    return detail.get("kind") if isinstance(detail, dict) else None


def _describe(body: dict) -> str:
    detail = body.get("detail")
    if isinstance(detail, dict):
        return str(detail.get("message", detail))
    if isinstance(detail, list) and detail:
        first = detail[0]
        loc = ".".join(str(p) for p in first.get("loc", ()))
        return f"{loc}: {first.get('msg', 'invalid')}"
    return str(body)


def _out_dir(doc: dict, flag: str | None) -> Path:
    if flag is not None:
        return Path(flag)
    return Path(doc.get("output", {}).get("dir", "."))


def _fmt(v: object) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _write_csv(path: Path, rows: list) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x,y,re,im\n")
        for x, y, re_part, im_part in rows:
            fh.write(f"{x!r},{y!r},{re_part!r},{im_part!r}\n")


_REPORT_HEAD = ("orientation", "v1", "v2", "beta", "residual_max", "residual_rms", "verdict")


def _write_report(path: Path, report: dict) -> None:
    lines = [f"{key} = {_fmt(report[key])}" for key in _REPORT_HEAD]
    for key in sorted(report):
        if key not in _REPORT_HEAD and not key.startswith("wall_"):
            lines.append(f"{key} = {_fmt(report[key])}")
    for key in sorted(report):
        if key.startswith("wall_"):
            lines.append(f"{key} = {_fmt(report[key])}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_grid(_ctx: object, _param: object, value: str | None) -> tuple[int, int] | None:
    if value is None:
        return None
    try:
        nx_s, ny_s = value.split(",")
        return int(nx_s), int(ny_s)
    except ValueError:
        raise click.BadParameter("expected NX,NY")


_config_opt = click.option(
    "--config",
    "config_path",
    required=True,
    type=click.Path(exists=False, path_type=Path),
    help="Problem config file (TOML).",
)
_out_opt = click.option("--out", "out_flag", default=None, help="Output directory.")
_grid_opt = click.option(
    "--grid", default=None, callback=_parse_grid, help="Grid override as NX,NY."
)
_tol_opt = click.option("--tol", type=float, default=None, help="Residual tolerance override.")
_order_opt = click.option(
    "--quad-order", type=int, default=None, help="Quadrature order override."
)
_threads_opt = click.option("--threads", type=int, default=None, help="Worker threads.")


@click.group()
def main() -> None:
    """Reconstruct functions from rectangle moving averages."""


@main.command()
@_config_opt
def validate(config_path: Path) -> None:
    """Classify the config's rectangle chain (prints the orientation)."""
    try:
        doc = _load_config(config_path)
    except ConfigError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)
    status, body = _call("/api/validate", {"problem": doc["problem"]})
    if status != 200:
        click.echo(f"error: {_describe(body)}", err=True)
        sys.exit(1)
    if body["violation"] is not None:
        click.echo(body["violation"]["message"])
        sys.exit(2)
    click.echo(body["orientation"])


@main.command()
@_config_opt
@_out_opt
@_grid_opt
@_order_opt
def forward(config_path: Path, out_flag: str | None, grid, quad_order) -> None:
    """Blur the config's function and write the sampled grid as CSV."""
    try:
        doc = _load_config(config_path)
        payload = _payload(doc, need_function=True, grid=grid, quad_order=quad_order)
    except ConfigError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)
    status, body = _call("/api/forward", payload)
    if status != 200:
        click.echo(f"error: {_describe(body)}", err=True)
        sys.exit(2 if _error_kind(body) == "GridError" else 1)
    path = _out_dir(doc, out_flag) / "forward.csv"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        _write_csv(path, body["rows"])
    except OSError as e:
        click.echo(f"error: cannot write {path}: {e}", err=True)
        sys.exit(1)
    click.echo(f"wrote {path} ({len(body['rows'])} rows)")


@main.command()
@_config_opt
@_out_opt
@_grid_opt
@_tol_opt
@_order_opt
@_threads_opt
def reconstruct(config_path: Path, out_flag, grid, tol, quad_order, threads) -> None:
    """Reconstruct f from the config's data and certify the residual."""
    try:
        doc = _load_config(config_path)
        payload = _payload(
            doc, need_function=True, grid=grid, tol=tol, quad_order=quad_order, threads=threads
        )
    except ConfigError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)
    status, body = _call("/api/reconstruct", payload)
    if status != 200:
        kind = _error_kind(body)
        click.echo(f"error: {_describe(body)}", err=True)
        sys.exit(2 if kind in ("StaircaseViolation", "ZeroMeasure") else 1)
    report = body["report"]
    out = _out_dir(doc, out_flag)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "fhat.csv", body["fhat"]["rows"])
        _write_report(out / "report.txt", report)
    except OSError as e:
        click.echo(f"error: cannot write outputs: {e}", err=True)
        sys.exit(1)
    click.echo(
        f"{report['orientation']}  residual max {report['residual_max']:.3e} "
        f"(tolerance {report['tolerance']:.1e})  verdict {report['verdict']}"
    )
    click.echo(f"wrote {out / 'fhat.csv'} and {out / 'report.txt'}")
    if report["verdict"] != "pass":
        sys.exit(3)


@main.command()
@_tol_opt
@_threads_opt
@click.option(
    "--inject-sign-flip",
    is_flag=True,
    help="Corrupt one solver lattice sign (hook for exercising failure paths).",
)
def selftest(tol: float | None, threads: int | None, inject_sign_flip: bool) -> None:
    """Run reduced-size end-to-end checks; exit 0 only if all pass."""
    failures = 0
    for name, value, bound in _selftest_results(tol, inject_sign_flip, threads or 1):
        ok = value <= bound
        failures += 0 if ok else 1
        click.echo(f"{'PASS' if ok else 'FAIL'} {name}: {value:.3e} (bound {bound:.3g})")
    if failures:
        click.echo(f"{failures} check(s) failed", err=True)
        sys.exit(1)
    click.echo("all checks passed")


def _selftest_results(
    tol_override: float | None, flip: bool, threads: int
) -> list[tuple[str, float, float]]:
    rng = np.random.default_rng(20240817)
    v = Direction(1.0, 1.0)
    checks: list[tuple[str, float, float]] = []

    # windowed-series inversion against its defining identity
    worst = 0.0
    for _ in range(3):
        atoms = [
            Atom(float(x), float(y), float(w))
            for x, y, w in zip(
                rng.uniform(0.4, 2.0, 3),
                rng.uniform(0.4, 2.0, 3),
                rng.uniform(-0.45, 0.45, 3),
            )
        ]
        eta = measure(*atoms)
        h = PolyBump(0.0, 0.0, 2.0, 2.0)
        u = solve_perturbed_identity(PerturbedIdentityProblem(h, eta, v, side="right"))
        xs = rng.uniform(-3.0, 3.0, 50)
        ys = rng.uniform(-3.0, 3.0, 50)
        lhs = np.asarray(u.val(xs, ys)) + np.asarray(conv_measure(u, eta, v).val(xs, ys))
        worst = max(worst, float(np.max(np.abs(lhs - np.asarray(h.val(xs, ys))))))
    checks.append(("series-inversion", worst, 1e-10))

    # half-plane split adds back exactly and respects its support bounds
    g = PolyBump(0.3, -0.2, 1.7, 2.1)
    sv = Direction(1.0, 0.8)
    left, right = split_halfplane(g, sv, 1.0)
    xs = rng.uniform(-3.0, 3.0, 1000)
    ys = rng.uniform(-3.0, 3.0, 1000)
    total = np.asarray(left.val(xs, ys)) + np.asarray(right.val(xs, ys))
    checks.append(
        ("split-exactness", float(np.max(np.abs(total - np.asarray(g.val(xs, ys))))), 1e-14)
    )
    adv = sv.v1 * xs + sv.v2 * ys
    viol = int(np.count_nonzero(np.asarray(left.val(xs, ys))[adv > 1.0 + 1e-12]))
    viol += int(np.count_nonzero(np.asarray(right.val(xs, ys))[adv < -1.0 - 1e-12]))
    checks.append(("split-support", float(viol), 0.5))

    # reduced end-to-end runs
    cfg1 = BlurConfig(rects=(Rect(-1.0, 1.0, -1.0, 1.0),), weights=(1.0,))
    cfg2 = BlurConfig(
        rects=(Rect(-1.0, 1.0, -1.0, 1.0), Rect(0.5, 2.5, 0.5, 2.5)), weights=(1.0, 0.5)
    )
    data = PolyBump(0.0, 0.0, 2.0, 2.0)
    cases = (
        ("end-to-end-single-rect", cfg1, (-4.0, 4.0, -4.0, 4.0), 9, 1e-8),
        ("end-to-end-two-rect", cfg2, None, 7, 1e-6),
    )
    for name, cfg, region, n, bound in cases:
        opts = ReconstructOptions(
            tolerance=math.inf, region=region, nx=n, ny=n, threads=threads
        )
        if flip:
            stats = _flipped_stats(cfg, data, opts)
        else:
            stats = run_reconstruct(cfg, data, opts).residual_stats
        checks.append((name, stats.max_abs, bound))

    if tol_override is not None:
        checks = [(name, value, tol_override) for name, value, _ in checks]
    return checks


def _flip_last_term(cm: CaseMeasures) -> CaseMeasures:
    terms = list(cm.nu.terms)
    last = terms[-1]
    if isinstance(last, Conv):
        terms[-1] = Conv(replace(last.left, w=-last.left.w), last.right)
    else:
        terms[-1] = replace(last, w=-last.w)
    return replace(cm, nu=MeasureExpr(tuple(terms)))


def _flipped_stats(cfg: BlurConfig, g, opts: ReconstructOptions):
    """Run the pipeline with one solver lattice sign flipped on the left side."""
    left = _flip_last_term(build_case_measures(cfg, "left"))
    right = build_case_measures(cfg, "right")
    cone = cone_for_pair(right.nu, left.nu)
    g_left, g_right = split_halfplane(g, cone.v, opts.split_width)
    parts = []
    for cm, g_side in ((left, g_left), (right, g_right)):
        h = conv_measure(g_side, cm.psi, cone.v)
        g1 = solve_general(h, cm.nu, cone.v, cm.side, depth_cap=opts.depth_cap)
        parts.append(assemble_f(g1, cm.mu1, cone.v))
    f = add(parts[0], parts[1])
    region = opts.region if opts.region is not None else default_region(cfg)
    return residual_grid(
        f, g, cfg, region, opts.nx, opts.ny,
        rule=QuadratureRule(order=opts.quad_order), threads=opts.threads,
    )


if __name__ == "__main__":
    main()
