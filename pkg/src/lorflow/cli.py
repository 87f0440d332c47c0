"""Command line entry point: ``lorflow run | preset | accept | bubble``."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .diagnostics import extract_bubble, select_blowup, smallest_concentration_radius, verify_bubble
from .flow import ConfigError, Snapshot
from .grid import Grid, MapField, ScalarField, read_field_csv
from .harness import PRESETS, Scenario, ScenarioError, acceptance, preset, run_scenario, write_json
from .target import make_target


def _fail(msg: str, code: int = 2):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _report(rep) -> None:
    click.echo(f"{rep.scenario}: termination={rep.termination} (expected {rep.expected})")
    for name, c in rep.checks.items():
        click.echo(f"  {'PASS' if c['passed'] else 'FAIL'} {name}")
    click.echo(f"exit status {rep.exit_code}")


@click.group()
@click.version_option(__version__, prog_name="lorflow")
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def main(verbose: int):
    """Projected heat flow for maps into N coupled to a warped elliptic constraint."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")


def load_run_config(path) -> tuple[Scenario, dict]:
    """JSON with either ``preset`` or a full ``scenario`` block, plus optional ``config`` overrides."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    extra = set(data) - {"preset", "scenario", "config"}
    if extra:
        raise ConfigError(f"unknown top-level keys {sorted(extra)}")
    if ("preset" in data) == ("scenario" in data):
        raise ConfigError("config needs exactly one of 'preset' or 'scenario'")
    s = preset(data["preset"]) if "preset" in data else Scenario.from_dict(data["scenario"])
    return s, dict(data.get("config", {}))


def _execute(s: Scenario, out: str, overrides: dict) -> None:
    try:
        # validate before any stepping
        s.flow_config(overrides)
    except (ConfigError, TypeError, ValueError) as exc:
        _fail(f"invalid configuration: {exc}")
    rep = run_scenario(s, out, overrides)
    _report(rep)
    sys.exit(rep.exit_code)


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--mode", type=click.Choice(["flow", "descent"]), default=None, help="Override the run mode.")
def run_cmd(config_path, out, mode):
    """Run a scenario described by a JSON config file."""
    try:
        s, overrides = load_run_config(config_path)
    except (ConfigError, ScenarioError, TypeError) as exc:
        _fail(str(exc))
    if mode:
        overrides["mode"] = mode
    _execute(s, out, overrides)


@main.command("preset")
@click.argument("name", type=click.Choice(PRESETS))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--n", type=int, default=None, help="Grid size (default from the preset, 129).")
@click.option("--mode", type=click.Choice(["flow", "descent"]), default=None)
@click.option("--tau-factor", type=float, default=None)
def preset_cmd(name, out, n, mode, tau_factor):
    """Run one of the built-in scenarios."""
    overrides = {}
    if n is not None:
        overrides["n"] = n
    if mode:
        overrides["mode"] = mode
    if tau_factor is not None:
        overrides["tau_factor"] = tau_factor
    _execute(preset(name), out, overrides)


@main.command("accept")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--n", type=int, default=129)
@click.option("--no-repeat", is_flag=True, help="Skip the second run used for the determinism check.")
def accept_cmd(out, n, no_repeat):
    """Run the acceptance suite and write summary.json."""
    summary = acceptance(out, n=n, repeat=not no_repeat)
    for key, c in summary["criteria"].items():
        click.echo(f"criterion {key} ({c['name']}): {'PASS' if c['passed'] else 'FAIL'}")
    cv = summary["descent_cross_validation"]
    click.echo(f"descent cross-validation: {'PASS' if cv['passed'] else 'FAIL'}")
    click.echo(f"wall time {summary['wall_time']:.1f} s")
    sys.exit(0 if summary["passed"] else 1)


def _load_snapshot(path: Path) -> Snapshot:
    u, meta = read_field_csv(path)
    if not isinstance(u, MapField):
        raise ValueError(f"{path} holds a scalar field, expected a map snapshot")
    vpath = path.with_name(path.name.replace("_u.csv", "_v.csv"))
    v = read_field_csv(vpath)[0].values if vpath != path and vpath.exists() else np.zeros((u.grid.n, u.grid.n))
    return Snapshot(int(meta.get("step", 0)), float(meta.get("t", 0.0)), u.values, v)


@main.command("bubble")
@click.option("--snapshot", "snapshots", required=True, multiple=True, type=click.Path(exists=True, dir_okay=False),
              help="Map snapshot CSV (repeat for a history; the matching _v.csv is picked up).")
@click.option("--epsilon1", required=True, type=float)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--target", default="sphere2")
@click.option("--L", "L", type=float, default=8.0)
@click.option("--m", type=int, default=129)
def bubble_cmd(snapshots, epsilon1, out, target, L, m):
    """Select a blow-up point in snapshot(s) and extract the rescaled bubble."""
    hist = sorted((_load_snapshot(Path(p)) for p in snapshots), key=lambda s: (s.t, s.step))
    T = make_target(target)
    try:
        if len(hist) >= 2:
            sel = select_blowup(hist, epsilon1)
            snap = hist[sel.snapshot]
            x_i, r_i, t_i = sel.x_i, sel.r_i, sel.t_i
            sel_d = sel.to_dict()
        else:
            snap = hist[0]
            g = Grid(snap.u.shape[-1])
            r_i, (i, j), e = smallest_concentration_radius(MapField(g, snap.u), 0.5 * epsilon1)
            x_i, t_i = (i * g.h, j * g.h), snap.t
            sel_d = {"x_i": list(x_i), "r_i": r_i, "t_i": t_i, "E_ball": e}
        g = Grid(snap.u.shape[-1])
        b = extract_bubble(MapField(g, snap.u), ScalarField(g, snap.v), x_i, r_i, L, m, T, t_i=t_i)
    except Exception as exc:
        msg = str(exc)
        code = getattr(exc, "code", None) or type(exc).__name__
        _fail(msg if msg.startswith(code) else f"{code}: {msg}", 1)
    outp = Path(out)
    b.write(outp)
    verdict = verify_bubble(b, None, epsilon1)
    write_json(outp / "bubble.json", {"selection": sel_d, "bubble": b.to_dict(), "verdict": verdict})
    click.echo(json.dumps({"x_i": list(b.x_i), "r_i": b.r_i, "t_i": b.t_i, **b.stats}, indent=2))
    sys.exit(0 if verdict["passed"] else 1)


if __name__ == "__main__":  # pragma: no cover
    main()
