"""Command-line frontend: ``wfdetect {simulate,doe,dmdc,mixed,nodyn,baseline,detect,report}``.

Every command writes its artifacts plus a ``manifest_<command>.json`` into
``--out``. Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import baselines, dmd, doe, embedding, mixed_dmd, nodyn, sim_workflow
from .config import ConfigError, RunConfig, load_config
from .table import DataTable, SchemaError

log = logging.getLogger("wfdetect")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class Timer:
    def __init__(self):
        self.durations: dict[str, float] = {}

    def __call__(self, name: str):
        timer = self

        class _Span:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                timer.durations[name] = round(time.perf_counter() - self.t, 6)
        return _Span()


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def write_manifest(out: Path, command: str, cfg: RunConfig, timer: Timer,
                   outputs: list[Path], status: dict[str, str] | None = None) -> Path:
    manifest = {
        "command": command,
        "config_path": cfg.source,
        "out": str(out),
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "substream_seeds": cfg.seeds(),
        "versions": {"artifact": _version(), "numpy": np.__version__,
                     "python": platform.python_version()},
        "durations": timer.durations,
        "status": status or {},
        "outputs": sorted(str(p.relative_to(out)) for p in outputs),
    }
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def _write_rows(path: Path, header: list[str], rows) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _schedule(cfg: RunConfig, wf: sim_workflow.WorkflowConfig, n: int) -> doe.Schedule:
    design = doe.full_factorial(wf.module_names)
    return doe.make_schedule(design, n, cfg.segment_length, cfg.ordering, cfg.seeds()["schedule"])


# -- commands -----------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, out: Path, threads: int = 1) -> tuple[list[Path], dict, Timer]:
    timer = Timer()
    wf, cycle = cfg.workflow(), cfg.cycle()
    sched = _schedule(cfg, wf, cycle.n)
    runs = {
        "T0": lambda: sim_workflow.simulate(wf, cycle, np.zeros(wf.m)),
        "T1": lambda: sim_workflow.simulate(wf, cycle, np.ones(wf.m)),
        "T0_DoE": lambda: sim_workflow.simulate(wf, cycle, sched),
        "T1_DoEbar": lambda: sim_workflow.simulate(wf, cycle, 1 - sched.versions),
    }
    outputs = []
    for name in cfg.tables:
        with timer(name):
            table = runs[name]()
        path = out / f"{name}.csv"
        table.to_csv(path)
        outputs.append(path)
    sched_path = out / "schedule.csv"
    sched.to_csv(sched_path)
    outputs.append(sched_path)
    return outputs, {n: "ok" for n in cfg.tables}, timer


def cmd_doe(cfg: RunConfig, out: Path, threads: int = 1):
    timer = Timer()
    wf = cfg.workflow()
    design = doe.full_factorial(wf.module_names)
    with timer("schedule"):
        sched = _schedule(cfg, wf, cfg.cycle_length)
    outputs = [out / "design.csv", out / "design_complement.csv", out / "schedule.csv"]
    design.to_table().to_csv(outputs[0])
    doe.complement(design).to_table().to_csv(outputs[1])
    sched.to_csv(outputs[2])
    return outputs, {"doe": "ok"}, timer


def _reference_tables(cfg: RunConfig, timer: Timer):
    wf, cycle = cfg.workflow(), cfg.cycle()
    sched = _schedule(cfg, wf, cycle.n)
    with timer("simulate_T0"):
        t0 = sim_workflow.simulate(wf, cycle, np.zeros(wf.m))
    with timer("simulate_T0_DoE"):
        t0doe = sim_workflow.simulate(wf, cycle, sched)
    return wf, cycle, sched, t0, t0doe


def cmd_dmdc(cfg: RunConfig, out: Path, threads: int = 1):
    timer = Timer()
    wf, cycle = cfg.workflow(), cfg.cycle()
    with timer("simulate_T0"):
        t0 = sim_workflow.simulate(wf, cycle, np.zeros(wf.m))
    with timer("fit"):
        cols = dmd.prune_variables(t0, cfg.corr_threshold, list(sim_workflow.STATE_VARIABLES))
        model = dmd.fit_dmdc(t0, cols, [sim_workflow.IMPOSED], standardize=True)
    q = dmd.quality(t0, model)
    rho = dmd.spectral_radius(model.A)
    outputs = [out / "dmdc_model.json", out / "dmdc_quality.csv", out / "dmdc_report.json"]
    model.to_json(outputs[0])
    dmd.quality_table(q).to_csv(outputs[1])
    outputs[2].write_text(json.dumps({
        "state_cols": cols, "control_cols": model.control_cols,
        "spectral_radius": rho, "r2": model.r2, "corr_threshold": cfg.corr_threshold,
        "matrix_floor": cfg.matrix_floor, "A": model.A.tolist(), "B": model.B.tolist(),
    }, indent=1))
    return outputs, {"dmdc": "ok"}, timer


def cmd_mixed(cfg: RunConfig, out: Path, threads: int = 1):
    timer = Timer()
    wf, cycle, sched, t0, t0doe = _reference_tables(cfg, timer)
    status: dict[str, str] = {}
    report: dict = {"weights": {"p_eps": cfg.p_eps, "p_a": cfg.p_a,
                                "p_term": {str(k): v for k, v in cfg.p_term.items()}},
                    "norm": cfg.norm, "prior": cfg.prior, "w_ref": cfg.w_ref,
                    "matrix_floor": cfg.matrix_floor}
    outputs = []
    ref, dtab = t0, t0doe
    state_cols = None
    if cfg.embedding:
        with timer("embedding"):
            train = DataTable(t0.columns, t0.values[::cfg.train_stride], t0.kinds)
            kw = dict(epochs=cfg.epochs, seed=cfg.seeds()["embedding-init"])
            if cfg.latent_dim == "auto":
                emb, d, ok = embedding.select_dim(train, cfg.max_latent_dim, cfg.r2_threshold, **kw)
            else:
                emb = embedding.train(train, int(cfg.latent_dim), **kw)
                d, ok = emb.latent_dim, min(emb.r2.values()) >= cfg.r2_threshold
        emb.r2 = emb.reconstruction_r2(t0)
        ref, dtab = embedding.encode_table(emb, t0), embedding.encode_table(emb, t0doe)
        path = out / "embedding.json"
        emb.to_json(path)
        outputs.append(path)
        report["embedding"] = {"latent_dim": d, "threshold_met": bool(ok),
                               "r2_threshold": cfg.r2_threshold, "r2": emb.r2}
        status["embedding"] = "ok" if ok else "threshold_not_met"
    else:
        state_cols = dmd.prune_variables(t0, cfg.corr_threshold, list(sim_workflow.STATE_VARIABLES))
        report["state_cols"] = state_cols
    subsets = mixed_dmd.enumerate_subsets(wf.module_names, cfg.subset_size)
    with timer("rank"):
        ranking = mixed_dmd.rank_combinations(
            ref, dtab, subsets, cfg.weights(), cfg.norm, threads=threads,
            state_cols=state_cols, prior=cfg.prior, w_ref=cfg.w_ref)
    for e in ranking.entries:
        status[e.name] = e.status
    report["ranking"] = ranking.rows()
    report["top"] = list(ranking.top)
    report["models"] = {e.name: e.model.to_dict() for e in ranking.entries if e.model}
    report["errors"] = {e.name: e.error for e in ranking.entries if e.error}
    path = out / "mixed_ranking.csv"
    rows = report["ranking"]
    _write_rows(path, list(rows[0]), [list(r.values()) for r in rows])
    outputs.append(path)
    path = out / "mixed_report.json"
    path.write_text(json.dumps(report, indent=1))
    outputs.append(path)
    return outputs, status, timer


def cmd_nodyn(cfg: RunConfig, out: Path, threads: int = 1):
    timer = Timer()
    wf, cycle, sched, t0, t0doe = _reference_tables(cfg, timer)
    with timer("oracle"):
        star = nodyn.build_oracle(t0doe, wf, cycle, workers=threads)
    with timer("regressions"):
        ds = nodyn.build_dataset(t0doe, star, sched.segment, interaction_order=cfg.interaction_order)
        grid = nodyn.detect(ds, alpha=cfg.alpha, bonferroni=cfg.bonferroni)
    outputs = list(grid.write(out).values())
    path = out / "T0_star.csv"
    star.to_csv(path)
    outputs.append(path)
    return outputs, {"nodyn": "ok"}, timer


def cmd_baseline(cfg: RunConfig, out: Path, threads: int = 1):
    timer = Timer()
    wf, cycle = cfg.workflow(), cfg.cycle()
    with timer("sensitivity"):
        model = baselines.sensitivity_doe(wf, cycle, doe.full_factorial(wf.module_names),
                                          cfg.criterion, cfg.max_interaction_order)
    with timer("one_at_a_time"):
        oat = baselines.one_at_a_time(wf, cycle)
    outputs = list(model.write(out).values())
    path = out / "one_at_a_time.csv"
    _write_rows(path, ["module", "sum_squares_total"] + list(sim_workflow.STATE_VARIABLES),
                [[name, d.total] + [d.sum_squares[v] for v in sim_workflow.STATE_VARIABLES]
                 for name, d in oat.modules.items()])
    outputs.append(path)
    status = {"sensitivity": "model_incomplete" if model.model_incomplete else "ok",
              "one_at_a_time": "ok"}
    return outputs, status, timer


COMMANDS = {
    "simulate": cmd_simulate, "doe": cmd_doe, "dmdc": cmd_dmdc, "mixed": cmd_mixed,
    "nodyn": cmd_nodyn, "baseline": cmd_baseline,
}


# -- report -------------------------------------------------------------------

REPORT_ARTIFACTS = {
    "dmdc": "dmdc_report.json",
    "mixed": "mixed_report.json",
    "nodyn": "nodyn_summary.json",
    "baseline": "sensitivity_manifest.json",
}


def _text_table(header: list[str], rows: list[list[str]]) -> str:
    cells = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[k]) for r in cells) for k in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells)


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def render_dmdc(d: dict, run: Path) -> str:
    cols = d["state_cols"]
    A = np.array(d["A"])
    return "\n".join([
        f"spectral radius: {d['spectral_radius']:.6g}",
        "A (internal dynamics):",
        mixed_dmd.format_matrix(A, cols, cols, d.get("matrix_floor", 5e-3), diagonal_mark=True),
        "R2: " + ", ".join(f"{k}={v:.4f}" for k, v in d["r2"].items()),
    ])


def render_mixed(d: dict, run: Path) -> str:
    floor = d.get("matrix_floor", 5e-3)
    header = ["Combination", "Status", "RSS", "L1_Aref", "L1_Am", "TotalScore", "CPU"]
    parts = [_text_table(header, [[_fmt(r[h]) for h in header] for r in d["ranking"]]),
             f"top combination: {' . '.join(d['top'])}"]
    top = d["models"].get(" . ".join(d["top"]))
    if top:
        rows, cols = top["state_cols"], top["regressor_cols"]
        parts.append("reference matrix:")
        parts.append(mixed_dmd.format_matrix(np.array(top["A"]), rows, cols, floor))
        for name, M in top["corrections"].items():
            parts.append(f"corrective matrix {name}:")
            parts.append(mixed_dmd.format_matrix(np.array(M), rows, cols, floor))
    if d.get("errors"):
        parts.append("failures: " + "; ".join(f"{k}: {v}" for k, v in d["errors"].items()))
    return "\n".join(parts)


def render_nodyn(d: dict, run: Path) -> str:
    parts = [f"retained modules: {', '.join(d['retained']) or '(none)'}  (alpha={d['alpha']})"]
    path = run / "nodyn_retained.csv"
    if path.is_file():
        header, rows = _read_csv(path)
        parts.append(_text_table(header, rows))
    return "\n".join(parts)


def render_baseline(d: dict, run: Path) -> str:
    parts = [f"criterion: {d['criterion']}",
             f"X_opt: {', '.join(d['x_opt']) or '(none)'}",
             f"predicted {d['predicted_opt']:.6g}, observed {d['observed_opt']:.6g}"
             + ("  MODEL INCOMPLETE" if d["model_incomplete"] else ""),
             f"simulations: {len(d['simulations'])}"]
    path = run / "sensitivity_coefficients.csv"
    if path.is_file():
        header, rows = _read_csv(path)
        parts.append(_text_table(header, rows))
    return "\n".join(parts)


RENDERERS = {"dmdc": render_dmdc, "mixed": render_mixed, "nodyn": render_nodyn,
             "baseline": render_baseline}


def cmd_report(run: Path) -> tuple[str, list[str]]:
    """Render every stored artifact in ``run``; returns (text, missing artifact names)."""
    if not run.is_dir():
        raise FileNotFoundError(f"run directory not found: {run}")
    sections, missing = [], []
    for name, fname in REPORT_ARTIFACTS.items():
        path = run / fname
        if not path.is_file():
            missing.append(fname)
            continue
        body = RENDERERS[name](json.loads(path.read_text()), run)
        sections.append(f"== {name} ==\n{body}")
    if missing:
        sections.append("missing artifacts: " + ", ".join(missing))
    return "\n\n".join(sections) + "\n", missing


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wfdetect", description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, help="INI configuration file")
    ap.add_argument("--out", type=Path, default=Path("run"), help="output directory")
    ap.add_argument("--seed", type=int, default=0, help="root seed for all random streams")
    ap.add_argument("--threads", type=int, default=1, help="worker pool size")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name)
    sub.add_parser("detect", help="run the method named in [method] mode")
    rp = sub.add_parser("report", help="render the artifacts of a run directory")
    rp.add_argument("run_dir", type=Path, nargs="?", help="defaults to --out")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "report":
            text, _ = cmd_report(args.run_dir or args.out)
            (Path(args.run_dir or args.out) / "report.txt").write_text(text)
            sys.stdout.write(text)
            return EXIT_OK
        cfg = load_config(args.config, seed=args.seed, out=str(args.out))
        command = cfg.method if args.command == "detect" else args.command
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        outputs, status, timer = COMMANDS[command](cfg, out, args.threads)
        outputs.append(write_manifest(out, command, cfg, timer, outputs, status))
        for p in outputs:
            log.info("wrote %s", p)
        if command in REPORT_ARTIFACTS:
            text, _ = cmd_report(out)
            sys.stdout.write(text)
        return EXIT_OK
    except (ConfigError, SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
        print(f"numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
