"""Command-line driver: ``mgpa [global flags] <command> [options]``.

Commands: generate, fit, evaluate, select-gamma, baseline-pca.
Exit codes: 0 ok, 1 internal error, 2 config / IO error, 3 data parse error,
4 evaluation mismatch.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from . import optimizer as opt
from . import synth_bench as sb
from .model import DataMatrix
from .tensor_core import ContractError, TensorFormatError, read_tensor, write_tensor

log = logging.getLogger("mgpa")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_PARSE, EXIT_MISMATCH = 0, 1, 2, 3, 4
CONFIG_KEYS = {"synth", "fit", "gamma_grid", "gamma_tol", "pca_k"}
N_PLOT = 200


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- config and data


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}", EXIT_CONFIG) from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path}: invalid JSON at byte {exc.pos}: {exc.msg}", EXIT_CONFIG) from exc
    if not isinstance(cfg, dict):
        raise CliError(f"config {path}: top level must be an object", EXIT_CONFIG)
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise CliError(f"config {path}: unknown keys {sorted(unknown)}", EXIT_CONFIG)
    return cfg


def synth_spec(cfg: dict, seed) -> sb.SynthSpec:
    d = dict(cfg.get("synth", {}))
    if seed is not None:
        d["seed"] = seed
    try:
        return sb.SynthSpec(**d)
    except TypeError as exc:
        raise CliError(f"synth config: {exc}", EXIT_CONFIG) from exc


def fit_config(cfg: dict, seed) -> opt.FitConfig:
    d = dict(cfg.get("fit", {}))
    if seed is not None:
        d["seed"] = seed
    return opt.FitConfig.from_dict(d)


def save_data(data: DataMatrix, directory: Path) -> None:
    write_tensor(directory / "data.mgpt", data.y)
    meta = {"grid": list(data.grid), "n_samples": data.n_samples,
            "times": None if data.times is None else data.times.tolist()}
    (directory / "data.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_data(directory) -> DataMatrix:
    """Read ``data.mgpt`` (P x F) and ``data.json`` (grid, optional nominal times)."""
    directory = Path(directory)
    tensor_path, meta_path = directory / "data.mgpt", directory / "data.json"
    for p in (tensor_path, meta_path):
        if not p.is_file():
            raise CliError(f"missing data file {p}", EXIT_CONFIG)
    try:
        y = read_tensor(tensor_path)
    except TensorFormatError as exc:
        raise CliError(f"{tensor_path}: {exc}", EXIT_PARSE) from exc
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{meta_path}: invalid JSON at byte offset {exc.pos}: {exc.msg}",
                       EXIT_PARSE) from exc
    if y.ndim != 2:
        raise CliError(f"{tensor_path}: expected a 2-D tensor, got {y.ndim}-D (byte offset 8)",
                       EXIT_PARSE)
    try:
        return DataMatrix(y=y, grid=tuple(meta["grid"]), times=meta.get("times"))
    except (KeyError, ContractError) as exc:
        raise CliError(f"{directory}: inconsistent data files: {exc}", EXIT_PARSE) from exc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v))


# ---------------------------------------------------------------- commands


def cmd_generate(args, cfg, out: Path) -> None:
    spec = synth_spec(cfg, args.seed)
    data, truth = sb.generate(spec)
    save_data(data, out)
    sb.save_truth(truth, out / "truth", spec)
    _write_json(out / "spec.json", spec.to_dict())
    log.info("wrote %d x %d data matrix to %s", data.n_samples, data.n_features, out)


def _write_estimate(out: Path, method: str, sources, maps, extra: dict, delta=None) -> None:
    write_tensor(out / "sources.mgpt", sources)
    write_tensor(out / "maps.mgpt", maps)
    files = {"sources": "sources.mgpt", "maps": "maps.mgpt"}
    if delta is not None:
        write_tensor(out / "delta.mgpt", delta)
        files["delta"] = "delta.mgpt"
    _write_json(out / "result.json", {"method": method, "files": files, **extra})


def _plot_data(state: opt.FitState, out: Path, prune_threshold: float) -> None:
    pr = state.params
    t = opt.evaluation_grid(pr, N_PLOT)
    s = opt.posterior_mean_sources(pr, t)
    nominal = state.time_offset + state.time_scale * t
    header = ["t", "t_nominal"] + [f"S{n}" for n in range(pr.n_sources)]
    _write_csv(out / "plot_sources.csv", header,
               [[_fmt(a), _fmt(b)] + [_fmt(v) for v in row] for a, b, row in zip(t, nominal, s)])

    maps = opt.posterior_maps(pr, prune_threshold) * state.data_scale
    dz, dy, dx = pr.grid
    rows = []
    for n in range(pr.n_sources):
        sl = maps[n].reshape(pr.grid)[dz // 2]
        for iy in range(dy):
            for ix in range(dx):
                rows.append([n, iy, ix, _fmt(sl[iy, ix])])
    _write_csv(out / "plot_maps.csv", ["source", "y", "x", "value"], rows)

    tau, delta = pr.warp.tau, pr.warp.delta
    _write_csv(out / "plot_timeshift.csv", ["sample", "nominal_time", "delta", "time"],
               [[i, _fmt(state.time_offset + state.time_scale * a), _fmt(d), _fmt(a + d)]
                for i, (a, d) in enumerate(zip(tau, delta))])


def cmd_fit(args, cfg, out: Path) -> None:
    data = load_data(args.data)
    if args.resume:
        try:
            state, fcfg = opt.load_checkpoint(args.resume)
        except (OSError, TensorFormatError) as exc:
            raise CliError(f"cannot load checkpoint {args.resume}: {exc}", EXIT_CONFIG) from exc
        trace_path = Path(args.resume) / "trace.csv"
        trace = opt.read_trace(trace_path) if trace_path.is_file() else []
    else:
        fcfg = fit_config(cfg, args.seed)
        state, trace = None, []
    res = opt.fit(data, fcfg, state=state, stop_at=args.stop_at)
    trace = trace + res.trace
    state = res.state

    ckpt = out / "checkpoint"
    opt.save_checkpoint(state, fcfg, ckpt)
    opt.write_trace(trace, out / "trace.csv")
    opt.write_trace(trace, ckpt / "trace.csv")

    pr = state.params
    thr = fcfg.prune_threshold
    active = opt.active_sources(pr, thr)
    s = opt.posterior_mean_sources(pr, pr.warp.times)
    maps = opt.posterior_maps(pr, thr)
    extra = {
        "n_sources": pr.n_sources,
        "lambdas": list(pr.lambdas),
        "active": active.tolist(),
        "gamma": fcfg.gamma,
        "sigma": pr.sigma * state.data_scale,
        "step": state.step,
        "complete": state.step >= fcfg.total_steps,
        "shuffle": data.times is None,
        "monotonicity_violation": opt.monotonicity_violation(pr).tolist(),
    }
    _write_estimate(out, "mgpa", s, maps, extra, delta=pr.warp.delta)
    _plot_data(state, out, thr)
    log.info("fit finished at step %d; %d of %d sources active", state.step, active.sum(), pr.n_sources)


def cmd_baseline_pca(args, cfg, out: Path) -> None:
    data = load_data(args.data)
    k = int(args.k if args.k is not None else cfg.get("pca_k", 2))
    try:
        scores, comps = sb.pca_baseline(data, k)
    except ContractError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    _write_estimate(out, "pca", scores, comps, {"n_sources": k, "active": [True] * k})


def _load_estimate(directory: Path):
    """Return (method, sources, maps, delta, active) from a fit, PCA or truth directory."""
    if (directory / "result.json").is_file():
        meta = json.loads((directory / "result.json").read_text())
        files = meta["files"]
        s = read_tensor(directory / files["sources"])
        maps = read_tensor(directory / files["maps"])
        delta = read_tensor(directory / files["delta"]) if "delta" in files else None
        return meta["method"], s, maps, delta, meta.get("active")
    if (directory / "manifest.json").is_file():
        truth, _ = sb.load_truth(directory)
        return "truth", truth.sources, truth.maps, truth.times, None
    raise CliError(f"{directory} holds neither a fit result nor a ground-truth bundle", EXIT_CONFIG)


def cmd_evaluate(args, cfg, out: Path) -> None:
    try:
        truth, manifest = sb.load_truth(args.truth)
        method, s, maps, delta, active = _load_estimate(Path(args.fit))
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read evaluation inputs: {exc}", EXIT_CONFIG) from exc
    except TensorFormatError as exc:
        raise CliError(str(exc), EXIT_PARSE) from exc
    n_true = truth.sources.shape[1]
    if s.ndim != 2 or maps.ndim != 2 or s.shape[1] < n_true:
        raise CliError(f"{s.shape[-1]} fitted sources cannot be matched to {n_true} true sources",
                       EXIT_MISMATCH)
    if s.shape[0] != truth.sources.shape[0] or maps.shape[1] != truth.maps.shape[1]:
        raise CliError("fitted and true shapes disagree: "
                       f"sources {s.shape} vs {truth.sources.shape}, maps {maps.shape} vs "
                       f"{truth.maps.shape}", EXIT_MISMATCH)
    report = sb.evaluate_estimate(s, maps, truth, delta=delta, active=active, method=method,
                                  shuffle=bool(manifest.get("shuffle")))
    _write_json(out / "report.json", report.to_dict())
    log.info("mse=%.3g ssim=%.3f", report.temporal_mse, report.spatial_ssim_mean)


def cmd_select_gamma(args, cfg, out: Path) -> None:
    data = load_data(args.data)
    fcfg = fit_config(cfg, args.seed)
    if args.grid:
        try:
            grid = [float(v) for v in args.grid.split(",")]
        except ValueError as exc:
            raise CliError(f"bad --grid value: {exc}", EXIT_CONFIG) from exc
    else:
        grid = cfg.get("gamma_grid", [0.1, 1.0, 10.0])
    tol = float(cfg.get("gamma_tol", 1e-3))
    sel = opt.select_gamma(data, fcfg, grid, tol=tol)
    _write_json(out / "gamma.json", {
        "gamma": sel.gamma,
        "ok": sel.ok,
        "violations": {repr(g): v for g, v in sel.violations.items()},
    })


COMMANDS = {
    "generate": cmd_generate,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "select-gamma": cmd_select_gamma,
    "baseline-pca": cmd_baseline_pca,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgpa", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="override the seed of every stochastic step")
    p.add_argument("--out", default=".", help="existing output directory (default: .)")
    p.add_argument("--threads", type=int, help="BLAS threads (default: $MGPA_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", help="write a synthetic benchmark dataset and its ground truth")
    f = sub.add_parser("fit", help="fit the model to a dataset directory")
    f.add_argument("--data", required=True, help="directory holding data.mgpt and data.json")
    f.add_argument("--resume", help="checkpoint directory to continue from")
    f.add_argument("--stop-at", type=int, help="stop after this many total steps")
    e = sub.add_parser("evaluate", help="score a fit (or PCA) directory against a ground truth")
    e.add_argument("--fit", required=True)
    e.add_argument("--truth", required=True)
    g = sub.add_parser("select-gamma", help="smallest gamma giving monotonic sources")
    g.add_argument("--data", required=True)
    g.add_argument("--grid", help="comma-separated increasing gamma values")
    b = sub.add_parser("baseline-pca", help="top-k PCA of the row-centred data")
    b.add_argument("--data", required=True)
    b.add_argument("-k", type=int)
    return p


def _thread_limit(args):
    n = args.threads
    if n is None and os.environ.get("MGPA_THREADS"):
        try:
            n = int(os.environ["MGPA_THREADS"])
        except ValueError as exc:
            raise CliError(f"MGPA_THREADS must be an integer, got {os.environ['MGPA_THREADS']!r}",
                           EXIT_CONFIG) from exc
    if n is None:
        return nullcontext()
    if n < 1:
        raise CliError(f"thread count must be >= 1, got {n}", EXIT_CONFIG)
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = Path(args.out)
        if not out.is_dir():
            raise CliError(f"output directory {out} does not exist", EXIT_CONFIG)
        cfg = load_config(args.config)
        with _thread_limit(args):
            COMMANDS[args.command](args, cfg, out)
    except CliError as exc:
        print(f"mgpa: error: {exc}", file=sys.stderr)
        return exc.code
    except ContractError as exc:
        print(f"mgpa: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"mgpa: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"mgpa: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
