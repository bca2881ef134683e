"""Command-line entry point: ``longmix simulate|fit|study``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import lmm, nlmm, sim
from .dataset import DatasetError, center_covariates, load_dataset, summarize
from .inference import ContrastError, wald_multivariate
from .splines import SplineError, equal_knots, quantile_knots

log = logging.getLogger("longmix")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NONCONV, EXIT_STUDY = 0, 1, 2, 3, 4
FIT_MODELS = ("lmm-quadratic", "lmm-splines", "fmm", "pmm", "smm")
STUDY_MODEL_ALIASES = {"pmm": "pmm-polynomial"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# SVG


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _ticks(lo: float, hi: float, n: int = 6) -> list[float]:
    span = hi - lo if hi > lo else 1.0
    raw = span / max(n - 1, 1)
    mag = 10.0 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-9 * span:
        out.append(round(float(v), 10) + 0.0)
        v += step
    return out


def line_plot(series, title: str = "", xlabel: str = "years before event", ylabel: str = "outcome",
              width: int = 640, height: int = 420) -> str:
    """Self-contained SVG line chart.

    ``series`` holds dicts with keys x, y, and optional label, color, width,
    dash, opacity and band=(lower, upper).
    """
    ml, mr, mt, mb = 64, 150, 36, 48
    pw, ph = width - ml - mr, height - mt - mb
    xs = np.concatenate([np.asarray(s["x"], dtype=float) for s in series])
    ys = [np.asarray(s["y"], dtype=float) for s in series]
    ys += [np.asarray(b, dtype=float) for s in series if s.get("band") for b in s["band"]]
    ys = np.concatenate(ys)
    ys = ys[np.isfinite(ys)]
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    if y1 - y0 < 1e-12:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    if x1 - x0 < 1e-12:
        x0, x1 = x0 - 1.0, x1 + 1.0

    def px(x):
        return ml + (np.asarray(x, dtype=float) - x0) / (x1 - x0) * pw

    def py(y):
        return mt + (y1 - np.asarray(y, dtype=float)) / (y1 - y0) * ph

    def path(xv, yv):
        pts = [f"{_fmt(a)},{_fmt(b)}" for a, b in zip(px(xv), py(yv)) if np.isfinite(b)]
        return "M" + " L".join(pts) if pts else ""

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444444"/>',
    ]
    if title:
        out.append(f'<text x="{ml + pw / 2:.1f}" y="22" text-anchor="middle" font-size="14">{_esc(title)}</text>')
    for v in _ticks(x0, x1):
        X = _fmt(float(px(v)))
        out.append(f'<line x1="{X}" y1="{mt + ph}" x2="{X}" y2="{mt + ph + 5}" stroke="#444444"/>')
        out.append(f'<text x="{X}" y="{mt + ph + 18}" text-anchor="middle">{v:g}</text>')
    for v in _ticks(y0, y1):
        Y = _fmt(float(py(v)))
        out.append(f'<line x1="{ml - 5}" y1="{Y}" x2="{ml}" y2="{Y}" stroke="#444444"/>')
        out.append(f'<line x1="{ml}" y1="{Y}" x2="{ml + pw}" y2="{Y}" stroke="#eeeeee"/>')
        out.append(f'<text x="{ml - 8}" y="{Y}" text-anchor="end" dominant-baseline="middle">{v:g}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{_esc(xlabel)}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{_esc(ylabel)}</text>')
    legend_y = mt + 8
    for k, s in enumerate(series):
        color = s.get("color", _PALETTE[k % len(_PALETTE)])
        if s.get("band"):
            lo, hi = (np.asarray(b, dtype=float) for b in s["band"])
            xv = np.asarray(s["x"], dtype=float)
            pts = [f"{_fmt(a)},{_fmt(b)}" for a, b in zip(px(xv), py(hi))]
            pts += [f"{_fmt(a)},{_fmt(b)}" for a, b in zip(px(xv[::-1]), py(lo[::-1]))]
            out.append(f'<polygon points="{" ".join(pts)}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        d = path(s["x"], s["y"])
        if not d:
            continue
        dash = f' stroke-dasharray="{s["dash"]}"' if s.get("dash") else ""
        op = s.get("opacity", 1.0)
        out.append(f'<path d="{d}" fill="none" stroke="{color}" stroke-width="{s.get("width", 2)}"'
                   f' stroke-opacity="{op:g}"{dash}/>')
        if s.get("label"):
            lx = ml + pw + 12
            out.append(f'<line x1="{lx}" y1="{legend_y}" x2="{lx + 20}" y2="{legend_y}" stroke="{color}" '
                       f'stroke-width="2"{dash}/>')
            out.append(f'<text x="{lx + 26}" y="{legend_y}" dominant-baseline="middle">{_esc(s["label"])}</text>')
            legend_y += 18
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(text: str) -> str:
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


# ---------------------------------------------------------------------------
# argument handling


def _kv_pairs(text: str) -> dict[str, float]:
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise UsageError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise UsageError(f"non-numeric value in {part!r}") from None
    return out


def parse_covariate_map(text: str | None) -> dict[str, tuple[str, ...]]:
    """``"final:edu,sex;midpoint:edu"`` -> {"final": ("edu", "sex"), "midpoint": ("edu",)}.

    A bare list ``"edu,sex"`` maps to the key "*".
    """
    out: dict[str, tuple[str, ...]] = {}
    if not text:
        return out
    for block in filter(None, (b.strip() for b in text.split(";"))):
        if ":" in block:
            key, rest = block.split(":", 1)
            key = key.strip()
        else:
            key, rest = "*", block
        covs = tuple(c.strip() for c in rest.split(",") if c.strip())
        if not key or not covs:
            raise UsageError(f"malformed covariate block {block!r}")
        if key in out:
            raise UsageError(f"parameter {key!r} listed twice")
        out[key] = covs
    return out


def _knots(text: str, ds):
    kind, _, num = text.partition(":")
    try:
        K = int(num)
    except ValueError:
        raise UsageError(f"bad --knots {text!r}; use quantile:K or equal:K") from None
    if kind == "quantile":
        return quantile_knots(ds.all_times, K)
    if kind == "equal":
        t = ds.all_times
        return equal_knots(float(t.min()), float(t.max()), K)
    raise UsageError(f"bad --knots {text!r}; use quantile:K or equal:K")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="longmix", description="Mixed models for trajectories aligned at a terminal event.")
    p.add_argument("--config", help="JSON file with default values for the chosen command")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a simulated cohort")
    s.add_argument("--config", dest="sub_config", help=argparse.SUPPRESS)
    s.add_argument("--scenario", choices=sorted(sim.SCENARIOS))
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--challenge", choices=sim.CHALLENGES, default="none")
    s.add_argument("--missing-includes-final", action="store_true", default=False)
    s.add_argument("--out", default=".")

    f = sub.add_parser("fit", help="fit one model to a CSV dataset")
    f.add_argument("--config", dest="sub_config", help=argparse.SUPPRESS)
    f.add_argument("--model", choices=FIT_MODELS)
    f.add_argument("--data")
    f.add_argument("--covariates", default="",
                   help='nonlinear models: "param:cov1,cov2;..."; linear models: "cov1,cov2"')
    f.add_argument("--center", default="", help="centering offsets, k=v,...")
    f.add_argument("--knots", default=None,
                   help="quantile:K or equal:K; defaults to quantile:3 for lmm-splines and the FMM rule for fmm")
    f.add_argument("--no-subject-curves", action="store_true",
                   help="fmm: drop the penalized nonlinear part of the subject random functions")
    f.add_argument("--nu", type=float, default=2.0, help="PMM transition length in years")
    f.add_argument("--method", choices=("SAEM", "AGQ"), default="SAEM", help="nonlinear estimation method")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--wald", action="append", default=[], help="contrast such as 'a:t; a:t^2'")
    f.add_argument("--plot", action="append", default=[], help="marginal or subject=ID")
    f.add_argument("--profile", default="", help="covariate values (raw units) for --plot marginal, k=v,...")
    f.add_argument("--out", default=".")

    st = sub.add_parser("study", help="run a simulation study")
    st.add_argument("--config", dest="sub_config", help=argparse.SUPPRESS)
    st.add_argument("--scenario", choices=sorted(sim.SCENARIOS))
    st.add_argument("--challenge", choices=sim.CHALLENGES, default="none")
    st.add_argument("--models", default="all")
    st.add_argument("--r", type=int, default=100)
    st.add_argument("--n", type=int, default=500)
    st.add_argument("--seed", type=int)
    st.add_argument("--threads", type=int, default=None)
    st.add_argument("--dump-curves", action="store_true", default=False)
    st.add_argument("--out", default=".")
    return p


def _parse(argv: Sequence[str] | None):
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg_path = getattr(args, "sub_config", None) or args.config
    if cfg_path:
        try:
            cfg = json.loads(Path(cfg_path).read_text())
        except OSError as exc:
            raise OSError(f"cannot read config {cfg_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {cfg_path} is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = cfg.get(args.command, cfg)
        # re-parse with config values as defaults so explicit flags win
        sub = parser._subparsers._group_actions[0].choices[args.command]
        dests = {a.dest for a in sub._actions}
        unknown = [k for k in cfg if k.replace("-", "_") not in dests]
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    return parser, args


# ---------------------------------------------------------------------------
# commands


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_simulate(args) -> int:
    for name in ("scenario", "n", "seed"):
        if getattr(args, name) is None:
            raise UsageError(f"simulate requires --{name}")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    scenario = sim.SCENARIOS[args.scenario]
    if args.missing_includes_final:
        scenario = sim.Scenario(**{**scenario.to_dict(), "missing_includes_final": True})
    data = sim.generate_dataset(scenario, args.n, args.seed)
    data = sim.apply_challenge(data, sim.Challenge(args.challenge), args.seed)
    out = Path(args.out)
    _write(out / "data.csv", data.dataset.to_csv())
    _write(out / "truth.csv", data.truth_csv())
    summ = summarize(data.dataset)
    print(f"scenario {args.scenario} challenge {args.challenge}: {summ.n_subjects} subjects, "
          f"{summ.n_obs} observations, mean follow-up {summ.follow_up_mean:.2f} years")
    return EXIT_OK


def _fit(args, ds):
    cmap = parse_covariate_map(args.covariates)
    if args.model in ("lmm-quadratic", "lmm-splines", "fmm"):
        covs: list[str] = []
        for v in cmap.values():
            covs += [c for c in v if c not in covs]
        if args.model == "lmm-quadratic":
            return lmm.fit_lmm(ds, lmm.LmmSpec("quadratic", covariates=covs), seed=args.seed)
        if args.model == "lmm-splines":
            knots = _knots(args.knots or "quantile:3", ds)
            return lmm.fit_lmm(ds, lmm.LmmSpec("natural-spline", knots, covariates=covs), seed=args.seed)
        knots = _knots(args.knots, ds) if args.knots else None
        return lmm.fit_fmm(ds, covariates=covs, knots=knots, subject_nonlinear=not args.no_subject_curves,
                           seed=args.seed)
    if "*" in cmap:
        raise UsageError("nonlinear models need param:cov blocks in --covariates")
    family = "smm" if args.model == "smm" else "pmm-polynomial"
    spec = nlmm.NlmmSpec(family, cmap, transition_length=args.nu)
    if args.method == "AGQ":
        start = nlmm.fit_saem(ds, spec, nlmm.SaemControls(seed=args.seed, compute_loglik=False))
        return nlmm.fit_agq(ds, spec, start=start)
    return nlmm.fit_saem(ds, spec, nlmm.SaemControls(seed=args.seed))


def _predict(fit, which: str, *args):
    mod = nlmm if fit.family in ("smm", "pmm") else lmm
    return getattr(mod, which)(fit, *args)


def cmd_fit(args) -> int:
    if args.model is None or args.data is None:
        raise UsageError("fit requires --model and --data")
    try:
        text = Path(args.data).read_text()
    except OSError as exc:
        raise OSError(f"cannot read {args.data}: {exc}") from exc
    ds = load_dataset(text)
    centers = _kv_pairs(args.center)
    if centers:
        ds = center_covariates(ds, centers)
    fit = _fit(args, ds)
    out = Path(args.out)
    report = fit.to_dict()
    report["model"] = args.model
    report["seed"] = args.seed
    if args.wald:
        report["wald"] = {c: wald_multivariate(fit, c).to_dict() for c in args.wald}
    _write(out / "fit.json", json.dumps(report, indent=2) + "\n")
    _write(out / "fit.csv", fit.to_csv())
    lo, hi = float(ds.all_times.min()), 0.0
    grid = np.linspace(lo, hi, 121)
    for spec in args.plot:
        if spec == "marginal":
            # unspecified covariates sit at their centering value
            prof = dict.fromkeys(ds.covariate_names, 0.0)
            for k, v in _kv_pairs(args.profile).items():
                if k not in prof:
                    raise UsageError(f"unknown covariate {k!r} in --profile")
                prof[k] = v - ds.centers.get(k, 0.0)
            traj = _predict(fit, "predict_marginal", prof or None, grid)
            band = (traj.lower, traj.upper) if traj.lower is not None else None
            svg = line_plot([{"x": grid, "y": traj.values, "label": args.model, "band": band}],
                            title=f"{args.model} marginal trajectory")
            _write(out / "marginal.svg", svg)
        elif spec.startswith("subject="):
            sid = spec.split("=", 1)[1]
            try:
                subj = ds.subject(sid)
            except KeyError:
                raise UsageError(f"unknown subject {sid!r}") from None
            traj = _predict(fit, "predict_subject", subj, grid)
            prof = {k: v for k, v in subj.covariates.items()}
            marg = _predict(fit, "predict_marginal", prof or None, grid)
            svg = line_plot(
                [{"x": grid, "y": traj.values, "label": f"subject {sid}"},
                 {"x": grid, "y": marg.values, "label": "population", "dash": "6 4", "color": "#777777"},
                 {"x": subj.times, "y": subj.outcomes, "label": "observed", "color": "#000000", "width": 1}],
                title=f"{args.model} subject {sid}")
            _write(out / f"subject_{sid}.svg", svg)
        else:
            raise UsageError(f"bad --plot {spec!r}; use marginal or subject=ID")
    print(f"{args.model}: loglik {fit.loglik:.4f} BIC {fit.bic:.4f} converged {fit.converged}")
    for k, v in fit.fixed.items():
        print(f"  {k:<24s} {v: .5f}  ({fit.fixed_se[k]:.5f})")
    if not fit.converged:
        print("warning: fit did not converge", file=sys.stderr)
        return EXIT_NONCONV
    return EXIT_OK


def _threads(args) -> int:
    if args.threads is not None:
        return int(args.threads)
    env = os.environ.get("LONGMIX_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"LONGMIX_THREADS must be an integer, got {env!r}") from None
    return 1


def cmd_study(args) -> int:
    for name in ("scenario", "seed"):
        if getattr(args, name) is None:
            raise UsageError(f"study requires --{name}")
    if args.models == "all":
        models = sim.MODELS
    else:
        models = tuple(dict.fromkeys(STUDY_MODEL_ALIASES.get(m.strip(), m.strip())
                                      for m in args.models.split(",") if m.strip()))
        bad = [m for m in models if m not in sim.MODELS]
        if bad or not models:
            raise UsageError(f"unknown models {bad}; choose from {', '.join(sim.MODELS)}")
    if args.r < 1 or args.n < 1:
        raise UsageError("--r and --n must be >= 1")
    threads = _threads(args)
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    scenario = sim.SCENARIOS[args.scenario]
    try:
        rep = sim.run_study(scenario, sim.Challenge(args.challenge), models, args.r, args.n, args.seed, threads)
    except sim.StudyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STUDY
    out = Path(args.out)
    _write(out / "report.csv", rep.to_csv())
    _write(out / "report.json", rep.to_json() + "\n")
    _write(out / "runtime.json", json.dumps({k: round(v, 3) for k, v in rep.runtime.items()}, indent=1) + "\n")
    if args.dump_curves:
        _write(out / "curves.csv", rep.curves_csv())
    truth = scenario.truth(rep.grid)
    for m in models:
        curves = rep.curves[m]
        series = [{"x": rep.grid, "y": c, "color": "#9ecae1", "width": 1, "opacity": 0.5} for c in curves[:20]]
        series.append({"x": rep.grid, "y": truth, "label": "truth", "color": "#000000"})
        series.append({"x": rep.grid, "y": curves.mean(axis=0), "label": "mean estimate", "color": "#d62728",
                       "dash": "6 4"})
        _write(out / f"{m}.svg", line_plot(series, title=f"scenario {rep.scenario}, {rep.challenge}: {m}"))
    print(f"scenario {rep.scenario} challenge {rep.challenge} R={rep.R} N={rep.N}")
    print(f"{'model':<16s} {'max|bias|':>10s} {'max MSE':>10s} {'failed':>7s}")
    for m in models:
        c = rep.cells[m]
        print(f"{m:<16s} {np.max(np.abs(c.bias)):10.4f} {np.max(c.mse):10.4f} {rep.failures[m]:7d}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "study": cmd_study}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        parser, args = _parse(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, SplineError, ContrastError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        code = EXIT_IO if isinstance(exc, DatasetError) else EXIT_USAGE
        print(f"error: {msg}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"error: estimation failed: {exc}", file=sys.stderr)
        return EXIT_NONCONV


if __name__ == "__main__":
    sys.exit(main())
