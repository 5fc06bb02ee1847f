"""Command-line entry point: ``causalpsw <subcommand> ...``.

Exit codes: 0 success, 1 computational failure, 2 usage or config error.
Relative output paths resolve under $CPSW_OUTPUT_ROOT (default ``runs``).
"""

from __future__ import annotations

import argparse
import configparser
import itertools
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import bounds, datasets, graph, learner, propensity, runs, scm

OUTPUT_ROOT_ENV = "CPSW_OUTPUT_ROOT"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# --- config --------------------------------------------------------------------

def load_config(path) -> dict:
    """Flat key -> value from an INI file (sections are only grouping) or JSON."""
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from None
        flat = {}
        for k, v in data.items():
            if isinstance(v, dict):
                flat.update(v)
            else:
                flat[k] = v
        return flat
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    flat = dict(cp.defaults())
    for sec in cp.sections():
        flat.update({k: v for k, v in cp.items(sec, raw=True)})
    return flat


def _coerce(value, like, key):
    if isinstance(value, str):
        value = value.strip()
    try:
        if isinstance(like, bool):
            if isinstance(value, str):
                low = value.lower()
                if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise ValueError(value)
                return low in ("1", "true", "yes", "on")
            return bool(value)
        if isinstance(like, tuple):
            if isinstance(value, str):
                return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
            return tuple(int(v) for v in value)
        if key == "filter_size":
            return None if value in (None, "", "none", "None") else float(value)
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except (TypeError, ValueError):
        raise UsageError(f"config key {key}: cannot parse {value!r}") from None
    return value


def train_config(conf: dict, args) -> learner.TrainConfig:
    base = learner.TrainConfig()
    kw = {}
    for f in fields(learner.TrainConfig):
        like = getattr(base, f.name)
        if f.name in conf:
            kw[f.name] = _coerce(conf[f.name], like, f.name)
        cli_val = getattr(args, f.name, None)
        if cli_val is not None:
            kw[f.name] = _coerce(cli_val, like, f.name)
    cfg = replace(base, **kw)
    try:
        cfg.validate()
    except learner.ConfigInvalid as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _pick(args, conf, key, default=None):
    v = getattr(args, key, None)
    if v is not None:
        return v
    return conf.get(key, default)


def output_path(p) -> Path:
    p = Path(p)
    if p.is_absolute():
        return p
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / p


def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _load_data(args, conf):
    data = _pick(args, conf, "data")
    if data is None:
        raise UsageError("no dataset directory given (--data or 'data' in config)")
    path = Path(data)
    if not path.is_absolute() and not path.exists():
        path = output_path(path)
    if not (path / "manifest.json").exists():
        raise UsageError(f"dataset not found: {path} has no manifest.json")
    return datasets.load_domains(path)


# --- subcommands -----------------------------------------------------------------

def cmd_generate_data(args, conf) -> int:
    seed = int(_pick(args, conf, "seed", 0))
    tags = _pick(args, conf, "domains")
    biases = _pick(args, conf, "biases")
    size = int(_pick(args, conf, "size", 5000))
    noise = float(_pick(args, conf, "noise", 0.25))
    extra = dict(channels=int(_pick(args, conf, "channels", 3)),
                 color_first=bool(_coerce(_pick(args, conf, "color_first", False), False, "color_first")),
                 source=_pick(args, conf, "idx_images"), labels_source=_pick(args, conf, "idx_labels"))
    if biases is not None:
        spec = datasets.GenSpec(_floats(biases), noise, seed, size, **extra)
    elif tags is not None:
        names = [t.strip() for t in str(tags).split(",")]
        unknown = [t for t in names if t not in datasets.COLORED_MNIST_FLIPS]
        if unknown:
            raise UsageError(f"unknown domain tags {unknown}; known {list(datasets.COLORED_MNIST_FLIPS)}")
        spec = datasets.GenSpec([1 - datasets.COLORED_MNIST_FLIPS[t] for t in names], noise, seed, size, names, **extra)
    else:
        spec = datasets.colored_mnist_spec(seed, size, noise, **extra)
    doms = datasets.generate(spec)
    out = output_path(_pick(args, conf, "out", "data"))
    manifest = datasets.save_domains(doms, out, spec)
    for e in json.loads(manifest.read_text())["domains"]:
        print(f"{e['name']}\t{e['file']}\tn={e['size']}\tsha256={e['sha256']}")
    print(f"manifest\t{manifest}")
    return EXIT_OK


def cmd_train(args, conf) -> int:
    cfg = train_config(conf, args)
    doms = _load_data(args, conf)
    held = _pick(args, conf, "test_domain", doms[-1].name)
    out = output_path(_pick(args, conf, "out", "train"))
    log = print if args.verbose else None
    s = runs.run_one(cfg, doms, held, out, log=log)
    print(f"method\t{s['method']}\nheld_out\t{s['test_domain']}\naccuracy\t{s['accuracy']:.4f}\nrun_dir\t{s['dir']}")
    return EXIT_OK


def cmd_sweep(args, conf) -> int:
    base = train_config(conf, args)
    doms = _load_data(args, conf)
    held = _pick(args, conf, "test_domain", doms[-1].name)
    alphas = _floats(_pick(args, conf, "alphas", runs.ALPHA_GRID))
    betas = _floats(_pick(args, conf, "betas", runs.BETA_GRID))
    seeds = [int(v) for v in _floats(_pick(args, conf, "seeds", [base.seed]))]
    out = output_path(_pick(args, conf, "out", "sweep"))
    ablations = not args.no_ablations
    log = print if args.verbose else None
    res = runs.protocol(base, doms, held, seeds, alphas, betas, out, ablations, log)
    grid = runs.median_grid(res["grid"])
    runs.write_heatmap_csv(grid, out / "heatmap.csv", alphas, betas)
    from . import plotting
    plotting.heatmap(grid, out / "heatmap.png", f"held-out {held}, median over {len(seeds)} seed(s)")
    print((out / "heatmap.csv").read_text(), end="")
    best = res["best"]
    print(f"best\talpha={best[0]:g}\tbeta={best[1]:g}\t{grid[best]:.4f}")
    if ablations:
        for key in ("erm", "no_ps", "no_psw"):
            print(f"{key}\t{np.median(res[key]):.4f}")
    print(f"runs\t{len(list(out.rglob('summary.json')))}")
    return EXIT_OK


def cmd_report(args, conf) -> int:
    root = Path(_pick(args, conf, "run_dir"))
    if not root.is_absolute() and not root.exists():
        root = output_path(root)
    if not root.exists():
        raise UsageError(f"run directory not found: {root}")
    summaries = runs.collect(root)
    if not summaries:
        print(f"no runs found under {root}")
        return EXIT_USAGE
    rows, doms, table = runs.accuracy_table(summaries)
    text = runs.format_table(rows, doms, table)
    out = Path(args.out) if args.out else root / "report"
    out.mkdir(parents=True, exist_ok=True)
    (out / "accuracy.csv").write_text(text)
    from . import plotting
    plotting.accuracy_bars(rows, doms, table, out / "accuracy.png")
    for s in summaries:
        mpath = Path(s["dir"]) / "metrics.csv"
        if mpath.exists():
            plotting.learning_curves(learner.read_metrics(mpath), Path(s["dir"]) / "curves.png",
                                     runs.row_label(s) + f" seed {s['seed']}")
    print(text, end="")
    print(f"figures\t{out / 'accuracy.png'}")
    return EXIT_OK


def cmd_casestudy(args, conf) -> int:
    cfg = train_config(conf, args)
    if cfg.alpha <= 0:
        cfg = replace(cfg, alpha=1.0)
    doms = _load_data(args, conf)
    held = _pick(args, conf, "test_domain", doms[-1].name)
    train_d, test_d = datasets.split_domains(doms, held)
    res = learner.train(cfg, train_d, test_d)
    info = res.propensity
    out = output_path(_pick(args, conf, "out", "casestudy"))
    out.mkdir(parents=True, exist_ok=True)
    propensity.write_case_study_csv(out / "propensity.csv", np.arange(len(info["pi"])), info["domain"],
                                    info["c_cluster"], info["s_cluster"], info["pi"])
    # one batch-ordered summary per training batch of the first epoch ordering
    bs = cfg.batch_size
    with (out / "batches.csv").open("w") as fh:
        fh.write("batch,size,pi_min,pi_mean,pi_max\n")
        order = learner.substream(cfg.seed, "shuffle").permutation(len(info["pi"]))
        for b, start in enumerate(range(0, len(order), bs)):
            p = info["pi"][order[start:start + bs]]
            fh.write(f"{b},{len(p)},{p.min():.6f},{p.mean():.6f},{p.max():.6f}\n")
    from . import plotting
    plotting.propensity_hist(info["pi"], info["domain"], out / "propensity.png")
    print("domain,c_cluster,s_cluster,count,pi")
    for d in np.unique(info["domain"]):
        sel = info["domain"] == d
        for c, s in itertools.product(np.unique(info["c_cluster"]), np.unique(info["s_cluster"])):
            cell = sel & (info["c_cluster"] == c) & (info["s_cluster"] == s)
            if cell.any():
                print(f"{d},{c},{s},{int(cell.sum())},{info['pi'][cell][0]:.4f}")
    print(f"propensity_csv\t{out / 'propensity.csv'}")
    return EXIT_OK


def _read_text(path) -> str:
    """File contents; ``fixture:NAME`` reads a model shipped with the package."""
    if str(path).startswith("fixture:"):
        p = scm.FIXTURE_DIR / (str(path)[len("fixture:"):] + ".scm")
    else:
        p = Path(path)
    if not p.exists():
        raise UsageError(f"file not found: {p}")
    return p.read_text()


def _bool(v: bool) -> str:
    return "true" if v else "false"


def cmd_analyze_graph(args, conf) -> int:
    text = _read_text(args.graph)
    g = graph.parse_dag(text)
    model = scm.parse_scm(text) if any(ln.strip().startswith("cpt") for ln in text.splitlines()) else None
    given = _names(args.given)
    if args.paths:
        x, y = args.paths
        for p in graph.enumerate_paths(g, x, y):
            state = "blocked" if graph.is_blocked(g, p, given) else "open"
            print(f"path\t{p}\t{state}")
    if args.dsep:
        x, y = args.dsep
        print(f"d-separated: {_bool(graph.is_d_separated(g, x, y, given))}")
    if args.backdoor:
        x, y = args.backdoor
        sets = graph.adjustment_sets(g, x, y, given=given)
        for z in sets:
            print("backdoor set\t{" + ", ".join(z) + "}")
        if not sets:
            print("backdoor set\tnone")
        if model is not None:
            _adjustment_report(model, g, x, y, given)
    return EXIT_OK


def _names(items) -> list[str]:
    out = []
    for it in items or []:
        out += [s for s in it.replace(",", " ").split() if s]
    return out


def _adjustment_report(model, g, x, y, given):
    ctx = model.context
    jt = scm.joint(model)
    pool = sorted(set(g.nodes) - {x, y} - g.descendants(x) - set(ctx))
    print("set,valid_backdoor,x,estimate,do_truth,gap")
    for r in range(len(pool) + 1):
        for z in itertools.combinations(pool, r):
            valid = graph.satisfies_backdoor(g, x, y, z, given)
            for xv in model.domains[x]:
                truth = scm.interventional(model, {x: xv}, {y: model.domains[y][-1]})
                try:
                    est = scm.adjustment_estimate(jt, {x: xv}, {y: model.domains[y][-1]}, z)
                except scm.PositivityViolation:
                    print(f"{{{' '.join(z)}}},{_bool(valid)},{xv},positivity violated,{truth:.12f},")
                    continue
                print(f"{{{' '.join(z)}}},{_bool(valid)},{xv},{est:.12f},{truth:.12f},{abs(est - truth):.3e}")


def _assignments(items) -> dict:
    out = {}
    for it in _names(items):
        if "=" not in it:
            raise UsageError(f"expected VAR=value, got {it!r}")
        k, v = it.split("=", 1)
        out[k] = scm._parse_value(v)
    return out


def cmd_scm(args, conf) -> int:
    model = scm.parse_scm(_read_text(args.model))
    jt = scm.joint(model)
    if args.query:
        outcome = _assignments(args.query)
        given = _assignments(args.given)
        do = _assignments(args.do)
        if do:
            p = scm.interventional(model, do, outcome, given or None)
        else:
            p = scm.query(jt, outcome, given or None)
        print(f"probability\t{p:.12f}")
    if args.nonconfounding:
        x, y = args.nonconfounding
        t1, t2 = _names(args.t1), _names(args.t2)
        ctx = model.context if not args.no_context else None
        stat = scm.check_nonconfounding_statistical(jt, model.graph, x, y, t1, t2, ctx)
        print(f"statistical\t{_bool(stat)}")
        print(f"causal\t{_bool(scm.check_nonconfounding_causal(model, x, y))}")
    return EXIT_OK


def cmd_bound(args, conf) -> int:
    delta = float(_pick(args, conf, "delta_conf", 0.05))
    omega = float(_pick(args, conf, "omega", 10.0))
    h = int(_pick(args, conf, "hypotheses", 16))
    form = _pick(args, conf, "form", bounds.OMEGA_FORM)
    if args.coverage:
        sc = bounds.bias_scenario(int(_pick(args, conf, "n", 1000)), float(_pick(args, conf, "bias", 0.9)),
                                  float(_pick(args, conf, "noise", 0.1)), omega=omega)
        res = bounds.coverage_experiment(sc, int(_pick(args, conf, "trials", 200)), delta,
                                         int(_pick(args, conf, "seed", 0)), form)
        out = output_path(_pick(args, conf, "out", "bound")) / "trials.csv"
        bounds.write_trials_csv(res.rows, out)
        print(f"coverage\t{res.coverage:.4f}\nmean_slack\t{res.mean_slack:.6f}\ntrials_csv\t{out}")
        return EXIT_OK
    src = _pick(args, conf, "propensities")
    if src is None:
        raise UsageError("bound needs --propensities CSV (or --coverage)")
    try:
        pi = bounds.read_propensity_csv(src)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    b = bounds.BoundInput(float(_pick(args, conf, "risk", 0.0)), omega, len(pi), h, delta, pi)
    slack = bounds.psw_slack(b)
    print(f"n\t{len(pi)}\nslack\t{slack:.12g}\nbound\t{b.empirical_risk + slack:.12g}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def _train_args(p):
    p.add_argument("--data")
    p.add_argument("--test-domain", dest="test_domain")
    p.add_argument("--out")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--hidden", help="comma-separated layer sizes")
    p.add_argument("--filter-size", dest="filter_size", type=float)
    p.add_argument("--mask-mode", dest="mask_mode")
    p.add_argument("--delta", type=float, help="upper end of the mixing ratio range")
    p.add_argument("--n-spurious", dest="n_spurious", type=int)
    p.add_argument("--floor", type=float)
    p.add_argument("--refresh", type=int)
    p.add_argument("--self-normalize", dest="self_normalize", action="store_const", const=True)
    p.add_argument("--freeze-head", dest="freeze_head", action="store_const", const=True)
    p.add_argument("--pooled", action="store_const", const=True)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="causalpsw", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int)
        p.add_argument("--config")
        p.set_defaults(fn=fn)
        return p

    p = add("generate-data", cmd_generate_data, "write colored digit domains and a manifest")
    p.add_argument("--out")
    p.add_argument("--biases", help="comma-separated color-label agreement per domain")
    p.add_argument("--domains", help="comma-separated protocol tags such as +90%%,+80%%,-90%%")
    p.add_argument("--size", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--channels", type=int)
    p.add_argument("--color-first", dest="color_first", action="store_const", const=True)
    p.add_argument("--idx-images", dest="idx_images")
    p.add_argument("--idx-labels", dest="idx_labels")

    _train_args(add("train", cmd_train, "train one model with a held-out domain"))
    p = add("sweep", cmd_sweep, "alpha x beta grid plus ERM and ablation runs")
    _train_args(p)
    p.add_argument("--alphas")
    p.add_argument("--betas")
    p.add_argument("--seeds", help="comma-separated seeds; medians are reported")
    p.add_argument("--no-ablations", dest="no_ablations", action="store_true")

    p = add("casestudy", cmd_casestudy, "train with propensity weighting and dump per-sample propensities")
    _train_args(p)

    p = add("report", cmd_report, "held-out accuracy table and figures from run directories")
    p.add_argument("run_dir", nargs="?")
    p.add_argument("--out")

    p = add("analyze-graph", cmd_analyze_graph, "paths, d-separation and backdoor sets of a graph file")
    p.add_argument("graph")
    p.add_argument("--paths", nargs=2, metavar=("X", "Y"))
    p.add_argument("--dsep", nargs=2, metavar=("X", "Y"))
    p.add_argument("--backdoor", nargs=2, metavar=("X", "Y"))
    p.add_argument("--given", action="append")

    p = add("scm", cmd_scm, "exact queries on a discrete SCM file")
    p.add_argument("model")
    p.add_argument("--query", action="append", help="VAR=value outcome")
    p.add_argument("--given", action="append")
    p.add_argument("--do", action="append")
    p.add_argument("--nonconfounding", nargs=2, metavar=("X", "Y"))
    p.add_argument("--t1", action="append")
    p.add_argument("--t2", action="append")
    p.add_argument("--no-context", dest="no_context", action="store_true")

    p = add("bound", cmd_bound, "propensity-weighted generalization bound")
    p.add_argument("--propensities")
    p.add_argument("--risk", type=float)
    p.add_argument("--omega", type=float)
    p.add_argument("--hypotheses", type=int)
    p.add_argument("--delta", dest="delta_conf", type=float, help="confidence parameter")
    p.add_argument("--form", choices=[bounds.OMEGA_FORM])
    p.add_argument("--coverage", action="store_true", help="run the coverage experiment instead")
    p.add_argument("--trials", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--bias", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--out")
    return ap


USAGE_ERRORS = (UsageError, datasets.DatasetError, graph.GraphError, learner.ConfigInvalid,
                bounds.InvalidConfidence, bounds.ScenarioInvalid, FileNotFoundError)
COMPUTE_ERRORS = (learner.NonFiniteLoss, scm.ScmError, bounds.BoundError, propensity.PropensityError,
                  learner.LearnerError, ArithmeticError)


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        conf = load_config(args.config)
        if args.seed is not None:
            conf["seed"] = args.seed
        if args.command == "report" and _pick(args, conf, "run_dir") is None:
            raise UsageError("report needs a run directory")
        return args.fn(args, conf)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except COMPUTE_ERRORS as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
