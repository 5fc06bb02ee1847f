"""Run directories, grid sweeps and the held-out accuracy tables built from them.

A run directory holds config.json, metrics.csv, model.ckpt and summary.json.
``summary.json`` is what the report reads; the other files are for replay.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import replace
from pathlib import Path

from . import learner
from .datasets import split_domains

ALPHA_GRID = (1.0, 0.1, 0.01)
BETA_GRID = (1.0, 0.1, 0.01, 0.001)

ERM = "ERM"
FULL = "ERM+PSW"
NO_PS = "w/o L_PS"
NO_PSW = "w/o L_PSW"


class RunError(RuntimeError):
    pass


def method_of(alpha: float, beta: float) -> str:
    if alpha > 0 and beta > 0:
        return FULL
    if alpha > 0:
        return NO_PS
    if beta > 0:
        return NO_PSW
    return ERM


def run_name(cfg: learner.TrainConfig, test_domain: str) -> str:
    slug = test_domain.replace("+", "p").replace("-", "m").replace("%", "")
    return f"held_{slug}_a{cfg.alpha:g}_b{cfg.beta:g}_s{cfg.seed}"


def run_one(cfg: learner.TrainConfig, domains, test_domain, out_dir=None, bands=None, log=None) -> dict:
    """Train with ``test_domain`` held out; write the run directory when ``out_dir`` is set."""
    train_d, test_d = split_domains(domains, test_domain)
    res = learner.train(cfg, train_d, test_d, log=log, bands=bands)
    held = test_d[0].name
    summary = {
        "method": method_of(cfg.alpha, cfg.beta), "alpha": cfg.alpha, "beta": cfg.beta, "seed": cfg.seed,
        "test_domain": held, "accuracy": learner.final_accuracy(res.history, held),
        "train_accuracy": {d.name: learner.final_accuracy(res.history, d.name, "train") for d in train_d},
        "epochs": cfg.epochs,
    }
    if out_dir is not None:
        run_dir = Path(out_dir) / run_name(cfg, held)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
        learner.write_metrics(res.history, run_dir / "metrics.csv")
        learner.save_checkpoint(res.params, run_dir / "model.ckpt")
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        summary["dir"] = str(run_dir)
    summary["result"] = res
    return summary


def protocol(base: learner.TrainConfig, domains, test_domain, seeds=(0,), alphas=ALPHA_GRID,
             betas=BETA_GRID, out_dir=None, ablations: bool = True, log=None) -> dict:
    """Grid over (alpha, beta) for every seed, then ERM and both ablations at the best cell.

    ``domains`` is a list shared by all seeds or a callable seed -> list.  The
    best cell maximises the median held-out accuracy over seeds, which is
    oracle selection on the test domain.  Returns per-seed accuracies:
    {"grid": {(a, b): [acc per seed]}, "best": (a, b), "erm": [...], "no_ps": [...], "no_psw": [...]}.
    """
    get = domains if callable(domains) else (lambda _seed: domains)
    grid = {(a, b): [] for a in alphas for b in betas}

    def each_seed():
        # band images are large (three float64 copies of the training set), so
        # they are rebuilt per seed rather than held for every seed at once
        for seed in seeds:
            doms = get(seed)
            train_d, _ = split_domains(doms, test_domain)
            yield seed, doms, learner.precompute_bands(base, train_d)

    def run(a, b, seed, doms, bands, key):
        acc = run_one(replace(base, alpha=a, beta=b, seed=seed), doms, test_domain, out_dir, bands)["accuracy"]
        if log:
            log(f"{key} alpha={a:g} beta={b:g} seed={seed}: {acc:.4f}")
        return acc

    for seed, doms, bands in each_seed():
        for a in alphas:
            for b in betas:
                grid[(a, b)].append(run(a, b, seed, doms, bands, "grid"))
    best = max(grid, key=lambda k: (statistics.median(grid[k]), -k[0], -k[1]))
    out = {"grid": grid, "best": best}
    if not ablations:
        return out
    arms = (("erm", (0.0, 0.0)), ("no_ps", (best[0], 0.0)), ("no_psw", (0.0, best[1])))
    for key, _ in arms:
        out[key] = []
    for seed, doms, bands in each_seed():
        for key, (a, b) in arms:
            out[key].append(run(a, b, seed, doms, bands, key))
    return out


def median_grid(grid: dict) -> dict:
    return {k: statistics.median(v) for k, v in grid.items()}


def write_heatmap_csv(grid: dict, path, alphas=None, betas=None) -> None:
    """Rows alpha, columns beta, cells held-out accuracy."""
    alphas = alphas or sorted({a for a, _ in grid}, reverse=True)
    betas = betas or sorted({b for _, b in grid}, reverse=True)
    lines = ["alpha\\beta," + ",".join(f"{b:g}" for b in betas)]
    for a in alphas:
        lines.append(f"{a:g}," + ",".join(f"{grid[(a, b)]:.4f}" if (a, b) in grid else "" for b in betas))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def collect(run_root) -> list[dict]:
    """Every summary.json under ``run_root``."""
    root = Path(run_root)
    if not root.exists():
        raise FileNotFoundError(f"run directory not found: {root}")
    out = []
    for p in sorted(root.rglob("summary.json")):
        s = json.loads(p.read_text())
        s["dir"] = str(p.parent)
        out.append(s)
    return out


def row_label(s: dict) -> str:
    if s["method"] == FULL:
        return f"{FULL} (a={s['alpha']:g}, b={s['beta']:g})"
    return s["method"]


def accuracy_table(summaries: list[dict]) -> tuple[list[str], list[str], dict]:
    """Median held-out accuracy per (row, domain); rows ordered ERM, full, ablations."""
    cells: dict = {}
    for s in summaries:
        cells.setdefault((row_label(s), s["test_domain"]), []).append(s["accuracy"])
    table = {k: statistics.median(v) for k, v in cells.items()}
    order = {ERM: 0, NO_PS: 2, NO_PSW: 3}
    rows = sorted({r for r, _ in table}, key=lambda r: (order.get(r, 1), r))
    domains = sorted({d for _, d in table}, key=_domain_key)
    return rows, domains, table


def _domain_key(name: str):
    # "+90%" > "+80%" > "-90%" in the usual column order
    try:
        v = float(name.rstrip("%"))
        return (0, -v)
    except ValueError:
        return (1, name)


def format_table(rows, domains, table, sep: str = ",") -> str:
    head = ["method"] + domains + ["Avg"]
    lines = [sep.join(head)]
    for r in rows:
        vals = [table.get((r, d)) for d in domains]
        present = [v for v in vals if v is not None]
        avg = sum(present) / len(present) if len(present) == len(domains) else None
        cells = [f"{100 * v:.1f}" if v is not None else "-" for v in vals + [avg]]
        lines.append(sep.join([r] + cells))
    return "\n".join(lines) + "\n"
