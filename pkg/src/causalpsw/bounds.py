"""Finite-class generalization bound for the propensity-weighted risk, and a
Monte Carlo harness that checks its coverage on an enumerable population.

Trial sampler: unit i of a finite population is observed with probability
pi_i; the weighted observation is v_i = loss_i / pi_i when observed and 0
otherwise, so mean(v) is an unbiased estimate of the population risk and
each v_i lies in [0, Omega / pi_i].  Hoeffding plus a union bound over |H|
gives the slack term below.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .propensity import clip_columns, table_from_assignments, propensities

OMEGA_FORM = "omega"   # slack uses the uniform loss bound Omega
LOSS_FORM = "loss"     # slack keeps the per-sample losses (never looser)
TRIAL_FIELDS = ["trial", "hypothesis", "r_hat", "bound", "risk", "covered"]


class BoundError(ValueError):
    pass


class InvalidConfidence(BoundError):
    pass


class ZeroPropensity(BoundError):
    pass


class ScenarioInvalid(BoundError):
    pass


@dataclass
class BoundInput:
    empirical_risk: float
    omega: float
    n: int
    hypothesis_count: int
    confidence_delta: float
    propensities: np.ndarray

    def __post_init__(self):
        self.propensities = np.asarray(self.propensities, dtype=float).ravel()

    def validate(self) -> None:
        if not 0.0 < self.confidence_delta < 1.0:
            raise InvalidConfidence(f"delta={self.confidence_delta} must lie in (0, 1)")
        if not self.omega > 0:
            raise BoundError(f"omega={self.omega} must be positive")
        if self.hypothesis_count < 1:
            raise BoundError(f"hypothesis_count={self.hypothesis_count} must be at least 1")
        if self.n < 1 or len(self.propensities) != self.n:
            raise BoundError(f"n={self.n} but {len(self.propensities)} propensities given")
        pi = self.propensities
        if np.any(~np.isfinite(pi)) or np.any(pi <= 0):
            bad = int(np.flatnonzero(~(pi > 0))[0]) if np.any(~(pi > 0)) else -1
            raise ZeroPropensity(f"propensity[{bad}] is not positive")
        if np.any(pi > 1):
            raise BoundError("propensities must lie in (0, 1]")


def confidence_factor(hypothesis_count: int, delta: float) -> float:
    """sqrt(ln(2|H|/delta) / 2)."""
    return math.sqrt(math.log(2 * hypothesis_count / delta) / 2)


def psw_slack(b: BoundInput, form: str = OMEGA_FORM, losses=None) -> float:
    b.validate()
    pi = b.propensities
    if form == OMEGA_FORM:
        spread = b.omega * math.sqrt(float(np.sum(1.0 / pi ** 2)))
    elif form == LOSS_FORM:
        if losses is None:
            raise BoundError("the per-loss form needs the per-sample losses")
        losses = np.asarray(losses, dtype=float).ravel()
        if len(losses) != b.n:
            raise BoundError(f"{len(losses)} losses for n={b.n}")
        if np.any(losses < 0) or np.any(losses > b.omega * (1 + 1e-12)):
            raise BoundError("losses must lie in [0, omega]")
        spread = math.sqrt(float(np.sum((losses / pi) ** 2)))
    else:
        raise BoundError(f"unknown bound form {form!r}")
    return spread / b.n * confidence_factor(b.hypothesis_count, b.confidence_delta)


def psw_bound(b: BoundInput, form: str = OMEGA_FORM, losses=None) -> float:
    """Upper bound on the true risk holding w.p. at least 1 - delta, uniformly over H."""
    return float(b.empirical_risk) + psw_slack(b, form, losses)


# --- enumerable scenario -------------------------------------------------------

@dataclass
class Scenario:
    """A finite population of units with cells (c, s), labels and propensities.

    The hypothesis class is every table from the (c, s) cells to a label, and
    the loss is omega times the 0/1 error, so losses lie in [0, omega].
    """
    c: np.ndarray
    s: np.ndarray
    y: np.ndarray
    pi: np.ndarray
    omega: float = 1.0

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def cells(self) -> list[tuple[int, int]]:
        return sorted({(int(a), int(b)) for a, b in zip(self.c, self.s)})

    def hypotheses(self) -> np.ndarray:
        """(|H|, n) predictions, one row per cell-to-label table."""
        cells = self.cells
        idx = np.array([cells.index((int(a), int(b))) for a, b in zip(self.c, self.s)])
        tables = np.array(list(itertools.product((0, 1), repeat=len(cells))))
        return tables[:, idx]

    def losses(self) -> np.ndarray:
        """(|H|, n) per-unit losses of every hypothesis."""
        return self.omega * (self.hypotheses() != self.y[None, :]).astype(float)

    def risks(self) -> np.ndarray:
        """Exact population risk of every hypothesis."""
        return self.losses().mean(axis=1)


def bias_scenario(n: int = 1000, bias: float = 0.9, noise: float = 0.1, floor: float = 0.0,
                  omega: float = 1.0) -> Scenario:
    """Deterministic population: C agrees with S for a ``bias`` fraction, y follows C up to ``noise``.

    Counts are rounded exactly, so the propensity table is known in closed form.
    """
    if n < 4 or n % 2:
        raise ScenarioInvalid(f"n={n} must be even and at least 4")
    if not 0 < bias < 1 or not 0 <= noise < 0.5:
        raise ScenarioInvalid(f"bias={bias} must be in (0, 1) and noise={noise} in [0, 0.5)")
    half = n // 2
    c, s, y = [], [], []
    for sv in (0, 1):
        agree = int(round(bias * half))
        cs = np.array([sv] * agree + [1 - sv] * (half - agree))
        flips = np.zeros(half, dtype=int)
        # spread the flipped labels evenly over the block
        nf = int(round(noise * half))
        if nf:
            flips[np.linspace(0, half - 1, nf).round().astype(int)] = 1
        c.append(cs)
        s.append(np.full(half, sv))
        y.append(cs ^ flips)
    c, s, y = (np.concatenate(v) for v in (c, s, y))
    if len({(int(a), int(b)) for a, b in zip(c, s)}) != 4:
        raise ScenarioInvalid("every (c, s) cell must be occupied")
    table = table_from_assignments(c, s, 2, 2, floor=0.0)
    if floor > 0:
        table.probs = clip_columns(table.probs, floor)
    return Scenario(c, s, y, propensities(table, c, s), omega)


def sample_trial(sc: Scenario, losses: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """PSW empirical risk of every hypothesis under one Bernoulli observation draw."""
    observed = rng.random(sc.n) < sc.pi
    v = np.where(observed, losses / sc.pi, 0.0)
    return v.mean(axis=-1)


def unbiasedness_experiment(sc: Scenario, trials: int = 10_000, seed: int = 0, hypothesis: int = 0):
    """(mean R_hat, standard error, exact risk) for one hypothesis."""
    if trials < 2:
        raise ScenarioInvalid("need at least two trials")
    losses = sc.losses()[hypothesis]
    est = np.array([sample_trial(sc, losses, np.random.default_rng([seed, t])) for t in range(trials)])
    return float(est.mean()), float(est.std(ddof=1) / math.sqrt(trials)), float(losses.mean())


@dataclass
class CoverageResult:
    coverage: float
    rows: list[dict]
    mean_slack: float


def coverage_experiment(sc: Scenario, trials: int = 200, delta: float = 0.05, seed: int = 0,
                        form: str = OMEGA_FORM) -> CoverageResult:
    """Fraction of trials in which every hypothesis's true risk sits below its bound.

    Each row records the hypothesis with the largest risk minus bound.
    """
    if trials < 100:
        raise ScenarioInvalid(f"trials={trials}; at least 100 are required")
    losses = sc.losses()
    risks = losses.mean(axis=1)
    h = len(losses)
    slacks = np.array([psw_slack(BoundInput(0.0, sc.omega, sc.n, h, delta, sc.pi), form, losses[k])
                       for k in range(h)])
    rows, hits = [], 0
    for t in range(trials):
        r_hat = sample_trial(sc, losses, np.random.default_rng([seed, t]))
        bound = r_hat + slacks
        k = int(np.argmax(risks - bound))
        ok = bool(np.all(risks <= bound))
        hits += ok
        rows.append({"trial": t, "hypothesis": k, "r_hat": float(r_hat[k]), "bound": float(bound[k]),
                     "risk": float(risks[k]), "covered": int(ok)})
    return CoverageResult(hits / trials, rows, float(slacks.mean()))


def write_trials_csv(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRIAL_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


def read_propensity_csv(path, column: str = "pi") -> np.ndarray:
    """Propensities from a CSV with a ``pi`` column (the case-study dump) or a bare column of numbers."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"propensity file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise BoundError(f"{path}: empty file")
    head = [h.strip() for h in rows[0]]
    if column in head:
        j = head.index(column)
        vals = [r[j] for r in rows[1:] if r]
    else:
        vals = [r[0] for r in rows if r]
    try:
        return np.array([float(v) for v in vals])
    except ValueError as exc:
        raise BoundError(f"{path}: non-numeric propensity ({exc})") from None
