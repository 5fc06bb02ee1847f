"""Exact discrete structural causal models.

Exogenous noise is folded into conditional probability tables, so an SCM is
a DAG plus one CPT per node. Everything here is computed by exact
enumeration of the joint table; no sampling.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graph import CausalDag, GraphParseError, UnknownNode, build_dag, parse_dag

ROW_TOL = 1e-12
INDEP_TOL = 1e-9
DEFAULT_MAX_CELLS = 10**7

FIXTURE_DIR = FsPath(__file__).parent / "fixtures"


class ScmError(ValueError):
    pass


class DomainTooLarge(ScmError):
    pass


class ValueOutOfDomain(ScmError):
    pass


class ZeroConditioningEvent(ScmError):
    pass


class PositivityViolation(ScmError):
    pass


class DescendantInT(ScmError):
    pass


@dataclass(frozen=True)
class Intervention:
    target: str
    value: object


@dataclass
class DiscreteScm:
    """DAG, finite domains and CPTs.

    ``cpts[v]`` has one axis per parent (in ``graph.parents(v)`` order) and a
    last axis over ``domains[v]``. Roots carry a 1-d prior.
    """

    graph: CausalDag
    domains: dict[str, tuple]
    cpts: dict[str, np.ndarray]
    context: dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.cpts = {k: np.asarray(v, dtype=float) for k, v in self.cpts.items()}
        self.validate()

    def validate(self) -> None:
        g = self.graph
        missing = set(g.nodes) - set(self.cpts)
        if missing:
            raise ScmError(f"no mechanism for {sorted(missing)}")
        extra = set(self.cpts) - set(g.nodes)
        if extra:
            raise UnknownNode(sorted(extra)[0])
        for v in g.nodes:
            dom = self.domains.get(v)
            if not dom:
                raise ScmError(f"empty domain for {v}")
            shape = tuple(len(self.domains[p]) for p in g.parents(v)) + (len(dom),)
            t = self.cpts[v]
            if t.shape != shape:
                raise ScmError(f"CPT for {v} has shape {t.shape}, parents imply {shape}")
            if np.any(t < 0) or not np.all(np.isfinite(t)):
                raise ScmError(f"CPT for {v} has negative or non-finite entries")
            if np.max(np.abs(t.sum(axis=-1) - 1.0)) > ROW_TOL:
                raise ScmError(f"CPT rows for {v} do not sum to 1")
        for v, val in self.context.items():
            if v not in g:
                raise UnknownNode(v)
            if val not in self.domains[v]:
                raise ValueOutOfDomain(f"context {v}={val!r}")

    def value_index(self, var: str, value) -> int:
        if var not in self.domains:
            raise UnknownNode(var)
        try:
            return self.domains[var].index(value)
        except ValueError:
            raise ValueOutOfDomain(f"{value!r} not in domain of {var}") from None


@dataclass(frozen=True)
class JointTable:
    variables: tuple[str, ...]
    domains: tuple[tuple, ...]
    probs: np.ndarray

    def __post_init__(self):
        if self.probs.shape != tuple(len(d) for d in self.domains):
            raise ScmError("table shape does not match domains")

    @property
    def total(self) -> float:
        return float(self.probs.sum())

    def axis(self, var: str) -> int:
        try:
            return self.variables.index(var)
        except ValueError:
            raise UnknownNode(var) from None

    def domain(self, var: str) -> tuple:
        return self.domains[self.axis(var)]

    def _index(self, var: str, value) -> int:
        dom = self.domain(var)
        try:
            return dom.index(value)
        except ValueError:
            raise ValueOutOfDomain(f"{value!r} not in domain of {var}") from None

    def marginal(self, keep: Iterable[str]) -> "JointTable":
        keep = list(keep)
        axes = [self.axis(v) for v in keep]
        drop = tuple(i for i in range(len(self.variables)) if i not in axes)
        p = self.probs.sum(axis=drop)
        # remaining axes are in original order; permute to requested order
        remaining = [i for i in range(len(self.variables)) if i in axes]
        perm = [remaining.index(a) for a in axes]
        return JointTable(tuple(keep), tuple(self.domains[a] for a in axes),
                          np.transpose(p, perm) if perm else p)

    def mass(self, assignment: Mapping[str, object]) -> float:
        idx: list = [slice(None)] * len(self.variables)
        for var, val in assignment.items():
            idx[self.axis(var)] = self._index(var, val)
        return float(self.probs[tuple(idx)].sum())

    def condition(self, assignment: Mapping[str, object]) -> "JointTable":
        """Renormalised table restricted to ``assignment`` (variables are kept)."""
        if not assignment:
            return self
        mask = np.zeros_like(self.probs, dtype=bool)
        idx: list = [slice(None)] * len(self.variables)
        for var, val in assignment.items():
            idx[self.axis(var)] = self._index(var, val)
        mask[tuple(idx)] = True
        z = float(self.probs[mask].sum())
        if z <= 0:
            raise ZeroConditioningEvent(f"P({_fmt(assignment)}) = 0")
        return JointTable(self.variables, self.domains, np.where(mask, self.probs, 0.0) / z)


def _fmt(assignment: Mapping[str, object]) -> str:
    return ", ".join(f"{k}={v}" for k, v in assignment.items()) or "{}"


def _broadcast_cpt(scm: DiscreteScm, var: str, order: Sequence[str]) -> np.ndarray:
    parents = scm.graph.parents(var)
    own = list(parents) + [var]
    pos = [order.index(v) for v in own]
    perm = [int(k) for k in np.argsort(pos)]
    t = np.transpose(scm.cpts[var], perm)
    shape = [1] * len(order)
    for ax, k in enumerate(perm):
        shape[pos[k]] = t.shape[ax]
    return t.reshape(shape)


def joint(scm: DiscreteScm, max_cells: int = DEFAULT_MAX_CELLS) -> JointTable:
    """Exact joint distribution as the product of all CPTs."""
    order = scm.graph.topological_order()
    shape = tuple(len(scm.domains[v]) for v in order)
    cells = int(np.prod(shape, dtype=np.int64))
    if cells > max_cells:
        raise DomainTooLarge(f"joint table would have {cells} cells (cap {max_cells})")
    p = np.ones(shape)
    for v in order:
        p = p * _broadcast_cpt(scm, v, order)
    return JointTable(tuple(order), tuple(scm.domains[v] for v in order), p)


def point_mass(size: int, index: int) -> np.ndarray:
    t = np.zeros(size)
    t[index] = 1.0
    return t


def intervene(scm: DiscreteScm, iv: Intervention | Mapping[str, object]) -> DiscreteScm:
    """Mutilate: drop arrows into the target, replace its mechanism by a point mass."""
    ivs = [iv] if isinstance(iv, Intervention) else [Intervention(k, v) for k, v in iv.items()]
    g = scm.graph
    cpts = dict(scm.cpts)
    for one in ivs:
        if one.target not in g:
            raise UnknownNode(one.target)
        k = scm.value_index(one.target, one.value)
        g = g.without_incoming(one.target)
        cpts[one.target] = point_mass(len(scm.domains[one.target]), k)
    return DiscreteScm(g, dict(scm.domains), cpts, dict(scm.context))


def query(jt: JointTable, outcome: Mapping[str, object],
          given: Mapping[str, object] | None = None) -> float:
    """P(outcome | given) by summation over the table."""
    given = dict(given or {})
    for var, val in outcome.items():
        if var in given and given[var] != val:
            return 0.0
    denom = jt.mass(given)
    if denom <= 0:
        raise ZeroConditioningEvent(f"P({_fmt(given)}) = 0")
    return jt.mass({**given, **outcome}) / denom


def interventional(scm: DiscreteScm, treatment: Mapping[str, object],
                   outcome: Mapping[str, object],
                   given: Mapping[str, object] | None = None) -> float:
    """P(outcome | do(treatment), given) from the mutilated model."""
    return query(joint(intervene(scm, treatment)), outcome, given)


def _configs(jt: JointTable, names: Sequence[str]):
    doms = [jt.domain(v) for v in names]
    for vals in itertools.product(*doms):
        yield dict(zip(names, vals))


def adjustment_estimate(jt: JointTable, treatment: Mapping[str, object],
                        outcome: Mapping[str, object], z: Iterable[str]) -> float:
    """Backdoor adjustment sum_z P(outcome | treatment, z) P(z)."""
    z = sorted(set(z))
    if not z:
        return query(jt, outcome, treatment)
    pz_table = jt.marginal(z)
    total = 0.0
    for zval in _configs(jt, z):
        pz = pz_table.mass(zval)
        if pz <= 0:
            continue
        if jt.mass({**treatment, **zval}) <= 0:
            raise PositivityViolation(f"P({_fmt(treatment)}, {_fmt(zval)}) = 0 while P(z) > 0")
        total += query(jt, outcome, {**treatment, **zval}) * pz
    return total


def independence_gap(jt: JointTable, a: Iterable[str], b: Iterable[str],
                     given: Iterable[str] = ()) -> float:
    """max |P(a,b|c) - P(a|c)P(b|c)| over all cells with P(c) > 0."""
    a, b, c = list(a), list(b), list(given)
    t = jt.marginal(a + b + c).probs
    na, nb = len(a), len(b)
    # reshape to (A, B, C) with flattened multi-variable axes
    sa = int(np.prod(t.shape[:na], dtype=np.int64))
    sb = int(np.prod(t.shape[na:na + nb], dtype=np.int64))
    t = t.reshape(sa, sb, -1)
    pc = t.sum(axis=(0, 1))
    ok = pc > 0
    if not np.any(ok):
        return 0.0
    t = t[:, :, ok] / pc[ok]
    pa = t.sum(axis=1, keepdims=True)
    pb = t.sum(axis=0, keepdims=True)
    return float(np.max(np.abs(t - pa * pb)))


def mutual_information(jt: JointTable, a: Iterable[str], b: Iterable[str],
                       given: Iterable[str] = ()) -> float:
    """Conditional mutual information I(a; b | given) in nats."""
    a, b, c = list(a), list(b), list(given)
    t = jt.marginal(a + b + c).probs
    na, nb = len(a), len(b)
    sa = int(np.prod(t.shape[:na], dtype=np.int64))
    sb = int(np.prod(t.shape[na:na + nb], dtype=np.int64))
    t = t.reshape(sa, sb, -1)
    pc = t.sum(axis=(0, 1), keepdims=True)
    pac = t.sum(axis=1, keepdims=True)
    pbc = t.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = t * np.log(t * pc / (pac * pbc))
    return float(np.nansum(np.where(t > 0, term, 0.0)))


def independent(jt: JointTable, a, b, given=(), tol: float = INDEP_TOL) -> bool:
    return independence_gap(jt, a, b, given) <= tol


def _with_context(jt: JointTable, context: Mapping[str, object] | None) -> JointTable:
    return jt.condition(context) if context else jt


def check_nonconfounding_statistical(jt: JointTable, g: CausalDag, x: str, y: str,
                                     t1: Iterable[str], t2: Iterable[str],
                                     context: Mapping[str, object] | None = None,
                                     tol: float = INDEP_TOL) -> bool:
    """Two-condition statistical definition of non-confounding.

    (1) P(x) = P(x | t1) and (2) P(y | t1, x) = P(y | t1, t2, x), for every
    value combination with positive mass. ``context`` fixes variables that
    are held conditioned throughout (e.g. a learned embedding).
    """
    t1, t2 = sorted(set(t1)), sorted(set(t2))
    for n in (x, y, *t1, *t2):
        if n not in g:
            raise UnknownNode(n)
    if set(t1) & set(t2):
        raise ScmError("T1 and T2 must be disjoint")
    if {x, y} & (set(t1) | set(t2)):
        raise ScmError("T1 and T2 must not contain x or y")
    bad = (set(t1) | set(t2)) & g.descendants(x)
    if bad:
        raise DescendantInT(f"{sorted(bad)} are descendants of {x}")
    jt = _with_context(jt, context)
    if t1 and not independent(jt, [x], t1, (), tol):
        return False
    if t2 and not independent(jt, [y], t2, t1 + [x], tol):
        return False
    return True


def nonconfounding_partitions(jt: JointTable, g: CausalDag, x: str, y: str,
                              context: Mapping[str, object] | None = None,
                              tol: float = INDEP_TOL) -> list[tuple[tuple[str, ...], tuple[str, ...]]]:
    """All (T1, T2) splits of the non-descendants of x that pass the statistical check."""
    held = set(context or {})
    pool = sorted(set(g.nodes) - {x, y} - g.descendants(x) - held)
    passing = []
    for r in range(len(pool) + 1):
        for t1 in itertools.combinations(pool, r):
            t2 = tuple(v for v in pool if v not in t1)
            if check_nonconfounding_statistical(jt, g, x, y, t1, t2, context, tol):
                passing.append((t1, t2))
    return passing


def check_nonconfounding_causal(scm: DiscreteScm, x: str, y: str,
                                tol: float = INDEP_TOL) -> bool:
    """P(y | do(x)) == P(y | x) for every value pair with P(x) > 0."""
    jt = joint(scm)
    for xv in scm.domains[x]:
        if jt.mass({x: xv}) <= 0:
            continue
        do_jt = joint(intervene(scm, Intervention(x, xv)))
        for yv in scm.domains[y]:
            if abs(query(do_jt, {y: yv}) - query(jt, {y: yv}, {x: xv})) > tol:
                return False
    return True


def has_open_backdoor(g: CausalDag, x: str, y: str, given: Iterable[str] = ()) -> bool:
    from .graph import backdoor_paths, is_blocked

    return any(not is_blocked(g, p, given) for p in backdoor_paths(g, x, y))


@dataclass(frozen=True)
class SpuriousWitness:
    z1: str
    s1: tuple[str, ...]
    z2: str
    s2: tuple[str, ...]


def is_spurious_witness(jt: JointTable, s: str, y: str, w: SpuriousWitness,
                        tol: float = INDEP_TOL) -> bool:
    return (not independent(jt, [w.z1], [s], w.s1, tol)
            and independent(jt, [w.z1], [y], w.s1, tol)
            and not independent(jt, [w.z2], [y], w.s2, tol)
            and independent(jt, [w.z2], [s], w.s2, tol))


def spurious_correlation_witness(jt: JointTable, g: CausalDag | None, s: str, y: str,
                                 max_cond: int = 2,
                                 tol: float = INDEP_TOL) -> SpuriousWitness | None:
    """Search single variables Z and conditioning sets for the two-clause witness.

    Candidates are drawn from the variables of ``jt`` (the graph, if given,
    only restricts the search to its nodes). Returns the first witness in
    lexicographic order, or None.
    """
    if s == y:
        raise ScmError("s and y must differ")
    names = [v for v in jt.variables if v not in (s, y) and (g is None or v in g)]
    first, second = [], []
    for z in sorted(names):
        rest = sorted(v for v in names if v != z)
        for r in range(min(max_cond, len(rest)) + 1):
            for cond in itertools.combinations(rest, r):
                dep_s = not independent(jt, [z], [s], cond, tol)
                dep_y = not independent(jt, [z], [y], cond, tol)
                if dep_s and not dep_y:
                    first.append((z, cond))
                if dep_y and not dep_s:
                    second.append((z, cond))
    if not first or not second:
        return None
    (z1, s1), (z2, s2) = first[0], second[0]
    return SpuriousWitness(z1, tuple(s1), z2, tuple(s2))


# --- text format -----------------------------------------------------------

def _parse_value(tok: str):
    try:
        return int(tok)
    except ValueError:
        return tok


def parse_scm(text: str) -> DiscreteScm:
    """Parse an SCM file: DAG lines, plus

    ``domain V a b c``               (default domain is {0, 1})
    ``cpt V : p0 p1``                (root prior)
    ``cpt V | P Q : row ; row ...``  (rows in itertools.product order of parent values)
    ``context V = value``            (variable held conditioned)
    """
    g = parse_dag(text)
    domains: dict[str, tuple] = {}
    raw_cpts: dict[str, tuple[int, list[str], str]] = {}
    context: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head = line.split()[0]
        if head == "domain":
            parts = line.split()
            if len(parts) < 3:
                raise GraphParseError(lineno, raw, "expected 'domain NAME v1 v2 ...'")
            domains[parts[1]] = tuple(_parse_value(t) for t in parts[2:])
        elif head == "context":
            body = line[len("context"):].strip()
            if "=" not in body:
                raise GraphParseError(lineno, raw, "expected 'context NAME = value'")
            name, val = (s.strip() for s in body.split("=", 1))
            context[name] = _parse_value(val)
        elif head == "cpt":
            body = line[len("cpt"):]
            if ":" not in body:
                raise GraphParseError(lineno, raw, "expected ':' before probabilities")
            lhs, rhs = body.split(":", 1)
            if "|" in lhs:
                name, par = lhs.split("|", 1)
                parents = par.split()
            else:
                name, parents = lhs, []
            raw_cpts[name.strip()] = (lineno, parents, rhs)
    for v in g.nodes:
        domains.setdefault(v, (0, 1))
    cpts: dict[str, np.ndarray] = {}
    for name, (lineno, parents, rhs) in raw_cpts.items():
        if name not in g:
            raise GraphParseError(lineno, f"cpt {name}", "unknown variable")
        gp = list(g.parents(name))
        if sorted(parents) != gp:
            raise GraphParseError(lineno, f"cpt {name}", f"parents {parents} do not match graph parents {gp}")
        try:
            rows = [[float(t) for t in r.split()] for r in rhs.split(";") if r.strip()]
        except ValueError:
            raise GraphParseError(lineno, f"cpt {name}", "non-numeric probability") from None
        shape = tuple(len(domains[p]) for p in parents) + (len(domains[name]),)
        arr = np.array(rows, dtype=float)
        if arr.size != int(np.prod(shape)):
            raise GraphParseError(lineno, f"cpt {name}", f"expected {int(np.prod(shape[:-1]))} rows of {shape[-1]}")
        arr = arr.reshape(shape)
        perm = [parents.index(p) for p in gp] + [len(parents)]
        cpts[name] = np.transpose(arr, perm)
    return DiscreteScm(g, domains, cpts, context)


def format_scm(scm: DiscreteScm) -> str:
    g = scm.graph
    lines = [f"node {n}" for n in g.nodes]
    lines += [f"{p} -> {c}" for p, c in sorted(g.edges)]
    for v in g.nodes:
        if scm.domains[v] != (0, 1):
            lines.append("domain " + v + " " + " ".join(str(x) for x in scm.domains[v]))
    for v in g.topological_order():
        parents = g.parents(v)
        t = scm.cpts[v].reshape(-1, len(scm.domains[v]))
        rows = " ; ".join(" ".join(repr(float(p)) for p in row) for row in t)
        lhs = f"cpt {v} | {' '.join(parents)}" if parents else f"cpt {v}"
        lines.append(f"{lhs} : {rows}")
    for v, val in scm.context.items():
        lines.append(f"context {v} = {val}")
    return "\n".join(lines) + "\n"


def load_scm(path) -> DiscreteScm:
    return parse_scm(FsPath(path).read_text())


def load_fixture(name: str) -> DiscreteScm:
    return load_scm(FIXTURE_DIR / f"{name}.scm")


def random_scm(g: CausalDag, rng: np.random.Generator, card: int = 2,
               low: float = 0.05) -> DiscreteScm:
    """Random strictly positive CPTs on ``g`` (every cell >= ``low``/card)."""
    domains = {v: tuple(range(card)) for v in g.nodes}
    cpts = {}
    for v in g.nodes:
        shape = (card,) * len(g.parents(v)) + (card,)
        t = rng.dirichlet(np.ones(card), size=shape[:-1]) if shape[:-1] else rng.dirichlet(np.ones(card))
        t = (1 - low) * t + low / card
        cpts[v] = t / t.sum(axis=-1, keepdims=True)
    return DiscreteScm(g, domains, cpts)


def build_scm(nodes: Sequence[str], edges: Sequence[tuple[str, str]],
              cpts: Mapping[str, object], domains: Mapping[str, tuple] | None = None,
              context: Mapping[str, object] | None = None) -> DiscreteScm:
    """Build from plain lists; CPT rows may be given flat in parent-product order."""
    g = build_dag(nodes, edges)
    doms = {v: tuple((domains or {}).get(v, (0, 1))) for v in g.nodes}
    arrays = {}
    for k, v in cpts.items():
        shape = tuple(len(doms[p]) for p in g.parents(k)) + (len(doms[k]),)
        a = np.asarray(v, float)
        arrays[k] = a.reshape(shape) if a.size == int(np.prod(shape)) else a
    return DiscreteScm(g, doms, arrays, dict(context or {}))
