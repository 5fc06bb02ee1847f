"""Small MLP trained with the combined objective L + alpha * L_psw + beta * L_ps.

The encoder g is a stack of affine + tanh layers over the flattened image and
the head is one affine map to class logits.  Gradients are written out by
hand; every loss term is checked against finite differences in the tests.

Logits pass through a soft clamp z -> B tanh(z / B) with B = (omega - ln m)/2,
which keeps every per-sample cross-entropy inside [0, omega].
"""

from __future__ import annotations

import csv
import math
import struct
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import propensity as prop
from . import spectral

CHECKPOINT_MAGIC = b"CPSWCKPT"
CHECKPOINT_VERSION = 1
METRIC_FIELDS = ["epoch", "domain", "split", "accuracy", "base", "psw", "ps", "total"]


class LearnerError(ValueError):
    pass


class ShapeMismatch(LearnerError):
    pass


class EmptyBatch(LearnerError):
    pass


class MissingWeights(LearnerError):
    pass


class MissingTwins(LearnerError):
    pass


class ConfigInvalid(LearnerError):
    pass


class NonFiniteLoss(ArithmeticError):
    pass


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per (seed, purpose) so ablations share data and init."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


# --- parameters -------------------------------------------------------------

@dataclass
class ModelParams:
    weights: list[np.ndarray]     # weights[k] has shape (out, in)
    biases: list[np.ndarray]
    omega: float = 10.0

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    @property
    def sizes(self) -> list[int]:
        return [self.n_inputs] + [w.shape[0] for w in self.weights]

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.omega)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def set_flat(self, v: np.ndarray) -> None:
        pos = 0
        for arrs in zip(self.weights, self.biases):
            for a in arrs:
                a[...] = v[pos:pos + a.size].reshape(a.shape)
                pos += a.size

    @property
    def clamp(self) -> float:
        return (self.omega - math.log(self.n_classes)) / 2


def init_params(n_inputs: int, hidden=(64,), n_classes: int = 2, rng=None, omega: float = 10.0) -> ModelParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    sizes = [n_inputs, *hidden, n_classes]
    ws, bs = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        ws.append(rng.normal(0, 1 / math.sqrt(a), (b, a)))
        bs.append(np.zeros(b))
    if omega <= math.log(n_classes):
        raise ConfigInvalid(f"omega={omega} must exceed ln(m)={math.log(n_classes):.4f}")
    return ModelParams(ws, bs, omega)


# --- forward / losses -------------------------------------------------------

def _flatten(p: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    x = x.reshape(len(x), -1)
    if x.shape[1] != p.n_inputs:
        raise ShapeMismatch(f"input has {x.shape[1]} features, model expects {p.n_inputs}")
    return x


def _forward_cache(p: ModelParams, x: np.ndarray):
    acts = [_flatten(p, x)]
    for w, b in zip(p.weights[:-1], p.biases[:-1]):
        acts.append(np.tanh(acts[-1] @ w.T + b))
    raw = acts[-1] @ p.weights[-1].T + p.biases[-1]
    B = p.clamp
    return acts, raw, B * np.tanh(raw / B)


def encode(p: ModelParams, x: np.ndarray) -> np.ndarray:
    """Encoder output g(x): the last hidden layer."""
    h = _flatten(p, x)
    for w, b in zip(p.weights[:-1], p.biases[:-1]):
        h = np.tanh(h @ w.T + b)
    return h


def forward(p: ModelParams, x: np.ndarray) -> np.ndarray:
    """Clamped logits, shape (N, m)."""
    return _forward_cache(p, x)[2]


def predict(p: ModelParams, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    return np.concatenate([forward(p, x[i:i + chunk]).argmax(1) for i in range(0, len(x), chunk)])


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy via log-sum-exp."""
    top = logits.max(1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(logits - top).sum(1))
    return lse - logits[np.arange(len(y)), y]


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    weights: np.ndarray | None = None
    twins: np.ndarray | None = None
    domain: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ShapeMismatch("images and labels differ in length")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if len(self.weights) != len(self.labels):
                raise ShapeMismatch("weights and labels differ in length")
            if np.any(self.weights <= 0):
                raise LearnerError("PSW weights must be positive")
        if self.twins is not None and len(self.twins) != len(self.labels):
            raise ShapeMismatch("twins and originals differ in length")


@dataclass
class LossReport:
    base: float
    psw: float
    ps: float
    total: float
    alpha: float
    beta: float


def _check_batch(p: ModelParams, batch: Batch) -> None:
    if len(batch.labels) == 0:
        raise EmptyBatch("batch has no samples")
    if batch.labels.min() < 0 or batch.labels.max() >= p.n_classes:
        raise LearnerError(f"labels must lie in [0, {p.n_classes})")


def loss_erm(p: ModelParams, batch: Batch) -> float:
    _check_batch(p, batch)
    return float(cross_entropy(forward(p, batch.images), batch.labels).mean())


def loss_psw(p: ModelParams, batch: Batch) -> float:
    _check_batch(p, batch)
    if batch.weights is None:
        raise MissingWeights("PSW loss needs per-sample weights")
    return float((batch.weights * cross_entropy(forward(p, batch.images), batch.labels)).mean())


def loss_ps(p: ModelParams, batch: Batch) -> float:
    """Mean cross-entropy over originals and their simulated twins, 1/(2N)."""
    _check_batch(p, batch)
    if batch.twins is None or len(batch.twins) == 0:
        raise MissingTwins("pairing loss needs simulated twins")
    ce = cross_entropy(forward(p, batch.images), batch.labels)
    ce_t = cross_entropy(forward(p, batch.twins), batch.labels)
    return float((ce.sum() + ce_t.sum()) / (2 * len(ce)))


def _coefficients(batch: Batch, alpha: float, beta: float, normalize: bool = False):
    """Per-sample loss coefficients for originals and twins in the composite."""
    n = len(batch.labels)
    orig = np.full(n, 1.0 / n)
    twin = None
    if alpha:
        if batch.weights is None:
            raise MissingWeights("alpha > 0 needs PSW weights")
        w = batch.weights / batch.weights.mean() if normalize else batch.weights
        orig = orig + alpha * w / n
    if beta:
        if batch.twins is None or len(batch.twins) == 0:
            raise MissingTwins("beta > 0 needs simulated twins")
        orig = orig + beta / (2 * n)
        twin = np.full(n, beta / (2 * n))
    return orig, twin


def total_loss(p: ModelParams, batch: Batch, alpha: float = 0.0, beta: float = 0.0,
               normalize: bool = False) -> LossReport:
    if alpha < 0 or beta < 0:
        raise ConfigInvalid("alpha and beta must be non-negative")
    _check_batch(p, batch)
    ce = cross_entropy(forward(p, batch.images), batch.labels)
    base = float(ce.mean())
    psw = ps = float("nan")
    total = base
    if batch.weights is not None:
        w = batch.weights / batch.weights.mean() if normalize else batch.weights
        psw = float((w * ce).mean())
        if alpha:
            total += alpha * psw
    elif alpha:
        raise MissingWeights("alpha > 0 needs PSW weights")
    if batch.twins is not None and len(batch.twins):
        ce_t = cross_entropy(forward(p, batch.twins), batch.labels)
        ps = float((ce.sum() + ce_t.sum()) / (2 * len(ce)))
        if beta:
            total += beta * ps
    elif beta:
        raise MissingTwins("beta > 0 needs simulated twins")
    return LossReport(base, psw, ps, total, alpha, beta)


def _backprop(p: ModelParams, x, y, coef, grads_w, grads_b, head_coef=None):
    """Accumulate d(sum_i coef_i * CE_i)/dparams into the gradient lists.

    ``head_coef`` (if given) replaces ``coef`` for the head parameters only,
    which is how a loss term is kept away from the head.
    """
    acts, raw, z = _forward_cache(p, x)
    e = np.exp(z - z.max(1, keepdims=True))
    soft = e / e.sum(1, keepdims=True)
    soft[np.arange(len(y)), y] -= 1.0
    B = p.clamp
    dz = soft * (1 - (z / B) ** 2)          # dCE/draw
    d_out = dz * coef[:, None]
    d_head = d_out if head_coef is None else dz * head_coef[:, None]
    grads_w[-1] += d_head.T @ acts[-1]
    grads_b[-1] += d_head.sum(0)
    d = d_out @ p.weights[-1]
    for k in range(len(p.weights) - 2, -1, -1):
        d = d * (1 - acts[k + 1] ** 2)
        grads_w[k] += d.T @ acts[k]
        grads_b[k] += d.sum(0)
        if k:
            d = d @ p.weights[k]
    return cross_entropy(z, y)


def loss_and_grad(p: ModelParams, batch: Batch, alpha: float = 0.0, beta: float = 0.0,
                  normalize: bool = False, freeze_head: bool = False):
    """Loss report and gradient of the composite, from one forward pass per input."""
    if alpha < 0 or beta < 0:
        raise ConfigInvalid("alpha and beta must be non-negative")
    _check_batch(p, batch)
    orig, twin = _coefficients(batch, alpha, beta, normalize)
    gw = [np.zeros_like(w) for w in p.weights]
    gb = [np.zeros_like(b) for b in p.biases]
    n = len(batch.labels)
    head = None
    if freeze_head and twin is not None:
        head = orig - beta / (2 * n)
    ce = _backprop(p, batch.images, batch.labels, orig, gw, gb, head)
    base = float(ce.mean())
    psw = ps = float("nan")
    if batch.weights is not None:
        w = batch.weights / batch.weights.mean() if normalize else batch.weights
        psw = float((w * ce).mean())
    if twin is not None:
        ce_t = _backprop(p, batch.twins, batch.labels, twin, gw, gb,
                         np.zeros_like(twin) if freeze_head else None)
        ps = float((ce.sum() + ce_t.sum()) / (2 * n))
    total = base + (alpha * psw if alpha else 0.0) + (beta * ps if beta else 0.0)
    return LossReport(base, psw, ps, total, alpha, beta), gw, gb


def backward(p: ModelParams, batch: Batch, alpha: float = 0.0, beta: float = 0.0,
             normalize: bool = False, freeze_head: bool = False):
    """Gradient of the composite loss as (weight grads, bias grads)."""
    _, gw, gb = loss_and_grad(p, batch, alpha, beta, normalize, freeze_head)
    return gw, gb


def flat_grad(gw, gb) -> np.ndarray:
    return np.concatenate([a.ravel() for pair in zip(gw, gb) for a in pair])


# --- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    hidden: tuple = (64,)
    lr: float = 0.02
    batch_size: int = 128
    epochs: int = 20
    alpha: float = 0.0
    beta: float = 0.0
    filter_size: float | None = None     # default min(H, W) // 4
    mask_mode: str = "cross"
    delta: float = 1.0
    n_spurious: int = 2
    floor: float = prop.DEFAULT_FLOOR
    refresh: int = 1
    self_normalize: bool = False
    freeze_head: bool = False
    pooled: bool = False
    omega: float = 10.0
    seed: int = 0
    kmeans_iters: int = 50

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigInvalid("alpha and beta must be non-negative")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.refresh < 1:
            raise ConfigInvalid("lr, batch_size, epochs and refresh must be positive")
        if not 0 <= self.delta <= 1:
            raise ConfigInvalid(f"delta={self.delta} outside [0, 1]")
        if not 0 <= self.floor < 1:
            raise ConfigInvalid(f"floor={self.floor} outside [0, 1)")
        if self.mask_mode not in spectral.MASK_MODES:
            raise ConfigInvalid(f"mask_mode={self.mask_mode!r} not in {spectral.MASK_MODES}")
        if self.n_spurious < 1 or any(int(h) < 1 for h in self.hidden) or not self.hidden:
            raise ConfigInvalid("n_spurious and hidden sizes must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict]
    propensity: dict = field(default_factory=dict)   # last epoch: pi, cluster ids per training sample


def _pool(domains):
    x = np.concatenate([d.images for d in domains]).astype(np.float64)
    y = np.concatenate([np.asarray(d.labels, dtype=np.int64) for d in domains])
    tag = np.concatenate([[d.name] * len(d) for d in domains])
    return x, y, tag


def _bands(x: np.ndarray, size: float, mode: str, chunk: int = 2048):
    """Low image, high image and the lambda-free part of the mix for every sample."""
    low = np.empty(x.shape)
    high = np.empty(x.shape)
    for i in range(0, len(x), chunk):
        low[i:i + chunk], high[i:i + chunk] = spectral.band_images(x[i:i + chunk], size, mode)
    return low, high, low + high


def precompute_bands(cfg: "TrainConfig", train_domains):
    """Band images for the pooled training set, reusable across runs on the same data."""
    x, _, _ = _pool(train_domains)
    return _bands(x, _filter_size(cfg, x.shape[1:]), cfg.mask_mode)


def _filter_size(cfg, shape):
    return cfg.filter_size if cfg.filter_size is not None else spectral.default_filter_size(*shape[-2:])


def make_twins(keep, low, partner, lam) -> np.ndarray:
    """Simulated samples from precomputed bands.

    By linearity of the inverse transform, F_h(xi) + (1 - lam) F_l(xi) + lam F_l(xj)
    maps back to keep_i + lam * (low_j - low_i).
    """
    lam = np.asarray(lam, dtype=np.float32).reshape((-1,) + (1,) * (keep.ndim - 1))
    return keep + lam * (low[partner] - low)


def _cluster_propensities(p, cfg, low, high, tag, seed):
    c_feat = encode(p, high)
    s_feat = encode(p, low)
    c_cl = prop.kmeans(c_feat, p.n_classes, seed=seed, max_iters=cfg.kmeans_iters)
    s_cl = prop.kmeans(s_feat, cfg.n_spurious, seed=seed + 1, max_iters=cfg.kmeans_iters)
    _, pi = prop.build_domain_tables(c_cl.assignments, s_cl.assignments, tag,
                                     p.n_classes, cfg.n_spurious, cfg.floor, cfg.pooled)
    return pi, c_cl.assignments, s_cl.assignments


def evaluate(p: ModelParams, domain) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) on one domain."""
    x = np.asarray(domain.images)
    y = np.asarray(domain.labels, dtype=np.int64)
    ce, hits = 0.0, 0
    for i in range(0, len(x), 4096):
        z = forward(p, x[i:i + 4096])
        ce += cross_entropy(z, y[i:i + 4096]).sum()
        hits += int((z.argmax(1) == y[i:i + 4096]).sum())
    return hits / len(y), ce / len(y)


def train(cfg: TrainConfig, train_domains, test_domains=(), log=None, bands=None) -> TrainResult:
    """Mini-batch gradient descent on the composite objective.

    Per epoch: encode the high/low bands, refresh clusters and propensities
    (every ``cfg.refresh`` epochs), draw simulated twins, then step through
    shuffled mini-batches.  Deterministic for a given config.  ``bands`` may
    carry the output of :func:`precompute_bands` for the same domains and config.
    """
    cfg.validate()
    if not train_domains:
        raise ConfigInvalid("at least one training domain is required")
    x, y, tag = _pool(train_domains)
    n, shape = len(x), x.shape[1:]
    m = int(max(y.max(), max((np.max(d.labels) for d in test_domains), default=0))) + 1
    m = max(m, 2)
    p = init_params(int(np.prod(shape)), tuple(cfg.hidden), m, substream(cfg.seed, "init"), cfg.omega)
    shuffle_rng = substream(cfg.seed, "shuffle")
    lam_rng = substream(cfg.seed, "lambda")
    pair_rng = substream(cfg.seed, "pairing")

    use_psw = cfg.alpha > 0
    use_ps = cfg.beta > 0
    low = high = keep = None
    if use_psw or use_ps:
        if bands is None:
            bands = _bands(x, _filter_size(cfg, shape), cfg.mask_mode)
        low, high, keep = bands

    pi = np.ones(n)
    c_ids = s_ids = None
    history = []
    for epoch in range(1, cfg.epochs + 1):
        if use_psw and (epoch - 1) % cfg.refresh == 0:
            pi, c_ids, s_ids = _cluster_propensities(p, cfg, low, high, tag, cfg.seed + epoch)
        twins = None
        if use_ps:
            partner = pair_rng.integers(n, size=n)
            lam = spectral.sample_lambda(cfg.delta, lam_rng, size=n)
            twins = make_twins(keep, low, partner, lam)
        weights = prop.psw_weights(pi)
        order = shuffle_rng.permutation(n)
        sums = np.zeros(4)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = Batch(x[idx], y[idx], weights[idx], twins[idx] if twins is not None else None)
            rep, gw, gb = loss_and_grad(p, batch, cfg.alpha, cfg.beta, cfg.self_normalize, cfg.freeze_head)
            if not all(math.isfinite(v) for v in (rep.base, rep.total)):
                raise NonFiniteLoss(f"epoch {epoch}, step {start // cfg.batch_size}: {rep}")
            for k in range(len(p.weights)):
                p.weights[k] -= cfg.lr * gw[k]
                p.biases[k] -= cfg.lr * gb[k]
            sums += len(idx) * np.array([rep.base, rep.psw, rep.ps, rep.total])
        if not np.all(np.isfinite(p.flat())):
            raise NonFiniteLoss(f"epoch {epoch}: parameters became non-finite")
        avg = sums / n
        for d in train_domains:
            acc, _ = evaluate(p, d)
            history.append(dict(epoch=epoch, domain=d.name, split="train", accuracy=acc,
                                base=avg[0], psw=avg[1], ps=avg[2], total=avg[3]))
        for d in test_domains:
            acc, ce = evaluate(p, d)
            history.append(dict(epoch=epoch, domain=d.name, split="test", accuracy=acc,
                                base=ce, psw=float("nan"), ps=float("nan"), total=float("nan")))
        if log is not None:
            log(f"epoch {epoch}: " + ", ".join(f"{r['domain']}={r['accuracy']:.3f}"
                                               for r in history if r["epoch"] == epoch))
    extra = {}
    if c_ids is not None:
        extra = dict(pi=pi, c_cluster=c_ids, s_cluster=s_ids, domain=tag)
    return TrainResult(p, history, extra)


def final_accuracy(history: list[dict], domain: str, split: str = "test") -> float:
    rows = [r for r in history if r["domain"] == domain and r["split"] == split]
    if not rows:
        raise KeyError(f"no {split} metrics for domain {domain!r}")
    return max(rows, key=lambda r: r["epoch"])["accuracy"]


# --- persistence ------------------------------------------------------------

def save_checkpoint(p: ModelParams, path) -> None:
    """magic | version | omega | layer count | per layer rows, cols, W, b (float64 LE)."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<Id", CHECKPOINT_VERSION, p.omega), struct.pack("<I", len(p.weights))]
    for w, b in zip(p.weights, p.biases):
        parts.append(struct.pack("<II", *w.shape))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise LearnerError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, omega = struct.unpack_from("<Id", raw, pos)
    if version != CHECKPOINT_VERSION:
        raise LearnerError(f"{path}: unsupported checkpoint version {version}")
    pos += 12
    (layers,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    ws, bs = [], []
    for _ in range(layers):
        r, c = struct.unpack_from("<II", raw, pos)
        pos += 8
        ws.append(np.frombuffer(raw, "<f8", r * c, pos).reshape(r, c).copy())
        pos += 8 * r * c
        bs.append(np.frombuffer(raw, "<f8", r, pos).copy())
        pos += 8 * r
    if pos != len(raw):
        raise LearnerError(f"{path}: {len(raw) - pos} trailing bytes")
    return ModelParams(ws, bs, omega)


def write_metrics(history: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: _fmt(row[k]) for k in METRIC_FIELDS})


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6f}"
    return v


def read_metrics(path) -> list[dict]:
    rows = []
    with Path(path).open(newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({"epoch": int(r["epoch"]), "domain": r["domain"], "split": r["split"],
                         **{k: float(r[k]) if r[k] != "" else float("nan")
                            for k in ("accuracy", "base", "psw", "ps", "total")}})
    return rows
