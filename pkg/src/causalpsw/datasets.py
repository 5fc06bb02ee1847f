"""Colored digit domains with controllable color-label agreement and label noise.

Digits come from IDX files when given, otherwise from a small synthetic glyph
renderer (stroke polylines under random affine jitter), so everything runs
without downloads.  Each domain draws, per sample:

    digit -> clean label (digit < 5) -> noisy label (flip w.p. noise)
          -> color agrees with the label-color rule w.p. bias

where the rule is class 0 red, class 1 green.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RED, GREEN = 0, 1
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
TENSOR_MAGIC = b"CPSW1"

# named protocols: domain tag -> color flip rate; bias e = 1 - flip
COLORED_MNIST_FLIPS = {"+90%": 0.1, "+80%": 0.3, "-90%": 0.9}


class DatasetError(ValueError):
    pass


class InvalidSpec(DatasetError):
    pass


class InvalidSplit(DatasetError):
    pass


class BadMagic(DatasetError):
    pass


class TruncatedFile(DatasetError):
    pass


class CountMismatch(DatasetError):
    pass


@dataclass
class DomainDataset:
    name: str
    images: np.ndarray          # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray          # (N,) uint8, observed (possibly flipped) label
    bias: float
    noise: float
    colors: np.ndarray | None = None
    digits: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.images.shape[1:]


@dataclass
class GenSpec:
    biases: list
    noise: float | list = 0.25
    seed: int = 0
    sizes: int | list = 5000
    names: list | None = None
    source: str | None = None       # IDX image file; labels file inferred or given
    labels_source: str | None = None
    channels: int = 3
    color_first: bool = False       # assign color from the clean label, then flip

    def expanded(self) -> list[tuple[str, float, float, int]]:
        k = len(self.biases)
        if k == 0:
            raise InvalidSpec("biases: at least one domain is required")
        noise = self.noise if isinstance(self.noise, (list, tuple)) else [self.noise] * k
        sizes = self.sizes if isinstance(self.sizes, (list, tuple)) else [self.sizes] * k
        names = list(self.names) if self.names is not None else [f"e={b:g}" for b in self.biases]
        for field_name, seq in (("noise", noise), ("sizes", sizes), ("names", names)):
            if len(seq) != k:
                raise InvalidSpec(f"{field_name}: expected {k} entries, got {len(seq)}")
        for i, b in enumerate(self.biases):
            if not 0.0 <= float(b) <= 1.0:
                raise InvalidSpec(f"biases[{i}]={b} outside [0, 1]")
        for i, r in enumerate(noise):
            if not 0.0 <= float(r) < 0.5:
                raise InvalidSpec(f"noise[{i}]={r} outside [0, 0.5)")
        for i, n in enumerate(sizes):
            if int(n) < 1:
                raise InvalidSpec(f"sizes[{i}]={n} must be positive")
        if self.channels not in (2, 3):
            raise InvalidSpec(f"channels={self.channels} must be 2 or 3")
        if len(set(names)) != k:
            raise InvalidSpec("names: domain names must be unique")
        return [(str(nm), float(b), float(r), int(n)) for nm, b, r, n in zip(names, self.biases, noise, sizes)]


# --- synthetic glyphs -------------------------------------------------------

def _arc(cx, cy, r, a0, a1, n=14, ry=None):
    t = np.deg2rad(np.linspace(a0, a1, n))
    return [(cx + r * np.cos(a), cy + (ry or r) * np.sin(a)) for a in t]


# polylines in the unit square, y pointing down
GLYPHS = {
    0: [_arc(0.5, 0.5, 0.26, 0, 360, 24, ry=0.37)],
    1: [[(0.38, 0.26), (0.52, 0.12), (0.52, 0.88)]],
    2: [_arc(0.5, 0.33, 0.22, 180, 405) + [(0.25, 0.87), (0.79, 0.87)]],
    3: [_arc(0.48, 0.31, 0.19, 200, 450), _arc(0.48, 0.69, 0.21, 270, 520)],
    4: [[(0.66, 0.88), (0.66, 0.12), (0.22, 0.62), (0.8, 0.62)]],
    5: [[(0.74, 0.13), (0.34, 0.13), (0.31, 0.47)] + _arc(0.5, 0.65, 0.23, 215, 510)],
    6: [[(0.66, 0.13), (0.45, 0.3), (0.32, 0.55), (0.3, 0.68)], _arc(0.5, 0.67, 0.2, 0, 360, 20)],
    7: [[(0.22, 0.13), (0.78, 0.13), (0.42, 0.88)]],
    8: [_arc(0.5, 0.3, 0.17, 0, 360, 18), _arc(0.5, 0.68, 0.21, 0, 360, 20)],
    9: [_arc(0.5, 0.33, 0.2, 0, 360, 20), [(0.7, 0.36), (0.6, 0.88)]],
}


_GRID_X = (np.tile(np.arange(28), 28) + 0.5)[:, None]
_GRID_Y = (np.repeat(np.arange(28), 28) + 0.5)[:, None]


def render_glyph(digit: int, rng: np.random.Generator, size: int = 28) -> np.ndarray:
    """Grayscale digit-like image in [0, 1] with random pose and stroke width."""
    if size != 28:
        raise InvalidSpec("glyphs are rendered at 28x28")
    rot = np.deg2rad(rng.uniform(-12, 12))
    sx, sy = rng.uniform(0.8, 1.05), rng.uniform(0.8, 1.05)
    shear = rng.uniform(-0.2, 0.2)
    shift = rng.uniform(-0.06, 0.06, 2)
    c, s = np.cos(rot), np.sin(rot)
    A = np.array([[c, -s], [s, c]]) @ np.array([[sx, shear], [0, sy]])
    thick = rng.uniform(1.0, 1.8)

    segs = []
    for stroke in GLYPHS[digit]:
        pts = np.asarray(stroke) - 0.5
        pts = (pts @ A.T + 0.5 + shift + rng.normal(0, 0.012, pts.shape)) * size
        segs.append(np.concatenate([pts[:-1], pts[1:]], axis=1))
    ax, ay, bx, by = np.concatenate(segs).T
    abx, aby = bx - ax, by - ay
    den = np.maximum(abx ** 2 + aby ** 2, 1e-12)
    dx = _GRID_X - ax
    dy = _GRID_Y - ay
    t = np.clip((dx * abx + dy * aby) / den, 0, 1)
    dist = np.sqrt(((dx - t * abx) ** 2 + (dy - t * aby) ** 2).min(axis=1))
    img = np.clip(thick / 2 + 0.5 - dist, 0, 1).reshape(size, size)
    img = img + rng.normal(0, 0.04, img.shape)
    return np.clip(img, 0, 1)


def colorize(gray: np.ndarray, color: int, channels: int = 3) -> np.ndarray:
    """Tint a grayscale image red (channel 0) or green (channel 1) on black."""
    out = np.zeros((channels,) + gray.shape, dtype=np.float32)
    out[color] = gray
    return out


# --- generation ---------------------------------------------------------------

def _sample_rng(seed: int, domain: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, domain, index])


def draw_labels(digit: int, bias: float, noise: float, rng: np.random.Generator,
                color_first: bool = False) -> tuple[int, int]:
    """(observed label, color) for one sample."""
    clean = int(digit < 5)
    flip = rng.random() < noise
    agree = rng.random() < bias
    label = clean ^ int(flip)
    ref = clean if color_first else label
    color = ref if agree else 1 - ref
    return label, color


def generate(spec: GenSpec, digit_images: np.ndarray | None = None,
             digit_labels: np.ndarray | None = None) -> list[DomainDataset]:
    """Build every domain of ``spec``; byte-identical output per seed."""
    domains = spec.expanded()
    if spec.source is not None and digit_images is None:
        lbl = spec.labels_source or _infer_label_path(spec.source)
        digit_images, digit_labels = load_idx(spec.source, lbl)
    out = []
    for d, (name, bias, noise, n) in enumerate(domains):
        imgs = np.zeros((n, spec.channels, 28, 28), dtype=np.float32)
        labels = np.zeros(n, dtype=np.uint8)
        colors = np.zeros(n, dtype=np.uint8)
        digits = np.zeros(n, dtype=np.uint8)
        for i in range(n):
            rng = _sample_rng(spec.seed, d, i)
            if digit_images is None:
                digit = int(rng.integers(10))
                gray = render_glyph(digit, rng)
            else:
                # interleave so domains use disjoint source images
                k = (i * len(domains) + d) % len(digit_images)
                digit = int(digit_labels[k])
                gray = digit_images[k]
            label, color = draw_labels(digit, bias, noise, rng, spec.color_first)
            imgs[i] = colorize(gray, color, spec.channels)
            labels[i], colors[i], digits[i] = label, color, digit
        out.append(DomainDataset(name, imgs, labels, bias, noise, colors, digits))
    return out


def _infer_label_path(images_path: str) -> str:
    p = str(images_path)
    for a, b in (("images-idx3", "labels-idx1"), ("images.idx3", "labels.idx1"), ("images", "labels")):
        if a in p:
            return p.replace(a, b)
    raise InvalidSpec(f"cannot infer label file for {images_path}; set labels_source")


def colored_mnist_spec(seed: int = 0, size: int = 5000, noise: float = 0.25, **kw) -> GenSpec:
    """Three domains +90%, +80%, -90% (color flip rates 0.1, 0.3, 0.9)."""
    names = list(COLORED_MNIST_FLIPS)
    return GenSpec([1 - COLORED_MNIST_FLIPS[n] for n in names], noise, seed, size, names, **kw)


def bias_shift_spec(bias: float, seed: int = 0, size: int = 5000, **kw) -> GenSpec:
    """Noisy training domain at ``bias`` and a clean-label unbiased test domain."""
    return GenSpec([bias, 0.5], [0.25, 0.0], seed, size, ["train", "test"], **kw)


def split_domains(domains: list, test) -> tuple[list, list]:
    """Partition by index or name; ``test`` may be a single item or a list."""
    if len(domains) < 2:
        raise InvalidSplit("need at least two domains")
    names = [d.name if hasattr(d, "name") else str(d) for d in domains]
    test = [test] if isinstance(test, (int, str)) else list(test)
    idx = set()
    for t in test:
        if isinstance(t, str):
            if t not in names:
                raise InvalidSplit(f"unknown domain {t!r}; have {names}")
            idx.add(names.index(t))
        else:
            if not 0 <= int(t) < len(domains):
                raise InvalidSplit(f"domain index {t} out of range")
            idx.add(int(t))
    if not idx or len(idx) == len(domains):
        raise InvalidSplit("split must leave at least one train and one test domain")
    train = [d for i, d in enumerate(domains) if i not in idx]
    held = [d for i, d in enumerate(domains) if i in idx]
    return train, held


def leave_one_out(domains: list) -> list[tuple[list, list]]:
    return [split_domains(domains, i) for i in range(len(domains))]


def color_given_label(ds: DomainDataset) -> np.ndarray:
    """Empirical P(color | label) as a 2x2 table indexed [label, color]."""
    t = np.zeros((2, 2))
    np.add.at(t, (ds.labels.astype(int), ds.colors.astype(int)), 1)
    return t / np.maximum(t.sum(1, keepdims=True), 1)


def agreement_rate(ds: DomainDataset) -> float:
    return float(np.mean(ds.colors == ds.labels))


def chi_square_independence(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson chi-square statistic of the 2x2 contingency table of a and b."""
    t = np.zeros((2, 2))
    np.add.at(t, (np.asarray(a, int), np.asarray(b, int)), 1)
    exp = t.sum(1, keepdims=True) * t.sum(0, keepdims=True) / t.sum()
    return float(((t - exp) ** 2 / np.where(exp > 0, exp, 1)).sum())


# --- IDX files ---------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, path) -> tuple[tuple[int, ...], bytes]:
    if len(raw) < 8:
        raise TruncatedFile(f"{path}: header shorter than 8 bytes")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise BadMagic(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = raw[3]
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFile(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    body = raw[head:]
    need = int(np.prod(dims))
    if len(body) < need:
        raise TruncatedFile(f"{path}: expected {need} data bytes, found {len(body)}")
    return dims, body[:need]


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label pair into float images in [0, 1] and uint8 labels."""
    dims, body = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, images_path)
    images = np.frombuffer(body, dtype=np.uint8).reshape(dims).astype(np.float32) / 255.0
    ldims, lbody = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, labels_path)
    labels = np.frombuffer(lbody, dtype=np.uint8).copy()
    if dims[0] != ldims[0]:
        raise CountMismatch(f"{dims[0]} images vs {ldims[0]} labels")
    return images, labels


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes())


# --- repository tensor format ------------------------------------------------

def encode_domain(ds: DomainDataset) -> bytes:
    """CPSW1 | ndim | dims | float32 LE pixels | n | uint8 labels | aux arrays."""
    img = np.ascontiguousarray(ds.images, dtype="<f4")
    parts = [TENSOR_MAGIC, struct.pack("<I", img.ndim), struct.pack(f"<{img.ndim}I", *img.shape),
             img.tobytes(), struct.pack("<I", len(ds.labels)), np.asarray(ds.labels, np.uint8).tobytes()]
    aux = [(k, v) for k, v in (("colors", ds.colors), ("digits", ds.digits)) if v is not None]
    parts.append(struct.pack("<I", len(aux)))
    for key, arr in aux:
        kb = key.encode()
        parts += [struct.pack("<B", len(kb)), kb, struct.pack("<I", len(arr)), np.asarray(arr, np.uint8).tobytes()]
    return b"".join(parts)


def decode_domain(raw: bytes, name: str = "", bias: float = float("nan"), noise: float = float("nan")) -> DomainDataset:
    if raw[:5] != TENSOR_MAGIC:
        raise BadMagic(f"tensor magic {raw[:5]!r}, expected {TENSOR_MAGIC!r}")
    pos = 5

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise TruncatedFile(f"tensor file ends at byte {len(raw)}, needed {pos + n}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    ndim = struct.unpack("<I", take(4))[0]
    dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
    count = int(np.prod(dims))
    images = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    n = struct.unpack("<I", take(4))[0]
    if n != dims[0]:
        raise CountMismatch(f"{dims[0]} images vs {n} labels")
    labels = np.frombuffer(take(n), dtype=np.uint8).copy()
    aux = {}
    if pos < len(raw):
        for _ in range(struct.unpack("<I", take(4))[0]):
            key = take(struct.unpack("<B", take(1))[0]).decode()
            k = struct.unpack("<I", take(4))[0]
            aux[key] = np.frombuffer(take(k), dtype=np.uint8).copy()
    return DomainDataset(name, images, labels, bias, noise, aux.get("colors"), aux.get("digits"))


def _slug(name: str) -> str:
    return name.replace("+", "p").replace("-", "m").replace("%", "").replace("=", "").replace(" ", "_")


def save_domains(domains: list[DomainDataset], out_dir, spec: GenSpec | None = None) -> Path:
    """Write one tensor file per domain plus manifest.json with sha256 checksums."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for ds in domains:
        raw = encode_domain(ds)
        fname = f"domain_{_slug(ds.name)}.cpsw"
        (out_dir / fname).write_bytes(raw)
        entries.append({"name": ds.name, "file": fname, "bias": ds.bias, "noise": ds.noise,
                        "size": len(ds), "sha256": hashlib.sha256(raw).hexdigest()})
    manifest = {"format": "CPSW1", "domains": entries}
    if spec is not None:
        manifest["spec"] = {"biases": list(spec.biases), "noise": spec.noise, "seed": spec.seed,
                            "sizes": spec.sizes, "channels": spec.channels, "color_first": spec.color_first,
                            "source": spec.source or "glyphs"}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_domains(data_dir, verify: bool = True) -> list[DomainDataset]:
    data_dir = Path(data_dir)
    mpath = data_dir / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json in {data_dir}")
    manifest = json.loads(mpath.read_text())
    out = []
    for e in manifest["domains"]:
        fpath = data_dir / e["file"]
        if not fpath.exists():
            raise FileNotFoundError(f"domain file missing: {fpath}")
        raw = fpath.read_bytes()
        if verify and hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise DatasetError(f"checksum mismatch for {fpath}")
        out.append(decode_domain(raw, e["name"], e["bias"], e["noise"]))
    return out
