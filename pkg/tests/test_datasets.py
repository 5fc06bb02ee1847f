import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from causalpsw.datasets import (
    BadMagic, CountMismatch, DatasetError, GenSpec, InvalidSpec, InvalidSplit, TruncatedFile,
    agreement_rate, chi_square_independence, color_given_label, colored_mnist_spec, decode_domain,
    draw_labels, encode_domain, bias_shift_spec, generate, leave_one_out, load_domains, load_idx,
    render_glyph, save_domains, split_domains, write_idx,
)

DATA = Path(__file__).parent / "data"
TINY_IMAGES = DATA / "tiny-images-idx3-ubyte"
TINY_LABELS = DATA / "tiny-labels-idx1-ubyte"
CHI2_99 = 6.634896601021214  # 99th percentile of chi-square with 1 dof


@pytest.fixture(scope="module")
def cmnist():
    return generate(colored_mnist_spec(seed=3, size=5000))


def test_unbiased_domain_color_independent_of_label():
    ds = generate(GenSpec([0.5], noise=0.25, seed=11, sizes=10_000))[0]
    assert chi_square_independence(ds.labels, ds.colors) < CHI2_99


def test_chi_square_detects_dependence():
    a = np.array([0] * 50 + [1] * 50)
    assert chi_square_independence(a, a) == pytest.approx(100.0)


def test_bias_point_nine_class0_red_fraction():
    ds = generate(GenSpec([0.9], noise=0.25, seed=5, sizes=5000))[0]
    red = ds.colors[ds.labels == 0] == 0
    assert abs(red.mean() - 0.9) <= 0.02
    green = ds.colors[ds.labels == 1] == 1
    assert abs(green.mean() - 0.9) <= 0.02


def test_noise_caps_color_blind_accuracy(cmnist):
    # the best rule that ignores color recovers the clean digit label
    for ds in cmnist:
        acc = np.mean(ds.labels == (ds.digits < 5))
        se = math.sqrt(0.75 * 0.25 / len(ds))
        assert abs(acc - 0.75) <= 3 * se


def test_empirical_bias_within_tolerance(cmnist):
    for ds in cmnist:
        assert abs(agreement_rate(ds) - ds.bias) <= 2 / math.sqrt(len(ds))


def test_domains_differ_by_bias(cmnist):
    for a in cmnist:
        for b in cmnist:
            gap = np.abs(color_given_label(a) - color_given_label(b)).max()
            assert gap >= abs(a.bias - b.bias) - 0.05


def test_protocol_names_and_labels(cmnist):
    assert [d.name for d in cmnist] == ["+90%", "+80%", "-90%"]
    assert [d.bias for d in cmnist] == pytest.approx([0.9, 0.7, 0.1])
    for ds in cmnist:
        assert set(np.unique(ds.labels)) <= {0, 1}
        assert ds.images.shape == (5000, 3, 28, 28) and ds.images.dtype == np.float32
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        # strokes live only in the channel named by the color
        other = ds.images[np.arange(len(ds)), 1 - ds.colors.astype(int)]
        assert other.max() == 0


def test_generation_is_byte_identical_per_seed():
    spec = GenSpec([0.9, 0.1], noise=0.25, seed=7, sizes=200)
    a, b = generate(spec), generate(spec)
    for x, y in zip(a, b):
        assert encode_domain(x) == encode_domain(y)
    c = generate(GenSpec([0.9, 0.1], noise=0.25, seed=8, sizes=200))
    assert encode_domain(c[0]) != encode_domain(a[0])


def test_prefix_stable_under_size_change():
    # per-sample seeds: a larger domain starts with the smaller one
    small = generate(GenSpec([0.8], seed=2, sizes=30))[0]
    big = generate(GenSpec([0.8], seed=2, sizes=60))[0]
    np.testing.assert_array_equal(big.images[:30], small.images)
    np.testing.assert_array_equal(big.labels[:30], small.labels)


def test_two_channel_variant():
    ds = generate(GenSpec([0.9], seed=0, sizes=20, channels=2))[0]
    assert ds.images.shape == (20, 2, 28, 28)


def test_color_first_order():
    rng = np.random.default_rng(0)
    n = 20_000
    pairs = [draw_labels(int(rng.integers(10)), 1.0, 0.25, rng, color_first=True) for _ in range(n)]
    labels, colors = np.array(pairs).T
    # color follows the clean label, so it agrees with the noisy label 75% of the time
    assert abs(np.mean(labels == colors) - 0.75) < 0.015
    pairs = [draw_labels(int(rng.integers(10)), 1.0, 0.25, rng) for _ in range(1000)]
    assert all(l == c for l, c in pairs)


def test_glyphs_render_every_digit():
    rng = np.random.default_rng(0)
    for d in range(10):
        g = render_glyph(d, rng)
        assert g.shape == (28, 28) and g.max() > 0.5 and g.min() >= 0


@pytest.mark.parametrize("kwargs,field", [
    (dict(biases=[1.5]), "biases[0]"),
    (dict(biases=[0.5], noise=0.5), "noise[0]"),
    (dict(biases=[0.5], sizes=0), "sizes[0]"),
    (dict(biases=[0.5, 0.2], names=["a"]), "names"),
    (dict(biases=[]), "biases"),
    (dict(biases=[0.5], channels=4), "channels"),
])
def test_invalid_spec_names_field(kwargs, field):
    with pytest.raises(InvalidSpec, match=field.replace("[", r"\[").replace("]", r"\]")):
        generate(GenSpec(**kwargs))


def test_bias_shift_spec():
    spec = bias_shift_spec(0.9, seed=1, size=10)
    assert spec.biases == [0.9, 0.5] and spec.noise == [0.25, 0.0]


def test_split_domains(cmnist):
    train, test = split_domains(cmnist, 2)
    assert [d.name for d in train] == ["+90%", "+80%"] and [d.name for d in test] == ["-90%"]
    train, test = split_domains(cmnist, "-90%")
    assert [d.name for d in test] == ["-90%"]
    splits = leave_one_out(cmnist)
    assert len(splits) == 3
    assert sorted(t[0].name for _, t in splits) == sorted(d.name for d in cmnist)
    for tr, te in splits:
        assert not {d.name for d in tr} & {d.name for d in te}


@pytest.mark.parametrize("test", [5, "nope", [0, 1, 2], []])
def test_bad_splits(cmnist, test):
    with pytest.raises(InvalidSplit):
        split_domains(cmnist, test)
    with pytest.raises(InvalidSplit):
        split_domains(cmnist[:1], 0)


def test_tiny_idx_fixture_pixels():
    images, labels = load_idx(TINY_IMAGES, TINY_LABELS)
    assert images.shape == (3, 28, 28) and len(labels) == 3
    assert labels.tolist() == [7, 1, 4]
    assert images[0, 0, 0] == 1.0 and images[0, 27, 27] == pytest.approx(1 / 255)
    assert images[0].sum() == pytest.approx(256 / 255)
    assert np.all(images[1, 14, 5:23] == np.float32(200 / 255)) and images[1].sum() == pytest.approx(18 * 200 / 255)
    assert np.all(np.diag(images[2]) == np.float32(128 / 255))
    digest = hashlib.sha256(TINY_IMAGES.read_bytes()).hexdigest()
    assert digest == "1c23c95e7f0c2cf624a9f7a4847aec12103dc4b587bada06746517600a35af52"


def test_idx_mode_generation(tmp_path):
    images, labels = load_idx(TINY_IMAGES, TINY_LABELS)
    spec = GenSpec([0.9, 0.1], noise=0.0, sizes=3, source=str(TINY_IMAGES), labels_source=str(TINY_LABELS))
    doms = generate(spec)
    assert doms[0].digits.tolist() == [7, 4, 1]
    assert doms[1].digits.tolist() == [1, 7, 4]
    for ds in doms:
        np.testing.assert_array_equal(ds.labels, (ds.digits < 5).astype(np.uint8))
    with pytest.raises(FileNotFoundError):
        generate(GenSpec([0.5], source=str(tmp_path / "missing-images-idx3-ubyte")))


def test_idx_errors(tmp_path):
    img, lbl = tmp_path / "a-images", tmp_path / "a-labels"
    write_idx(np.zeros((2, 28, 28)), [1, 2], img, lbl)
    assert load_idx(img, lbl)[0].shape == (2, 28, 28)
    with pytest.raises(BadMagic):
        load_idx(lbl, lbl)
    raw = img.read_bytes()
    (tmp_path / "short").write_bytes(raw[:-10])
    with pytest.raises(TruncatedFile):
        load_idx(tmp_path / "short", lbl)
    (tmp_path / "tiny").write_bytes(raw[:5])
    with pytest.raises(TruncatedFile):
        load_idx(tmp_path / "tiny", lbl)
    (tmp_path / "three").write_bytes(struct.pack(">II", 0x801, 3) + bytes(3))
    with pytest.raises(CountMismatch):
        load_idx(img, tmp_path / "three")


def test_gzipped_idx(tmp_path):
    import gzip
    (tmp_path / "g-images").write_bytes(gzip.compress(TINY_IMAGES.read_bytes()))
    images, _ = load_idx(tmp_path / "g-images", TINY_LABELS)
    assert images.shape == (3, 28, 28)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.booleans())
def test_tensor_roundtrip(n, c, aux):
    rng = np.random.default_rng(n * 10 + c)
    from causalpsw.datasets import DomainDataset
    ds = DomainDataset("x", rng.random((n, c, 5, 4)).astype(np.float32), rng.integers(0, 2, n).astype(np.uint8),
                       0.3, 0.1, rng.integers(0, 2, n).astype(np.uint8) if aux else None, None)
    back = decode_domain(encode_domain(ds))
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    if aux:
        np.testing.assert_array_equal(back.colors, ds.colors)
    else:
        assert back.colors is None


def test_tensor_header_and_errors():
    ds = generate(GenSpec([0.5], sizes=2))[0]
    raw = encode_domain(ds)
    assert raw[:5] == b"CPSW1"
    assert struct.unpack("<5I", raw[5:25]) == (4, 2, 3, 28, 28)
    with pytest.raises(BadMagic):
        decode_domain(b"XXXXX" + raw[5:])
    with pytest.raises(TruncatedFile):
        decode_domain(raw[:100])


def test_save_and_load_with_checksums(tmp_path):
    spec = colored_mnist_spec(seed=1, size=40)
    doms = generate(spec)
    save_domains(doms, tmp_path / "a", spec)
    save_domains(generate(spec), tmp_path / "b", spec)
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert len(ma["domains"]) == 3
    assert [e["sha256"] for e in ma["domains"]] == [e["sha256"] for e in mb["domains"]]
    back = load_domains(tmp_path / "a")
    for x, y in zip(doms, back):
        assert x.name == y.name and x.bias == y.bias
        np.testing.assert_array_equal(x.images, y.images)
    f = tmp_path / "a" / ma["domains"][0]["file"]
    f.write_bytes(f.read_bytes()[:-1] + b"\x07")
    with pytest.raises(DatasetError, match="checksum"):
        load_domains(tmp_path / "a")
    with pytest.raises(FileNotFoundError):
        load_domains(tmp_path / "missing")
