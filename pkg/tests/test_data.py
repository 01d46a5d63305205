from __future__ import annotations

import math
import struct

import numpy as np
import pytest

from mtlforge import data, rng as prng
from mtlforge.data import DataError, NoiseSpec


# IDX -------------------------------------------------------------------------


def test_idx_roundtrip(tiny_idx):
    d, imgs, labels = tiny_idx
    i, lab = data.IDX_FILES["train"]
    got_i, got_l = data.load_idx(d / i, d / lab)
    assert np.array_equal(got_i, imgs) and np.array_equal(got_l, labels)
    assert got_i.dtype == np.uint8


def test_idx_header_layout(tiny_idx):
    d, _, _ = tiny_idx
    head = (d / data.IDX_FILES["train"][0]).read_bytes()[:16]
    assert struct.unpack(">4I", head) == (0x803, 12, 28, 28)


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(struct.pack(">4I", 0x801, 1, 2, 2) + bytes(4))
    with pytest.raises(DataError, match="magic"):
        data.read_idx_images(p)


def test_idx_truncated(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(struct.pack(">4I", 0x803, 2, 2, 2) + bytes(5))
    with pytest.raises(DataError, match="truncated"):
        data.read_idx_images(p)
    p.write_bytes(bytes(3))
    with pytest.raises(DataError, match="header"):
        data.read_idx_images(p)


def test_idx_count_mismatch(tmp_path):
    data.write_idx(tmp_path / "i", tmp_path / "l", np.zeros((3, 2, 2)), np.zeros(2))
    with pytest.raises(DataError, match="count mismatch"):
        data.load_idx(tmp_path / "i", tmp_path / "l")


def test_missing_files_message(tmp_path):
    with pytest.raises(FileNotFoundError, match="MTLFORGE_DATA"):
        data.load_mnist(tmp_path)


def test_resolve_data_dir_prefers_explicit_then_env(tmp_path, monkeypatch):
    monkeypatch.setenv("MTLFORGE_DATA", str(tmp_path / "env"))
    assert data.resolve_data_dir(tmp_path / "x") == tmp_path / "x"
    assert data.resolve_data_dir() == tmp_path / "env"


def test_mnist_counts(mnist):
    assert mnist["train"][0].shape == (60000, 28, 28)
    assert mnist["test"][0].shape == (10000, 28, 28)
    assert len(mnist["train"][1]) == 60000 and len(mnist["test"][1]) == 10000


# transforms ------------------------------------------------------------------


def test_binarize_threshold_at_half():
    raw = np.zeros((28, 28), dtype=np.uint8)
    raw[0, 0], raw[0, 1] = 127, 128  # 127/255 < 0.5 <= 128/255
    img, mask = data.preprocess(raw, 28)
    assert img[0, 0, 0] == 0.0 and img[0, 0, 1] == 1.0
    assert np.array_equal(img, mask)


def test_upsample_index_nearest():
    assert data.upsample_index(28, 56).tolist() == [i // 2 for i in range(56)]
    idx = data.upsample_index(28, 32)
    assert idx[0] == 0 and idx[-1] == 27 and np.all(np.diff(idx) >= 0)


def test_preprocess_shapes_and_binary(rng):
    raw = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    img, mask = data.preprocess(raw, 32)
    assert img.shape == (5, 1, 32, 32)
    assert set(np.unique(img)) <= {0.0, 1.0}
    single, _ = data.preprocess(raw[2], 32)
    assert np.array_equal(single, img[2])
    with pytest.raises(ValueError):
        data.preprocess(raw, 16)


def test_preprocess_idempotent_on_binary_input(rng):
    raw = (rng.random((28, 28)) < 0.4).astype(np.uint8) * 255
    img, _ = data.preprocess(raw, 28)
    again, _ = data.preprocess((img[0] * 255).astype(np.uint8), 28)
    assert np.array_equal(img, again)


@pytest.mark.parametrize("label", range(10))
def test_extrusion_depth(label):
    mask = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    d = data.extrude_depth(mask, label)
    assert set(np.unique(d)) == {0.0, (label + 1) / 10}
    assert np.array_equal(d > 0, mask > 0)


def test_extrusion_batch_matches_single():
    masks = np.ones((3, 1, 2, 2))
    d = data.extrude_depth(masks, np.array([0, 4, 9]))
    assert [d[i].max() for i in range(3)] == [0.1, 0.5, 1.0]


# noise -----------------------------------------------------------------------


def test_splitmix64_known_value():
    # first output of the reference SplitMix64 generator seeded with 0
    assert prng.splitmix64(0) == 0xE220A8397B1DCDAF


def test_xorshift_vector_matches_scalar_reference():
    got = prng.uniform_streams(7, [0, 3, 60000], 50)
    for row, idx in zip(got, [0, 3, 60000]):
        g = prng.XorShift64Star(prng.stream_state(7, idx))
        assert row.tolist() == [g.uniform() for _ in range(50)]


def test_streams_independent_of_grouping():
    both = prng.uniform_streams(1, [4, 5], 20)
    assert np.array_equal(both[1], prng.uniform_streams(1, [5], 20)[0])


def test_uniforms_in_unit_interval():
    u = prng.uniform_streams(0, range(10), 1000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01


@pytest.mark.parametrize("label, alpha", [("1:5", 1 / 6), ("1:19", 0.05), ("1:29", 1 / 30), ("3:1", 0.75)])
def test_noise_spec_alpha(label, alpha):
    spec = NoiseSpec.parse(label)
    assert spec.alpha == pytest.approx(alpha, abs=1e-15)
    assert spec.label == label


@pytest.mark.parametrize("bad", ["0:5", "1:0", "abc", "1:2:3", "-1:5", "1.5:2"])
def test_noise_spec_rejects(bad):
    with pytest.raises(ValueError):
        NoiseSpec.parse(bad)


def test_inf_is_identity(rng):
    img = rng.random((4, 1, 8, 8))
    out = data.inject_noise(img, NoiseSpec.parse("Inf"), np.arange(4))
    assert out.tobytes() == img.tobytes()


def test_alpha_005_example():
    img = np.ones((1, 4, 4))
    spec = NoiseSpec.parse("1:19", seed=3)
    out = data.inject_noise(img, spec, 11)
    u = prng.uniform_streams(3, [11], 16).reshape(1, 4, 4)
    assert np.array_equal(out, 0.05 * img + 0.95 * u)


def test_noise_depends_on_seed_and_stream():
    img = np.zeros((1, 4, 4))
    a = data.inject_noise(img, NoiseSpec.parse("1:5", 0), 1)
    assert not np.array_equal(a, data.inject_noise(img, NoiseSpec.parse("1:5", 1), 1))
    assert not np.array_equal(a, data.inject_noise(img, NoiseSpec.parse("1:5", 0), 2))


@pytest.mark.parametrize("label", ["1:5", "1:19", "1:29"])
def test_mixing_estimate_recovers_alpha(label, rng):
    clean = (rng.random((200, 1, 32, 32)) < 0.2).astype(np.float64)  # 204800 pixels, slope SE ~0.002
    spec = NoiseSpec.parse(label)
    noisy = data.inject_noise(clean, spec, np.arange(200))
    assert abs(data.estimate_mixing(clean, noisy) - spec.alpha) <= 0.01
    snr = data.measured_snr(clean, noisy)
    assert snr == pytest.approx(spec.signal_parts / spec.noise_parts, rel=0.5)


@pytest.mark.parametrize("label, ratio", [("1:5", 0.2), ("1:29", 1 / 29)])
def test_measured_snr_round_trip(label, ratio, rng):
    clean = (rng.random((200, 1, 32, 32)) < 0.2).astype(np.float64)
    noisy = data.inject_noise(clean, NoiseSpec.parse(label), np.arange(200))
    assert data.measured_snr(clean, noisy) == pytest.approx(ratio, rel=0.1)


def test_parse_paper_label():
    spec = NoiseSpec.parse("1:29")
    assert (spec.signal_parts, spec.noise_parts) == (1, 29)


def test_label_four_extrudes_to_half(rng):
    mask = (rng.random((1, 8, 8)) < 0.5).astype(np.float64)
    assert np.array_equal(data.extrude_depth(mask, 4), 0.5 * mask)


def test_measured_snr_inf_and_errors():
    c = np.array([0.0, 1.0, 0.0, 1.0])
    assert data.measured_snr(c, c) == math.inf
    with pytest.raises(ValueError):
        data.estimate_mixing(np.ones(4), c)


# cohorts ---------------------------------------------------------------------


def test_split_indices():
    idx = data.split_cohorts(512).indices()
    assert idx["train"][0] == "train" and idx["train"][1].tolist() == list(range(512))
    assert idx["val"][1][0] == 45000 and idx["val"][1][-1] == 46499 and len(idx["val"][1]) == 1500
    assert idx["test"][0] == "test" and len(idx["test"][1]) == 1000
    with pytest.raises(ValueError):
        data.split_cohorts(45001)


def test_cohorts_from_mnist(cohorts_clean, mnist):
    c = cohorts_clean
    assert [len(c[k]) for k in ("train", "val", "test")] == [64, 1500, 1000]
    assert np.array_equal(c["val"].labels, mnist["train"][1][45000:46500])
    for cohort in c.values():
        assert set(np.unique(cohort.images)) <= {0.0, 1.0}
        fg = cohort.images > 0
        want = ((cohort.labels + 1) / 10).astype(np.float32).astype(np.float64)
        assert np.array_equal(cohort.depths, fg * want[:, None, None, None])


@pytest.mark.parametrize("n", [5000, 3500])
def test_paper_cohort_sizes(mnist, n):
    split = data.split_cohorts(n)
    c = data.build_cohorts(mnist, split, 28, NoiseSpec.parse("Inf"))
    assert [len(c[k]) for k in ("train", "val", "test")] == [n, 1500, 1000]


def test_train_stream_differs_from_test_stream(make_cohorts):
    c = make_cohorts(n=8, size=32, snr="1:5")
    # same raw image indices, different streams
    assert not np.array_equal(c["train"].images[4:], c["test"].images)


def test_cohort_subset_and_histogram(make_cohorts):
    c = make_cohorts(n=16)["train"]
    s = c.subset(5)
    assert len(s) == 5 and np.array_equal(s.images, c.images[:5])
    assert c.label_histogram().sum() == 16
    samples = list(data.iter_samples(s))
    assert [x.index for x in samples] == list(range(5))


def test_cache_roundtrip_and_byte_determinism(tmp_path, make_cohorts):
    c = make_cohorts(n=10, size=32, snr="1:19")["train"]
    data.write_cache(tmp_path / "a.xmn", c)
    back = data.read_cache(tmp_path / "a.xmn", "train")
    for f in ("images", "depths", "labels", "indices"):
        assert np.array_equal(getattr(back, f), getattr(c, f))
    again = make_cohorts(n=10, size=32, snr="1:19")["train"]
    data.write_cache(tmp_path / "b.xmn", again)
    assert (tmp_path / "a.xmn").read_bytes() == (tmp_path / "b.xmn").read_bytes()


def test_cache_corruption(tmp_path, make_cohorts):
    c = make_cohorts(n=4)["train"]
    p = tmp_path / "c.xmn"
    data.write_cache(p, c)
    raw = p.read_bytes()
    p.write_bytes(raw[:-3])
    with pytest.raises(DataError, match="records"):
        data.read_cache(p)
    p.write_bytes(b"XMN2" + raw[4:])
    with pytest.raises(DataError, match="XMN1"):
        data.read_cache(p)
