"""Config files, the raw dataset format and the binary checkpoint/feature formats."""

import filecmp
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simdino.config import CLI_MODES, ConfigError, RunConfig
from simdino.data import (SyntheticDatasetSpec, generate, load_dataset, read_image, render_image, save_dataset,
                          write_image)
from simdino.serialization import (FormatError, read_checkpoint, read_features, write_checkpoint,
                                   write_features)

# --- config ------------------------------------------------------------------------


@pytest.mark.parametrize("mode", CLI_MODES)
def test_config_round_trip(mode):
    cfg = RunConfig.for_mode(mode, seed=7, gamma=0.25, dataset="data/x y")
    back = RunConfig.from_text(cfg.to_text())
    assert back == cfg and back.hash() == cfg.hash()


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10, allow_nan=False), st.integers(0, 10**6), st.booleans(), st.text(min_size=0, max_size=12))
def test_config_round_trip_property(gamma, steps, centered, out):
    cfg = RunConfig(gamma=gamma, steps=steps, use_centered=centered, out_dir=out)
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_comments_and_bare_words():
    cfg = RunConfig.from_text('# header\nmode = simdinov2  # trailing\nout_dir = "a#b"\n\nsteps = 3\n')
    assert (cfg.mode, cfg.out_dir, cfg.steps) == ("simdinov2", "a#b", 3)


@pytest.mark.parametrize("text,key,line", [
    ("steps = 3\nbogus = 1\n", "bogus", 2),
    ("gamma = -0.5\n", "gamma", 1),
    ("\n\nsteps = three\n", "steps", 3),
    ("batch_size = 1\n", "batch_size", 1),
    ("steps = 1\nsteps = 2\n", "steps", 2),
])
def test_config_errors_name_field_and_line(text, key, line):
    with pytest.raises(ConfigError) as exc:
        RunConfig.from_text(text)
    assert exc.value.key == key and exc.value.line == line
    assert repr(key) in str(exc.value) and f"line {line}" in str(exc.value)


def test_missing_equals_rejected():
    with pytest.raises(ConfigError, match="line 1"):
        RunConfig.from_text("steps 3\n")


def test_hash_ignores_output_location():
    a = RunConfig(out_dir="a", checkpoint_every=5)
    assert a.hash() == RunConfig(out_dir="b").hash() != RunConfig(seed=1).hash()


def test_mode_presets():
    v1, v2 = RunConfig.for_mode("simdino"), RunConfig.for_mode("simdinov2")
    assert (v1.momentum, v1.lr, v1.grad_clip) == (0.996, 0.002, 0.3)
    assert (v2.momentum, v2.lr, v2.grad_clip, v2.pos_antialias) == (0.9, 0.004, 3.0, True)
    assert RunConfig.for_mode("no-distill").loss_mode == "simdino"
    assert v2.encoder_config().patch_head and not RunConfig.for_mode("simdinov2", patch_head_tied=True) \
        .encoder_config().patch_head
    with pytest.raises(ConfigError, match="unknown mode"):
        RunConfig.for_mode("byol")


# --- dataset ------------------------------------------------------------------------------


def test_generate_counts_and_split():
    ds = generate(SyntheticDatasetSpec(n_classes=3, per_class=20, image_size=16))
    assert ds.images.shape == (60, 3, 16, 16)
    assert np.all(np.bincount(ds.labels) == 20)
    assert np.all(np.bincount(ds.labels[ds.split == "train"]) == 16)
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_generate_is_deterministic_and_seeded():
    spec = SyntheticDatasetSpec(per_class=4, image_size=16, seed=3)
    np.testing.assert_array_equal(generate(spec).images, generate(spec).images)
    assert not np.array_equal(generate(spec).images, generate(SyntheticDatasetSpec(per_class=4, image_size=16)).images)


def test_saved_directories_byte_identical(tmp_path):
    spec = SyntheticDatasetSpec(per_class=3, image_size=16)
    a, b = save_dataset(generate(spec), tmp_path / "a"), save_dataset(generate(spec), tmp_path / "b")
    cmp = filecmp.dircmp(a, b)
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert (a / "manifest.tsv").read_bytes() == (b / "manifest.tsv").read_bytes()
    assert len((a / "manifest.tsv").read_text().splitlines()) == 1 + 9
    for name in (a / "images").iterdir():
        assert name.read_bytes() == (b / "images" / name.name).read_bytes()


def test_noise_free_within_class_variance_below_between():
    spec = SyntheticDatasetSpec(n_classes=3, per_class=30, image_size=32, noise=0.0)
    ds = generate(spec)
    # blobs move, so compare position-free statistics: per-channel pixel quantiles
    q = np.quantile(ds.images.reshape(len(ds), 3, -1), np.linspace(0, 1, 17), axis=2)
    X = q.transpose(1, 2, 0).reshape(len(ds), -1)
    means = np.stack([X[ds.labels == k].mean(0) for k in range(3)])
    within = np.mean([X[ds.labels == k].var(0).sum() for k in range(3)])
    between = means.var(0).sum()
    assert within < between


def test_dataset_round_trip(tmp_path):
    ds = generate(SyntheticDatasetSpec(per_class=2, image_size=12))
    back = load_dataset(save_dataset(ds, tmp_path))
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.split, ds.split)


def test_image_format_layout(tmp_path):
    img = np.random.default_rng(0).random((3, 5, 7))
    write_image(tmp_path / "x.bin", img)
    raw = (tmp_path / "x.bin").read_bytes()
    assert struct.unpack("<3I", raw[:12]) == (3, 5, 7) and len(raw) == 12 + 8 * 105
    np.testing.assert_array_equal(read_image(tmp_path / "x.bin"), img)
    (tmp_path / "y.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="expected 105 pixels"):
        read_image(tmp_path / "y.bin")


def test_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)
    (tmp_path / "manifest.tsv").write_text("path\tlabel\tsplit\nimages/0.bin\t0\ttest\n")
    with pytest.raises(ValueError, match=":2: malformed"):
        load_dataset(tmp_path)


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(image_size=4)
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(noise=-1)


def test_classes_differ_by_construction():
    spec = SyntheticDatasetSpec(n_classes=6)
    assert len({spec.class_color(k) for k in range(6)}) == 6
    assert len({spec.class_shape(k) for k in range(6)}) == 6
    a = render_image(spec, 0, np.random.default_rng(0))
    assert a.shape == (3, 64, 64)


# --- binary formats ----------------------------------------------------------------------


def test_checkpoint_round_trip_and_layout(tmp_path):
    rng = np.random.default_rng(0)
    blocks = {"a": rng.standard_normal((2, 3)), "b/c": np.array(1.5), "d": rng.standard_normal(4)}
    meta = {"step": 3, "rng": {"x": [1, 2]}}
    digest = "ab" * 32
    write_checkpoint(tmp_path / "c.bin", blocks, meta, digest)
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:8] == b"SIMDINO\0" and struct.unpack("<I", raw[8:12]) == (1,) and raw[12:76] == digest.encode()
    got, m, h = read_checkpoint(tmp_path / "c.bin")
    assert m == meta and h == digest and list(got) == list(blocks)
    for k in blocks:
        np.testing.assert_array_equal(got[k], blocks[k])
    write_checkpoint(tmp_path / "d.bin", blocks, meta, digest)
    assert (tmp_path / "d.bin").read_bytes() == raw


@pytest.mark.parametrize("damage,match", [
    (lambda r: b"XXXXXXXX" + r[8:], "bad magic"),
    (lambda r: r[:8] + struct.pack("<I", 9) + r[12:], "version 9"),
    (lambda r: r[:-3], "truncated"),
    (lambda r: r + b"\0", "trailing"),
])
def test_checkpoint_corruption_detected(tmp_path, damage, match):
    write_checkpoint(tmp_path / "c.bin", {"a": np.ones(3)}, {}, "0" * 64)
    (tmp_path / "c.bin").write_bytes(damage((tmp_path / "c.bin").read_bytes()))
    with pytest.raises(FormatError, match=match):
        read_checkpoint(tmp_path / "c.bin")


def test_feature_dump_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    F, y = rng.standard_normal((4, 9)), rng.integers(0, 3, 9)
    write_features(tmp_path / "f.bin", F, y, 3)
    raw = (tmp_path / "f.bin").read_bytes()
    assert struct.unpack("<IQQQ", raw[8:36]) == (1, 4, 9, 3)
    F2, y2, k = read_features(tmp_path / "f.bin")
    np.testing.assert_array_equal(F2, F)
    np.testing.assert_array_equal(y2, y)
    assert k == 3
    with pytest.raises(ValueError, match="labels"):
        write_features(tmp_path / "g.bin", F, y[:3], 3)
