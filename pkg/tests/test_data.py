import numpy as np
import pytest

from comen.data import (
    TrainView,
    bundles_equal,
    generate_benchmark,
    leave_one_domain_out,
    read_bundle,
    write_bundle,
)
from comen.errors import (
    ChecksumError,
    FileFormatError,
    InvalidDimensionError,
    MalformedHeaderError,
    TruncatedPayloadError,
)
from comen.stylenorm import pixel_style_vectors


def test_benchmark_counts(bundle7):
    assert len(bundle7.samples) == 800
    assert bundle7.domains == 4 and bundle7.classes == 5
    assert bundle7.image_shape == (3, 16, 16)
    counts = np.zeros((4, 5), dtype=int)
    for s in bundle7.samples:
        counts[s.true_domain, s.class_label] += 1
    assert np.all(counts == 40)


def test_generation_is_deterministic(bundle7):
    again = generate_benchmark(7)
    assert bundles_equal(bundle7, again)


def test_different_seeds_differ(bundle7):
    other = generate_benchmark(8)
    assert not bundles_equal(bundle7, other)


def test_pixels_in_unit_range_and_finite(bundle7):
    x = bundle7.pixel_array()
    assert np.isfinite(x).all()
    assert x.min() >= 0.0 and x.max() <= 1.0


def test_invalid_dimensions_rejected():
    with pytest.raises(InvalidDimensionError):
        generate_benchmark(1, domains=1)
    with pytest.raises(InvalidDimensionError):
        generate_benchmark(1, classes=1)
    with pytest.raises(InvalidDimensionError):
        generate_benchmark(1, n_per_cell=3)
    with pytest.raises(InvalidDimensionError):
        generate_benchmark(1, image_size=(3, 4, 4))


def test_style_vectors_separate_domains(bundle7):
    """Between-domain scatter of style vectors exceeds within-domain scatter."""
    styles = pixel_style_vectors(bundle7.pixel_array())
    td = bundle7.true_domains()
    means = np.stack([styles[td == d].mean(axis=0) for d in range(4)])
    grand = styles.mean(axis=0)
    between = ((means - grand) ** 2).sum(axis=1).mean()
    within = np.mean([styles[td == d].var(axis=0).sum() for d in range(4)])
    assert between / within > 1.0


def test_lodo_test_split_is_held_out_domain(bundle7):
    sp = leave_one_domain_out(bundle7, 3)
    assert all(bundle7.samples[i].true_domain == 3 for i in sp.test)
    assert sp.test.size == 200


def test_lodo_partitions_without_overlap(bundle7):
    sp = leave_one_domain_out(bundle7, 2)
    union = np.concatenate([sp.train, sp.val, sp.test])
    assert union.size == len(bundle7.samples)
    assert np.unique(union).size == union.size


def test_lodo_val_fraction(bundle7):
    for held_out in range(4):
        sp = leave_one_domain_out(bundle7, held_out)
        n_source = sp.train.size + sp.val.size
        assert abs(sp.val.size - 0.3 * n_source) <= 1.0


def test_lodo_every_cell_keeps_two_train_samples(bundle7):
    sp = leave_one_domain_out(bundle7, 0)
    counts = {}
    for i in sp.train:
        s = bundle7.samples[i]
        counts[(s.true_domain, s.class_label)] = counts.get((s.true_domain, s.class_label), 0) + 1
    assert len(counts) == 15
    assert min(counts.values()) >= 2


def test_lodo_out_of_range():
    b = generate_benchmark(3, n_per_cell=4)
    with pytest.raises(ValueError):
        leave_one_domain_out(b, 4)


def test_lodo_deterministic(bundle7):
    a = leave_one_domain_out(bundle7, 1)
    b = leave_one_domain_out(bundle7, 1)
    assert np.array_equal(a.train, b.train)
    assert np.array_equal(a.val, b.val)


def test_train_views_hide_domain(bundle7):
    views = bundle7.train_views([0, 1])
    assert all(isinstance(v, TrainView) for v in views)
    assert not hasattr(views[0], "true_domain")


def test_fold_data_shapes(fold0, bundle7):
    assert fold0.train_x.shape[0] + fold0.val_x.shape[0] == 600
    assert fold0.test_x.shape[0] == 200
    assert fold0.domains == 3 and fold0.classes == 5
    assert fold0.train_x.dtype == np.float64
    assert np.array_equal(np.sort(fold0.source_idx),
                          np.sort(np.concatenate([fold0.train_idx, fold0.val_idx])))


def test_bundle_round_trip(tmp_path, bundle7):
    path = tmp_path / "bench.bin"
    write_bundle(bundle7, path)
    again = read_bundle(path)
    assert bundles_equal(bundle7, again)
    # serialization is byte-stable
    path2 = tmp_path / "bench2.bin"
    write_bundle(again, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_round_trip_preserves_splits(tmp_path, bundle7):
    path = tmp_path / "bench.bin"
    write_bundle(bundle7, path)
    again = read_bundle(path)
    a = leave_one_domain_out(bundle7, 2)
    b = leave_one_domain_out(again, 2)
    assert np.array_equal(a.train, b.train)
    assert np.array_equal(a.val, b.val)


def test_truncated_file_rejected(tmp_path, bundle7):
    path = tmp_path / "bench.bin"
    write_bundle(bundle7, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(TruncatedPayloadError):
        read_bundle(path)


def test_corrupted_payload_rejected(tmp_path, bundle7):
    path = tmp_path / "bench.bin"
    write_bundle(bundle7, path)
    blob = bytearray(path.read_bytes())
    blob[100] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        read_bundle(path)


def test_malformed_header_rejected(tmp_path, bundle7):
    path = tmp_path / "bench.bin"
    write_bundle(bundle7, path)
    blob = bytearray(path.read_bytes())
    blob[8:12] = (0).to_bytes(4, "little")  # M = 0
    path.write_bytes(bytes(blob))
    with pytest.raises(MalformedHeaderError):
        read_bundle(path)

    path.write_bytes(b"NOTMAGIC" + bytes(blob[8:]))
    with pytest.raises(MalformedHeaderError):
        read_bundle(path)


def test_format_errors_share_base(tmp_path):
    assert issubclass(ChecksumError, FileFormatError)
    assert issubclass(TruncatedPayloadError, FileFormatError)
    assert issubclass(MalformedHeaderError, FileFormatError)


def test_cell_seeding_isolates_cells():
    """Cell content depends on (seed, domain, class), not on other cells."""
    small = generate_benchmark(5, domains=2, classes=2, n_per_cell=4)
    big = generate_benchmark(5, domains=2, classes=3, n_per_cell=4)
    small_cell = [s.pixels for s in small.samples
                  if s.true_domain == 1 and s.class_label == 1]
    big_cell = [s.pixels for s in big.samples
                if s.true_domain == 1 and s.class_label == 1]
    for a, b in zip(small_cell, big_cell):
        assert np.array_equal(a, b)
