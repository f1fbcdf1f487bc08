import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridens.data import (
    LabeledSample,
    assign_folds,
    load_image_dir,
    load_predictions_csv,
    save_predictions_csv,
    split_dataset,
)
from hybridens.errors import DataError
from hybridens.imageio import write_pgm


def make_samples(n_subjects, slices_per_subject=1, labels=None):
    samples = []
    for s in range(n_subjects):
        label = labels[s] if labels is not None else s % 2
        for i in range(slices_per_subject):
            samples.append(
                LabeledSample(f"s{s:03d}", i, np.zeros((4, 4)) + label * 0.5, label)
            )
    return samples


def partition_subjects(samples, ids):
    return {samples[i].subject_id for i in ids}


def test_split_100_subjects_60_20_20():
    samples = make_samples(100)
    split = split_dataset(samples, (0.6, 0.2, 0.2), seed=7)
    assert (len(split.train_ids), len(split.val_ids), len(split.test_ids)) == (60, 20, 20)


def test_split_keeps_subject_slices_together():
    samples = make_samples(5, slices_per_subject=4)
    split = split_dataset(samples, (0.6, 0.2, 0.2), seed=3)
    groups = [partition_subjects(samples, ids) for ids in
              (split.train_ids, split.val_ids, split.test_ids)]
    for a in range(3):
        for b in range(a + 1, 3):
            assert not (groups[a] & groups[b])
    # every slice lands with its subject
    assert sum(map(len, (split.train_ids, split.val_ids, split.test_ids))) == len(samples)


def test_split_stratifies_exactly_on_balanced_classes():
    # 5 subjects per class at (0.6, 0.2, 0.2) admits only one class layout:
    # 3/3, 1/1, 1/1.  Exhaustively check both classes in every partition.
    samples = make_samples(10, labels=[0] * 5 + [1] * 5)
    for seed in range(20):
        split = split_dataset(samples, (0.6, 0.2, 0.2), seed=seed)
        for ids, want in ((split.train_ids, 3), (split.val_ids, 1), (split.test_ids, 1)):
            labels = [samples[i].label for i in ids]
            assert labels.count(0) == want and labels.count(1) == want


def test_split_deterministic_per_seed():
    samples = make_samples(30, slices_per_subject=2)
    a = split_dataset(samples, (0.6, 0.2, 0.2), seed=11)
    b = split_dataset(samples, (0.6, 0.2, 0.2), seed=11)
    assert (a.train_ids, a.val_ids, a.test_ids) == (b.train_ids, b.val_ids, b.test_ids)
    c = split_dataset(samples, (0.6, 0.2, 0.2), seed=12)
    assert (a.train_ids, a.val_ids, a.test_ids) != (c.train_ids, c.val_ids, c.test_ids)


@settings(max_examples=40, deadline=None)
@given(
    n_subjects=st.integers(3, 40),
    slices=st.integers(1, 5),
    seed=st.integers(0, 2**31),
)
def test_split_partitions_cover_and_never_overlap(n_subjects, slices, seed):
    samples = make_samples(n_subjects, slices_per_subject=slices)
    split = split_dataset(samples, (0.6, 0.2, 0.2), seed=seed)
    all_ids = sorted(split.train_ids + split.val_ids + split.test_ids)
    assert all_ids == list(range(len(samples)))
    assert not (partition_subjects(samples, split.train_ids)
                & partition_subjects(samples, split.val_ids))
    assert not (partition_subjects(samples, split.train_ids)
                & partition_subjects(samples, split.test_ids))
    assert not (partition_subjects(samples, split.val_ids)
                & partition_subjects(samples, split.test_ids))


def test_split_rejects_bad_ratios_and_tiny_datasets():
    samples = make_samples(10)
    with pytest.raises(DataError, match="sum to 1"):
        split_dataset(samples, (0.5, 0.2, 0.2), seed=0)
    with pytest.raises(DataError, match="at least 3 subjects"):
        split_dataset(make_samples(2), (0.6, 0.2, 0.2), seed=0)


def test_assign_folds_even_division():
    samples = make_samples(10)
    folds = assign_folds(samples, list(range(10)), k=5, seed=0)
    sizes = sorted(len(folds.members(f)) for f in range(5))
    assert sizes == [2, 2, 2, 2, 2]


def test_assign_folds_uneven_division():
    samples = make_samples(10)
    folds = assign_folds(samples, list(range(10)), k=3, seed=1)
    sizes = sorted(len(folds.members(f)) for f in range(3))
    assert sizes == [3, 3, 4]


def test_assign_folds_deterministic():
    samples = make_samples(12, slices_per_subject=2)
    ids = list(range(len(samples)))
    a = assign_folds(samples, ids, k=4, seed=9)
    b = assign_folds(samples, ids, k=4, seed=9)
    assert a.fold_of == b.fold_of


def test_assign_folds_groups_subject_slices():
    samples = make_samples(6, slices_per_subject=3)
    ids = list(range(len(samples)))
    folds = assign_folds(samples, ids, k=3, seed=2)
    for subject in {s.subject_id for s in samples}:
        slice_folds = {folds.fold_of[i] for i in ids if samples[i].subject_id == subject}
        assert len(slice_folds) == 1


def test_assign_folds_rejects_k_beyond_subjects():
    samples = make_samples(4)
    with pytest.raises(DataError, match="exceeds"):
        assign_folds(samples, list(range(4)), k=5, seed=0)


def test_load_image_dir_layout(tmp_path):
    (tmp_path / "pos").mkdir()
    (tmp_path / "neg").mkdir()
    write_pgm(tmp_path / "pos" / "s1_00.pgm", np.full((8, 8), 1.0))
    write_pgm(tmp_path / "neg" / "s2_00.pgm", np.zeros((8, 8)))
    samples = load_image_dir(tmp_path)
    assert len(samples) == 2
    by_label = {s.label: s for s in samples}
    assert by_label[1].subject_id == "pos/s1"
    assert by_label[0].subject_id == "neg/s2"
    assert by_label[1].payload[0, 0] == 1.0


def test_load_image_dir_resizes_with_corner_preservation(tmp_path):
    (tmp_path / "pos").mkdir()
    yy, xx = np.mgrid[0:16, 0:16].astype(np.float64)
    ramp = (yy + xx) / 40.0
    write_pgm(tmp_path / "pos" / "s1_00.pgm", ramp)
    stored = load_image_dir(tmp_path, input_side=None)[0].payload
    resized = load_image_dir(tmp_path, input_side=32)[0].payload
    assert resized.shape == (32, 32)
    assert resized[0, 0] == stored[0, 0]
    assert resized[-1, -1] == stored[-1, -1]


def test_load_image_dir_rejections(tmp_path):
    with pytest.raises(DataError, match="no samples"):
        (tmp_path / "pos").mkdir()
        load_image_dir(tmp_path)
    (tmp_path / "maybe").mkdir()
    with pytest.raises(DataError, match="unknown label directory"):
        load_image_dir(tmp_path)
    (tmp_path / "maybe").rmdir()
    bad = tmp_path / "pos" / "s1_00.pgm"
    bad.write_bytes(b"not an image")
    with pytest.raises(DataError, match="s1_00.pgm"):
        load_image_dir(tmp_path)


def test_load_image_dir_ignores_root_files(tmp_path):
    (tmp_path / "pos").mkdir()
    write_pgm(tmp_path / "pos" / "s1_00.pgm", np.zeros((4, 4)))
    (tmp_path / "blobs.json").write_text("{}")
    assert len(load_image_dir(tmp_path)) == 1


def test_predictions_csv_shape(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("id,p1,p2,label\na,0.1,0.9,1\nb,0.4,0.6,0\nc,0.5,0.5,1\n")
    matrix, labels, ids = load_predictions_csv(path)
    assert matrix.shape == (3, 2)
    assert labels.tolist() == [1, 0, 1]
    assert ids == ["a", "b", "c"]


def test_predictions_csv_k_inferred_from_header(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("id,p1,p2,p3,label\na,0.1,0.2,0.3,0\n")
    matrix, _, _ = load_predictions_csv(path)
    assert matrix.shape == (1, 3)


def test_predictions_csv_rejections_name_the_line(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("id,p1,p2,label\na,0.1,0.9,1\nb,1.2,0.3,0\n")
    with pytest.raises(DataError, match=r"p\.csv:3"):
        load_predictions_csv(path)
    path.write_text("id,p1,p2,label\na,0.1,1\n")
    with pytest.raises(DataError, match=r"p\.csv:2"):
        load_predictions_csv(path)
    path.write_text("id,p1,p2,label\na,0.1,0.9,2\n")
    with pytest.raises(DataError, match="label must be 0 or 1"):
        load_predictions_csv(path)


def test_predictions_csv_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    matrix = rng.random((6, 3))
    labels = rng.integers(0, 2, 6)
    path = tmp_path / "p.csv"
    save_predictions_csv(path, matrix, labels, [f"r{i}" for i in range(6)])
    back, back_labels, ids = load_predictions_csv(path)
    assert np.array_equal(back, matrix)
    assert np.array_equal(back_labels, labels)
    assert ids == [f"r{i}" for i in range(6)]
