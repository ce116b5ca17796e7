import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diadesk.data import (
    AccessAuditor,
    Dataset,
    DatasetSpec,
    TaskData,
    generate_synthetic,
    load_raw,
    make_task_split,
    write_raw,
)
from diadesk.errors import DatasetError, FormatError

SMALL = DatasetSpec(num_classes=4, train_per_class=20, eval_per_class=10, seed=3)


def test_generation_is_deterministic():
    a, b = generate_synthetic(SMALL), generate_synthetic(SMALL)
    assert a[0] == b[0] and a[1] == b[1]
    other, _ = generate_synthetic(DatasetSpec(num_classes=4, train_per_class=20, eval_per_class=10, seed=4))
    assert not other == a[0]


def test_shapes_and_labels():
    train, eval_ = generate_synthetic(SMALL)
    assert train.images.shape == (80, 16, 16, 1) and train.images.dtype == np.uint8
    assert sorted(set(train.labels)) == [0, 1, 2, 3] and len(eval_) == 40


def test_noise_zero_gives_identical_samples():
    train, _ = generate_synthetic(DatasetSpec(num_classes=3, train_per_class=5, eval_per_class=0, noise=0.0))
    for c in range(3):
        imgs = train.images[train.labels == c]
        assert all(np.array_equal(imgs[0], x) for x in imgs)


def test_nearest_neighbour_beats_chance_but_is_not_perfect_on_pixels():
    train, eval_ = generate_synthetic(DatasetSpec(num_classes=10, train_per_class=50, eval_per_class=20, seed=0))
    a = train.float_images().reshape(len(train), -1)
    b = eval_.float_images().reshape(len(eval_), -1)
    d = (b**2).sum(1)[:, None] - 2 * b @ a.T + (a**2).sum(1)[None]
    acc = np.mean(train.labels[d.argmin(1)] == eval_.labels)
    assert acc > 0.3  # chance is 0.1


def test_raw_round_trip(tmp_path):
    train, _ = generate_synthetic(SMALL)
    write_raw(tmp_path / "d.bin", train)
    assert load_raw(tmp_path / "d.bin") == train
    blob = (tmp_path / "d.bin").read_bytes()
    assert blob[:8] == b"DIARAW01"
    assert len(blob) == 24 + train.images.size + 4 * len(train)


def test_raw_empty_dataset(tmp_path):
    empty = Dataset(np.zeros((0, 4, 4, 2), np.uint8), np.zeros(0, np.int64))
    write_raw(tmp_path / "e.bin", empty)
    out = load_raw(tmp_path / "e.bin")
    assert len(out) == 0 and out.images.shape == (0, 4, 4, 2)


def test_raw_truncation_names_missing_bytes(tmp_path):
    train, _ = generate_synthetic(SMALL)
    write_raw(tmp_path / "d.bin", train)
    blob = (tmp_path / "d.bin").read_bytes()
    (tmp_path / "d.bin").write_bytes(blob[:-7])
    with pytest.raises(FormatError, match="missing 7 bytes") as info:
        load_raw(tmp_path / "d.bin")
    assert info.value.offset == len(blob) - 7
    (tmp_path / "d.bin").write_bytes(blob[:12])
    with pytest.raises(FormatError, match="header truncated, missing 12 bytes"):
        load_raw(tmp_path / "d.bin")


def test_raw_bad_magic(tmp_path):
    (tmp_path / "d.bin").write_bytes(b"XXXXXXXX" + bytes(16))
    with pytest.raises(FormatError):
        load_raw(tmp_path / "d.bin")


def test_dataset_validation():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 4, 4)), np.zeros(2))
    with pytest.raises(DatasetError):
        DatasetSpec(source="web")


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**31))
def test_task_splits_are_disjoint_and_exhaustive(m, t, seed):
    if t > m:
        with pytest.raises(DatasetError):
            make_task_split(m, t, seed)
        return
    split = make_task_split(m, t, seed)
    flat = [c for g in split.groups for c in g]
    assert sorted(flat) == list(range(m)) and split.num_tasks == t
    assert all(len(g) >= 1 for g in split.groups)
    assert max(map(len, split.groups)) - min(map(len, split.groups)) <= 1
    assert split == make_task_split(m, t, seed)


def test_auditor_flags_old_task_reads():
    train, _ = generate_synthetic(SMALL)
    auditor = AccessAuditor()
    old = TaskData(1, train.subset([0, 1]), auditor)
    new = TaskData(2, train.subset([2, 3]), auditor)
    auditor.begin_task(2)
    new.batch([0, 1, 2])
    assert auditor.violations == []
    old.labels()  # metadata only
    assert auditor.violations == []
    old.batch([0])
    assert auditor.violations == [(2, 1, 1)]
