from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from switchkd.data import (DatasetSpec, Task, batch_iterate, collate, generate, label_set, load, persist,
                           read_regions, rule_label)
from switchkd.errors import ContractError, DatasetParseError, GenerationError, ShapeError


@pytest.mark.parametrize("task", list(Task))
def test_same_seed_gives_identical_bytes(tmp_path, task):
    spec = DatasetSpec(task=task, n_train=50, n_val=20, seed=42)
    a_train, _ = generate(spec)
    b_train, _ = generate(spec)
    persist(a_train, tmp_path / "a.jsonl")
    persist(b_train, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_different_seeds_differ():
    a, _ = generate(DatasetSpec(n_train=20, n_val=5, seed=1))
    b, _ = generate(DatasetSpec(n_train=20, n_val=5, seed=2))
    assert a != b


@pytest.mark.parametrize("task", list(Task))
def test_rule_labeler_agrees_at_zero_noise(task):
    train, val = generate(DatasetSpec(task=task, n_train=300, n_val=100, seed=5))
    for s in train + val:
        assert rule_label(s.image, s.prompt) == s.answer[0]


def test_noise_flips_training_labels_only():
    spec = DatasetSpec(n_train=200, n_val=100, seed=6, noise_level=0.25)
    train, val = generate(spec)
    wrong = sum(rule_label(s.image, s.prompt) != s.answer[0] for s in train)
    assert wrong == 50
    assert all(rule_label(s.image, s.prompt) == s.answer[0] for s in val)


@pytest.mark.parametrize("task", list(Task))
def test_splits_are_disjoint(task):
    train, val = generate(DatasetSpec(task=task, n_train=200, n_val=100, seed=7))
    assert not {s.id for s in train} & {s.id for s in val}
    assert not {s.content_key() for s in train} & {s.content_key() for s in val}


@pytest.mark.parametrize("task", list(Task))
def test_class_balance(task):
    train, _ = generate(DatasetSpec(task=task, n_train=600, n_val=10, seed=8))
    labels = label_set(task)
    counts = Counter(s.answer[0] for s in train)
    expected = len(train) / len(labels)
    assert set(counts) <= set(labels)
    for lab in labels:
        assert abs(counts[lab] - expected) <= 0.2 * expected


@pytest.mark.parametrize("task", list(Task))
def test_images_hold_one_to_four_rectangles(task):
    train, _ = generate(DatasetSpec(task=task, n_train=200, n_val=10, seed=9))
    for s in train:
        assert s.image.min() >= 0 and s.image.max() <= 1
        filled = sum(r is not None for r in read_regions(s.image))
        assert 1 <= filled <= 4


def test_impossible_geometry():
    with pytest.raises(GenerationError):
        generate(DatasetSpec(n_train=2, n_val=2, image_size=(5, 5, 3)))


def test_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec(n_train=0)
    with pytest.raises(ValueError):
        DatasetSpec(noise_level=1.0)
    with pytest.raises(ValueError):
        DatasetSpec(task="count-everything")


def test_batch_sizes_and_coverage(small_data):
    samples = small_data[0][:10]
    assert [len(b) for b in batch_iterate(samples, 3)] == [3, 3, 3, 1]
    first = [s.id for b in batch_iterate(samples, 3, shuffle_seed=4) for s in b]
    second = [s.id for b in batch_iterate(samples, 3, shuffle_seed=4) for s in b]
    assert first == second
    assert sorted(first) == sorted(s.id for s in samples)


def test_batch_errors(small_data):
    with pytest.raises(ContractError):
        list(batch_iterate([], 3))
    with pytest.raises(ContractError):
        list(batch_iterate(small_data[0], 0))


def test_collate_shifts_targets(small_data):
    batch = collate(small_data[0][:3])
    s = small_data[0][0]
    seq = list(s.prompt) + list(s.answer)
    np.testing.assert_array_equal(batch.text[0], seq[:-1])
    np.testing.assert_array_equal(batch.targets[0], seq[1:])
    assert batch.mask[0].sum() == len(s.answer) and batch.mask[0, -1]
    longer = replace(s, answer=s.answer + (2,))
    with pytest.raises(ShapeError):
        collate([s, longer])


def test_persist_round_trip_1000(tmp_path):
    train, _ = generate(DatasetSpec(n_train=1000, n_val=5, seed=11))
    path = persist(train, tmp_path / "d.jsonl", meta={"split": "train"})
    back = load(path)
    assert back == train
    assert [s.id for s in back] == [s.id for s in train]


def test_truncated_file_names_the_line(tmp_path):
    train, _ = generate(DatasetSpec(n_train=5, n_val=1, seed=12))
    path = persist(train, tmp_path / "d.jsonl")
    text = path.read_text()
    path.write_text(text[: len(text) - 40])
    with pytest.raises(DatasetParseError, match="line 6"):
        load(path)


def test_bad_header(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"format": "other"}\n')
    with pytest.raises(DatasetParseError, match="line 1"):
        load(path)
