import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from promptseg.data import (
    DatasetIOError,
    DatasetManifest,
    GenerationError,
    SampleLoadError,
    TaskSpec,
    build_dataset,
    default_tasks,
    load_sample,
    quantize,
    split_partition,
    synth_image,
)
from promptseg.rng import CounterRNG, fnv1a64, splitmix64


def test_counter_rng_reference_values():
    # SplitMix64 reference: first outputs for seed 0 (Vigna's splitmix64.c)
    rng = CounterRNG(0)
    assert [int(v) for v in rng.raw(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]
    assert splitmix64(0) == 0xE220A8397B1DCDAF


def test_fnv1a_reference():
    assert fnv1a64("") == 0xCBF29CE484222325
    assert fnv1a64("a") == 0xAF63DC4C8601EC8C


def test_rng_uniform_range_and_determinism():
    a = CounterRNG(42).uniform(10000)
    b = CounterRNG(42).uniform(10000)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() < 1.0
    assert abs(a.mean() - 0.5) < 0.01


def test_task_prompts_follow_template(tasks):
    assert tasks[0].prompt_text == "Segment the bright-ellipse in the ultrasound image."
    assert len({t.prompt_text for t in tasks}) == len(tasks)


def test_synth_is_deterministic(tasks):
    a = synth_image(tasks, 99, (64, 64))
    b = synth_image(tasks, 99, (64, 64))
    assert a.image.tobytes() == b.image.tobytes()
    for k in a.masks:
        assert a.masks[k].tobytes() == b.masks[k].tobytes()


@pytest.mark.parametrize("seed", range(30))
def test_synth_contract(tasks, seed):
    s = synth_image(tasks, seed, (64, 48))
    h, w = 64, 48
    assert s.image.shape == (h, w, 3)
    assert s.image.min() >= 0 and s.image.max() <= 1
    m0, m1 = s.masks[0], s.masks[1]
    for m in (m0, m1):
        assert set(np.unique(m)) <= {0, 1}
        assert 0.02 * h * w <= m.sum() <= 0.30 * h * w
    inter = (m0 & m1).sum()
    assert inter <= 0.10 * min(m0.sum(), m1.sum())
    # prompt necessity: masks differ on >= 90% of the smaller structure
    smaller = min(m0.sum(), m1.sum())
    differ = ((m0 ^ m1) & ((m0 if m0.sum() == smaller else m1) == 1)).sum()
    assert differ >= 0.9 * smaller


def test_synth_polarity(tasks):
    s = synth_image(tasks, 5, (64, 64))
    img = s.image[..., 0]
    bg = img[(s.masks[0] == 0) & (s.masks[1] == 0)].mean()
    assert img[s.masks[0] == 1].mean() > bg
    assert img[s.masks[1] == 1].mean() < bg


def test_synth_needs_two_tasks(tasks):
    with pytest.raises(ValueError):
        synth_image(tasks[:1], 0, (64, 64))


def test_synth_too_small_for_many_structures():
    many = default_tasks(12)
    with pytest.raises(GenerationError, match="bound"):
        synth_image(many, 0, (32, 32))


def test_build_dataset_counts(tmp_path, tasks):
    m = build_dataset(8, tasks, (32, 32), 1, tmp_path)
    assert len(m.samples) == 8
    assert len(list((tmp_path / "masks").rglob("*.png"))) == 16
    assert (tmp_path / "manifest.json").exists()
    for s in m.samples:
        assert (tmp_path / s.image).exists()
        assert s.task_ids == [0, 1]


def test_build_dataset_rebuild_identical(tmp_path, tasks):
    build_dataset(8, tasks, (32, 32), 5, tmp_path / "a")
    build_dataset(8, tasks, (32, 32), 5, tmp_path / "b")
    assert (tmp_path / "a/manifest.json").read_text() == (tmp_path / "b/manifest.json").read_text()
    assert (tmp_path / "a/images/s00003.png").read_bytes() == (tmp_path / "b/images/s00003.png").read_bytes()


def test_build_dataset_unwritable(tmp_path, tasks):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DatasetIOError):
        build_dataset(8, tasks, (32, 32), 1, blocker / "sub")


def test_sample_regenerable_in_isolation(small_dataset, tasks):
    from promptseg.data import sample_seed

    loaded = load_sample(small_dataset, "s00007")
    fresh = synth_image(tasks, sample_seed(123, 7), (32, 32))
    assert np.array_equal(loaded.image, quantize(fresh.image) / 255.0)
    for k in fresh.masks:
        assert np.array_equal(loaded.masks[k], fresh.masks[k])


def test_manifest_preserves_unknown_fields(small_dataset, tmp_path):
    d = small_dataset.to_dict()
    d["annotator"] = {"name": "x"}
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(d))
    m = DatasetManifest.load(path)
    m.save(tmp_path / "again.json")
    assert json.loads((tmp_path / "again.json").read_text())["annotator"] == {"name": "x"}


def test_load_unknown_id(small_dataset):
    with pytest.raises(KeyError):
        load_sample(small_dataset, "nope")


def test_load_rejects_grey_mask(small_dataset, tmp_path):
    import shutil

    root = tmp_path / "copy"
    shutil.copytree(small_dataset.root, root)
    m = DatasetManifest.load(root)
    rel = m.samples[0].masks[0]
    arr = np.asarray(Image.open(root / rel)).copy()
    arr[0, 0] = 128
    Image.fromarray(arr).save(root / rel)
    with pytest.raises(SampleLoadError, match=rel.split("/")[-1]):
        load_sample(m, m.samples[0].sample_id)


def test_load_missing_file(small_dataset, tmp_path):
    import shutil

    root = tmp_path / "copy"
    shutil.copytree(small_dataset.root, root)
    m = DatasetManifest.load(root)
    (root / m.samples[1].image).unlink()
    with pytest.raises(SampleLoadError, match=m.samples[1].sample_id):
        load_sample(m, m.samples[1].sample_id)


def _fake_manifest(n):
    from promptseg.data import SampleEntry

    samples = [SampleEntry(f"s{i:05d}", f"images/s{i:05d}.png", {0: "", 1: ""}) for i in range(n)]
    return DatasetManifest(default_tasks(2), samples, (64, 64), "x", 0)


def test_split_counts_quarter():
    s = split_partition(_fake_manifest(800), Fraction(1, 4), 0)
    assert (len(s.test_ids), len(s.labeled_ids), len(s.unlabeled_ids)) == (200, 150, 450)


def test_split_counts_sixteenth_rounds_half_up():
    s = split_partition(_fake_manifest(800), Fraction(1, 16), 0)
    assert len(s.labeled_ids) + len(s.unlabeled_ids) == 600
    assert len(s.labeled_ids) == 38


def test_split_deterministic():
    m = _fake_manifest(100)
    assert split_partition(m, Fraction(1, 8), 3) == split_partition(m, Fraction(1, 8), 3)
    assert split_partition(m, Fraction(1, 8), 3) != split_partition(m, Fraction(1, 8), 4)


def test_split_errors():
    m = _fake_manifest(8)
    with pytest.raises(ValueError):
        split_partition(m, Fraction(1, 16), 0)  # 6 train * 1/16 -> 0
    with pytest.raises(ValueError):
        split_partition(m, 1, 0)


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(8, 300),
    frac=st.sampled_from([Fraction(1, 16), Fraction(1, 8), Fraction(1, 4), Fraction(1, 2), Fraction(3, 5)]),
    seed=st.integers(0, 2**64 - 1),
)
def test_split_soundness(n, frac, seed):
    m = _fake_manifest(n)
    try:
        s = split_partition(m, frac, seed)
    except ValueError:
        return
    lab, unl, test = set(s.labeled_ids), set(s.unlabeled_ids), set(s.test_ids)
    assert not (lab & unl) and not (lab & test) and not (unl & test)
    assert lab | unl | test == set(m.sample_ids)
    n_train = len(lab) + len(unl)
    import math

    assert len(lab) == math.floor(frac * n_train + Fraction(1, 2))


def test_taskspec_custom_prompt():
    t = TaskSpec(3, "x", "custom")
    assert t.prompt_text == "custom"
