import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irfuse.dataset import (
    SCUTSEG_CLASSES,
    SODA_CLASSES,
    CompositeView,
    DatasetError,
    DatasetVariant,
    ImageSample,
    augment_arrays,
    binarize_mask,
    build_validation_set,
    crop_resize_augment,
    hflip,
    load_dataset,
    load_generated,
    make_eval_view,
    make_folds,
    make_view,
    preprocess_ir,
    read_folds,
    remap_for_base_stage,
    rgb_to_lightness,
    sample_episode,
    save_image,
    save_mask,
    split_variants,
    write_folds,
)
from irfuse.synthetic import CLASS_NAMES, write_synthetic_dataset

from conftest import fake_generated


def _write_tree(root, stems, classes, size=16, skip_mask=None, bad_value=None):
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir(parents=True)
    rng = np.random.default_rng(0)
    for i, stem in enumerate(stems):
        save_image(root / "images" / f"{stem}.png", rng.random((1, size, size)))
        if stem == skip_mask:
            continue
        m = np.zeros((size, size), np.int64)
        m[:6, :6] = 1 + i % (len(classes) - 1)
        if stem == bad_value:
            m[0, 0] = len(classes) + 3
        save_mask(root / "masks" / f"{stem}.png", m)
    (root / "classes.txt").write_text("\n".join(classes) + "\n")


# --- loading ---------------------------------------------------------------


def test_synthetic_fixture_round_trip(tmp_path):
    write_synthetic_dataset(tmp_path, n=8, size=32)
    samples, names = load_dataset(tmp_path, "synthetic")
    assert len(samples) == 8
    assert names[1:] == CLASS_NAMES and len(names[1:]) == 4
    for s in samples:
        assert s.image.shape[1:] == s.mask.shape
        assert 0 <= s.image.min() and s.image.max() <= 1
        assert set(np.unique(s.mask)) - {0} <= s.class_set


def test_missing_mask_names_stem(tmp_path):
    _write_tree(tmp_path, ["a", "b", "lonely"], ["background"] + SODA_CLASSES, skip_mask="lonely")
    with pytest.raises(DatasetError, match="lonely"):
        load_dataset(tmp_path, "soda")


def test_unknown_class_index(tmp_path):
    _write_tree(tmp_path, ["a", "b"], ["background", "x", "y"], bad_value="b")
    with pytest.raises(DatasetError, match="unknown class"):
        load_dataset(tmp_path, "synthetic")


def test_bad_root(tmp_path):
    with pytest.raises(DatasetError, match="nowhere"):
        load_dataset(tmp_path / "nowhere", "synthetic")


def test_scutseg_road_becomes_background(tmp_path):
    raw = ["background", "Road", "Person", "Rider", "Car", "Truck", "Fence", "Tree", "Bus", "Pole"]
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    m = np.zeros((16, 16), np.int64)
    m[:8] = 1  # Road
    m[8:, :8] = 2  # Person
    save_image(tmp_path / "images" / "x.png", np.full((1, 16, 16), 0.5))
    save_mask(tmp_path / "masks" / "x.png", m)
    (tmp_path / "classes.txt").write_text("\n".join(raw) + "\n")
    (s,), names = load_dataset(tmp_path, "scutseg")
    assert names[1:] == SCUTSEG_CLASSES
    assert (s.mask[:8] == 0).all()
    assert (s.mask[8:, :8] == names.index("Person")).all()


def test_generated_variant_stems_and_sources(tmp_path):
    write_synthetic_dataset(tmp_path, n=6, size=32)
    samples, _ = load_dataset(tmp_path, "synthetic")
    for sub in ("ir_l", "rgb_l"):
        (tmp_path / "generated" / sub).mkdir(parents=True)
        for s in samples:
            ch = 3 if sub.startswith("rgb") else 1
            save_image(tmp_path / "generated" / sub / f"{s.id}.png", np.full((ch, 32, 32), 0.3))
    ir_l = load_generated(tmp_path, "IR_L", samples)
    rgb_l = load_generated(tmp_path, "RGB_L", samples)
    assert len(ir_l) == len(samples) and rgb_l.samples[0].image.shape[0] == 3
    for g in rgb_l.samples:
        src = rgb_l.source_map[g.id]
        assert src in {x.id for x in ir_l.samples}
        assert np.array_equal(g.mask, ir_l.get(src).mask)
    with pytest.raises(DatasetError, match="rgb_ir"):
        load_generated(tmp_path, "RGB_IR", samples)


# --- folds -----------------------------------------------------------------


def test_soda_fold0():
    folds = make_folds(SODA_CLASSES, 4)
    assert folds[0].test_classes == {"Person", "Building", "Tree", "Road", "Pole"}


def test_scutseg_fold3():
    assert make_folds(SCUTSEG_CLASSES, 4)[3].test_classes == {"Fence", "Tree"}


def test_four_classes_four_folds():
    folds = make_folds(CLASS_NAMES, 4)
    assert [len(f.test_classes) for f in folds] == [1, 1, 1, 1]


def test_fold_errors():
    with pytest.raises(DatasetError):
        make_folds(["a", "b"], 3)
    with pytest.raises(DatasetError):
        make_folds(["a", "b"], 1)


@given(st.integers(2, 30), st.data())
def test_fold_partition(n_classes, data):
    names = [f"c{i}" for i in range(n_classes)]
    n_folds = data.draw(st.integers(2, n_classes))
    folds = make_folds(names, n_folds)
    union = set()
    for f in folds:
        assert not (f.test_classes & union)
        assert f.test_classes.isdisjoint(f.train_classes)
        assert f.test_classes | f.train_classes == set(names)
        union |= f.test_classes
    assert union == set(names)


def test_fold_file_round_trip(tmp_path):
    folds = make_folds(SODA_CLASSES, 4)
    write_folds(tmp_path / "folds.json", folds)
    assert read_folds(tmp_path / "folds.json") == folds


# --- masks -----------------------------------------------------------------


def test_binarize_mask():
    c = 3
    assert binarize_mask(np.full((2, 2), c), c).tolist() == [[1, 1], [1, 1]]
    assert binarize_mask(np.zeros((2, 2), int), c).sum() == 0
    assert binarize_mask(np.array([[c, 0], [0, c]]), c).tolist() == [[1, 0], [0, 1]]


def test_remap_for_base_stage():
    mask = np.array([[0, 1, 2], [3, 4, 2]])
    same, table = remap_for_base_stage(mask, [], 5)
    assert np.array_equal(same, mask) and table == [0, 1, 2, 3, 4]
    empty, _ = remap_for_base_stage(mask, [1, 2, 3, 4], 5)
    assert (empty == 0).all()
    base, table = remap_for_base_stage(mask, [2], 5)
    assert base.tolist() == [[0, 1, 0], [2, 3, 0]]
    assert table == [0, 1, 3, 4]


def test_remap_soda_fold0_heldout():
    names = ["background"] + SODA_CLASSES
    held = [names.index(n) for n in make_folds(SODA_CLASSES, 4)[0].test_classes]
    mask = np.arange(len(names)).reshape(3, 7)
    base, table = remap_for_base_stage(mask, held, len(names))
    assert (base.flat[held] == 0).all()
    assert sorted(set(base.flat)) == list(range(len(names) - len(held)))


# --- preprocessing ---------------------------------------------------------


def test_preprocess_identity():
    img = np.random.default_rng(1).random((1, 20, 20))
    assert np.allclose(preprocess_ir(img, gamma=1.0, clahe=None), img, atol=0, rtol=0)


def test_preprocess_constant_power():
    img = np.full((1, 8, 8), 0.36)
    assert np.allclose(preprocess_ir(img, gamma=0.5, clahe=None), 0.6)


def test_preprocess_bad_gamma():
    with pytest.raises(DatasetError):
        preprocess_ir(np.zeros((1, 8, 8)), gamma=0)


def _entropy64(x):
    h, _ = np.histogram(x, bins=64, range=(0, 1))
    p = h[h > 0] / h.sum()
    return -(p * np.log(p)).sum()


def test_clahe_flattens_ramp():
    # a compressed ramp occupies a few bins; equalization must spread it
    ramp = np.tile(np.linspace(0.4, 0.6, 64), (64, 1))[None]
    out = preprocess_ir(ramp, gamma=1.0, clahe={"clip_limit": 2.0, "tile_grid": (8, 8)})
    assert 0 <= out.min() and out.max() <= 1
    assert _entropy64(out) >= _entropy64(ramp)


def _lightness_oracle(r, g, b):
    def lin(c):
        return c / 12.92 if c <= 0.04045 else ((c + 0.055) / 1.055) ** 2.4

    y = 0.2126729 * lin(r) + 0.7151522 * lin(g) + 0.0721750 * lin(b)
    eps = (6 / 29) ** 3
    f = y ** (1 / 3) if y > eps else y / (3 * (6 / 29) ** 2) + 4 / 29
    return (116 * f - 16) / 100


def test_lightness_oracle_values():
    assert _lightness_oracle(0.5, 0.5, 0.5) == pytest.approx(0.5339, abs=1e-4)
    for rgb, expect in (((1, 1, 1), 1.0), ((0, 0, 0), 0.0), ((0.5, 0.5, 0.5), 0.5339)):
        out = rgb_to_lightness(np.array(rgb, float)[:, None, None] * np.ones((3, 2, 2)))
        assert out.shape == (1, 2, 2)
        assert out[0, 0, 0] == pytest.approx(expect, abs=1e-4)


@settings(max_examples=50)
@given(st.tuples(*[st.floats(0, 1)] * 3))
def test_lightness_matches_oracle(rgb):
    out = rgb_to_lightness(np.array(rgb)[:, None, None] * np.ones((3, 1, 1)))
    assert out[0, 0, 0] == pytest.approx(_lightness_oracle(*rgb), abs=1e-4)


# --- augmentation ----------------------------------------------------------


def _sample(h=40, w=48, seed=0):
    rng = np.random.default_rng(seed)
    mask = np.zeros((h, w), np.int64)
    mask[5:20, 10:30] = 2
    mask[25:35, 5:15] = 1
    return ImageSample("s", rng.random((1, h, w)).astype(np.float32), mask)


def test_eval_crop_deterministic():
    s = _sample()
    a = crop_resize_augment(s, 32, False)
    b = crop_resize_augment(s, 32, False)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
    assert a.image.shape == (1, 32, 32)


def test_hflip_involution():
    s = _sample()
    twice = hflip(hflip(s))
    assert np.array_equal(twice.image, s.image) and np.array_equal(twice.mask, s.mask)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_train_augment_no_new_labels(seed):
    s = _sample()
    out = crop_resize_augment(s, 32, True, np.random.default_rng(seed))
    assert out.class_set <= s.class_set
    assert out.image.shape == (1, 32, 32) and 0 <= out.image.min() and out.image.max() <= 1


def test_degenerate_image():
    with pytest.raises(DatasetError):
        augment_arrays([np.zeros((1, 4, 20))], np.zeros((4, 20), int), 4, False)


# --- episodes --------------------------------------------------------------


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = write_synthetic_dataset(tmp_path_factory.mktemp("syn"), n=48, size=64)
    samples, names = load_dataset(root, "synthetic")
    return samples, names


def test_view_sizes(synth):
    samples, names = synth
    variants = fake_generated(samples)
    assert len(make_view(variants, "baseline", names)) == len(samples)
    assert len(make_view(variants, "method1", names)) == 2 * len(samples)
    m3 = make_view(variants, "method3", names)
    assert len(m3) == 2 * len(samples) and len(m3.all_samples()) == 4 * len(samples)
    with pytest.raises(DatasetError, match="RGB_L"):
        make_view({k: v for k, v in variants.items() if k != "RGB_L"}, "method3", names)


def test_episode_shots(synth):
    samples, names = synth
    view = CompositeView([DatasetVariant("IR", samples)], names)
    fold = make_folds(names[1:], 4)[0]
    e1 = sample_episode(view, fold, 1, "meta_eval", 3)
    assert e1.k_shot == 1 and e1.aux_query is None
    e5 = sample_episode(view, fold, 5, "meta_train", 3)
    assert e5.k_shot == 5 and len(set(e5.ids)) == 6


def test_episode_determinism(synth):
    samples, names = synth
    view = CompositeView([DatasetVariant("IR", samples)], names)
    fold = make_folds(names[1:], 4)[1]
    assert sample_episode(view, fold, 2, "meta_train", 11).ids == sample_episode(view, fold, 2, "meta_train", 11).ids
    a = build_validation_set(view, fold, 20, seed=4)
    b = build_validation_set(view, fold, 20, seed=4)
    assert [e.ids for e in a] == [e.ids for e in b]
    assert build_validation_set(view, fold, 0, seed=4) == []


def test_episode_no_carriers(synth):
    samples, names = synth
    view = CompositeView([DatasetVariant("IR", samples[:2])], names)
    with pytest.raises(DatasetError, match="candidates"):
        sample_episode(view, make_folds(names[1:], 4)[0], 5, "meta_eval", 0)


def test_episode_soundness_many_seeds(synth):
    samples, names = synth
    variants = fake_generated(samples)
    view = make_view(variants, "method3", names)
    folds = make_folds(names[1:], 4)
    rng = np.random.default_rng(0)
    for i in range(10_000):
        fold = folds[i % 4]
        stage = "meta_train" if i % 2 else "meta_eval"
        e = sample_episode(view, fold, 1 + i % 3, stage, int(rng.integers(1 << 30)))
        allowed = fold.train_classes if stage == "meta_train" else fold.test_classes
        assert names[e.target_class] in allowed
        assert e.query_mask.sum() > 0 and all(m.sum() > 0 for _, m in e.supports)
        # pairing integrity: aux ids resolve to the IR-domain ids
        for sid, aid in zip(e.support_ids + [e.query_id], e.aux_support_ids + [e.aux_query_id]):
            kind = "RGB_L" if sid.startswith("ir_l/") else "RGB_IR"
            assert variants[kind].source_map[aid] == sid
        assert e.aux_query.shape[1:] == e.query_image.shape[1:]


def test_base_mask_hides_test_classes(synth):
    samples, names = synth
    view = CompositeView([DatasetVariant("IR", samples)], names)
    fold = make_folds(names[1:], 4)[2]
    held = names.index(next(iter(fold.test_classes)))
    for seed in range(50):
        e = sample_episode(view, fold, 1, "meta_train", seed)
        q = next(s for s in samples if s.id == e.query_id)
        assert (e.base_mask[q.mask == held] == 0).all()
        assert e.base_target > 0


def test_split_and_eval_view(synth):
    samples, names = synth
    variants = fake_generated(samples)
    stems = [s.id for s in samples[:10]]
    sub = split_variants(variants, stems)
    assert all(len(v) == 10 for v in sub.values())
    ev = make_eval_view(sub, "method3", names)
    assert len(ev) == 10 and set(ev.aux) == {"IR"}
    assert make_eval_view(sub, "method1", names).aux == {}
