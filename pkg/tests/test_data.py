"""Case handling, normalization, augmentation, and the phantom generator."""

import numpy as np
import pytest

from voxseg.data import (
    AugmentConfig,
    CaseRecord,
    MODALITY_NAMES,
    PhantomSpec,
    _rotate,
    _scale,
    _warp,
    augment,
    generate_phantom,
    normalize,
    random_crop,
    read_case,
    read_dataset_manifest,
    write_case,
    write_dataset_manifest,
)
from voxseg.errors import ConfigError, InputError, ParseError, ShapeError
from voxseg.metrics import LabelVolume, region_mask
from voxseg.tensor import Tensor

from oracles import connected_components_oracle


def make_case(rng, shape=(6, 6, 6), with_labels=True, case_id="c0"):
    mods = tuple(Tensor(rng.uniform(0.5, 1.5, shape)) for _ in range(4))
    labels = LabelVolume(rng.choice([0, 1, 2, 4], size=shape)) if with_labels else None
    return CaseRecord(case_id, mods, labels)


def inert_config(**overrides):
    base = dict(rotation_degrees=0.0, scale_factor=1.0, scale_probability=0.0,
                flip_probability=0.0, intensity_shift=0.0, elastic_amplitude=0.0)
    base.update(overrides)
    return AugmentConfig(**base)


# ----- case records ------------------------------------------------------


def test_case_requires_four_matching_modalities():
    t = Tensor(np.ones((4, 4, 4)))
    with pytest.raises(InputError, match="4 modalities"):
        CaseRecord("c", (t, t, t))
    with pytest.raises(ShapeError, match="t1ce"):
        CaseRecord("c", (t, Tensor(np.ones((4, 4, 5))), t, t))
    with pytest.raises(ShapeError, match="labels"):
        CaseRecord("c", (t, t, t, t), LabelVolume(np.zeros((5, 5, 5), int)))


def test_modality_stack_shape():
    case = make_case(np.random.default_rng(0))
    s = case.modality_stack()
    assert s.shape == (4, 6, 6, 6)
    assert np.array_equal(s[2], case.modalities[2].numpy())


# ----- normalization -----------------------------------------------------


def test_normalize_moments_and_background():
    rng = np.random.default_rng(1)
    raw = rng.uniform(0.5, 1.5, (6, 6, 6))
    raw[:2] = 0.0
    case = CaseRecord("c", tuple(Tensor(raw.copy()) for _ in range(4)))
    out = normalize(case)
    for m in out.modalities:
        v = m.numpy()
        assert np.all(v[:2] == 0.0)
        fg = v[raw != 0.0]
        assert abs(fg.mean()) < 1e-9 and abs(fg.std() - 1.0) < 1e-9


def test_normalize_two_value_foreground():
    raw = np.zeros((4, 4, 4))
    raw[0] = 2.0
    raw[1] = 6.0
    case = CaseRecord("c", tuple(Tensor(raw.copy()) for _ in range(4)))
    v = normalize(case).modalities[0].numpy()
    assert np.allclose(np.unique(v), [-1.0, 0.0, 1.0])


def test_normalize_constant_foreground_maps_to_zero():
    raw = np.zeros((4, 4, 4))
    raw[1:3] = 7.0
    case = CaseRecord("c", tuple(Tensor(raw.copy()) for _ in range(4)))
    v = normalize(case).modalities[0].numpy()
    assert np.all(v == 0.0)


def test_normalize_idempotent():
    case = make_case(np.random.default_rng(2))
    once = normalize(case)
    twice = normalize(once)
    for a, b in zip(once.modalities, twice.modalities):
        assert np.max(np.abs(a.numpy() - b.numpy())) < 1e-9


def test_normalize_rejects_all_zero_modality():
    zero = Tensor(np.zeros((4, 4, 4)))
    ok = Tensor(np.ones((4, 4, 4)))
    case = CaseRecord("c", (ok, zero, ok, ok))
    with pytest.raises(InputError, match="t1ce"):
        normalize(case)


# ----- augmentation ------------------------------------------------------


def test_inert_config_is_bitwise_identity():
    case = make_case(np.random.default_rng(3))
    out = augment(case, inert_config(), np.random.default_rng(0))
    for a, b in zip(case.modalities, out.modalities):
        assert np.array_equal(a.numpy(), b.numpy())
    assert np.array_equal(case.labels.voxels, out.labels.voxels)


def test_augment_fixed_seed_is_deterministic():
    case = make_case(np.random.default_rng(4))
    cfg = AugmentConfig()
    a = augment(case, cfg, np.random.default_rng(7))
    b = augment(case, cfg, np.random.default_rng(7))
    for ma, mb in zip(a.modalities, b.modalities):
        assert np.array_equal(ma.numpy(), mb.numpy())
    assert np.array_equal(a.labels.voxels, b.labels.voxels)


def test_forced_flip_twice_is_identity():
    case = make_case(np.random.default_rng(5))
    cfg = inert_config(flip_probability=1.0)
    out = augment(augment(case, cfg, np.random.default_rng(0)), cfg,
                  np.random.default_rng(1))
    for a, b in zip(case.modalities, out.modalities):
        assert np.array_equal(a.numpy(), b.numpy())
    assert np.array_equal(case.labels.voxels, out.labels.voxels)


def test_forced_flip_moves_images_and_labels_together():
    case = make_case(np.random.default_rng(6))
    out = augment(case, inert_config(flip_probability=1.0), np.random.default_rng(0))
    want = np.flip(case.modalities[0].numpy(), axis=(0, 1, 2))
    assert np.array_equal(out.modalities[0].numpy(), want)
    assert np.array_equal(out.labels.voxels, np.flip(case.labels.voxels, axis=(0, 1, 2)))


def test_quarter_turn_matches_rot90():
    rng = np.random.default_rng(8)
    vol = rng.random((4, 4, 4))
    got = _rotate(vol, 90.0, axis=0, order=0)
    candidates = [np.rot90(vol, k, axes=(1, 2)) for k in (1, 3)]
    assert any(np.array_equal(got, c) for c in candidates)
    got1 = _rotate(vol, 90.0, axis=0, order=1)
    assert any(np.allclose(got1, c, atol=1e-12) for c in candidates)


def test_zoom_of_constant_volume_is_constant():
    vol = np.full((6, 6, 6), 3.25)
    assert np.allclose(_scale(vol, 1.1, order=1), 3.25, atol=1e-12)


def test_warp_with_unit_shift_relabels_coordinates():
    rng = np.random.default_rng(9)
    vol = rng.random((5, 5, 5))
    disp = np.zeros((3, 5, 5, 5))
    disp[0] = 1.0
    out = _warp(vol, disp, order=1)
    assert np.allclose(out[:4], vol[1:], atol=1e-12)
    assert np.all(out[4] == 0.0)


def test_identical_modalities_transform_identically():
    rng = np.random.default_rng(10)
    vol = rng.uniform(0.5, 1.5, (6, 6, 6))
    mods = tuple(Tensor(vol.copy()) for _ in range(4))
    case = CaseRecord("c", mods, LabelVolume(np.zeros((6, 6, 6), int)))
    cfg = AugmentConfig(intensity_shift=0.0)
    out = augment(case, cfg, np.random.default_rng(11))
    base = out.modalities[0].numpy()
    for m in out.modalities[1:]:
        assert np.array_equal(m.numpy(), base)


def test_augmented_labels_stay_legal():
    rng = np.random.default_rng(12)
    for seed in range(5):
        case = make_case(rng, shape=(8, 8, 8))
        out = augment(case, AugmentConfig(), np.random.default_rng(seed))
        assert set(np.unique(out.labels.voxels)) <= {0, 1, 2, 4}


def test_augment_config_validation():
    with pytest.raises(ConfigError, match="flip_probability"):
        AugmentConfig(flip_probability=1.5)
    with pytest.raises(ConfigError, match="elastic_sigma"):
        AugmentConfig(elastic_sigma=0.0)
    with pytest.raises(ConfigError, match="crop_size"):
        AugmentConfig(crop_size=(4, 4))


# ----- cropping ----------------------------------------------------------


def test_full_size_crop_is_identity():
    case = make_case(np.random.default_rng(13))
    out = random_crop(case, (6, 6, 6), np.random.default_rng(0))
    for a, b in zip(case.modalities, out.modalities):
        assert np.array_equal(a.numpy(), b.numpy())
    assert np.array_equal(case.labels.voxels, out.labels.voxels)


def test_crop_window_matches_replayed_draws():
    case = make_case(np.random.default_rng(14), shape=(7, 6, 8))
    size = (3, 4, 2)
    out = random_crop(case, size, np.random.default_rng(9))
    replay = np.random.default_rng(9)
    starts = [int(replay.integers(0, e - s + 1)) for s, e in zip(size, case.extents)]
    window = tuple(slice(b, b + s) for b, s in zip(starts, size))
    assert np.array_equal(out.modalities[1].numpy(), case.modalities[1].numpy()[window])
    assert np.array_equal(out.labels.voxels, case.labels.voxels[window])


def test_crop_too_large_rejected():
    case = make_case(np.random.default_rng(15))
    with pytest.raises(ConfigError, match="exceeds"):
        random_crop(case, (7, 6, 6), np.random.default_rng(0))


# ----- phantoms ----------------------------------------------------------


def test_phantom_spec_validation():
    with pytest.raises(ConfigError, match="strictly ordered"):
        PhantomSpec(core_radius=(2.0, 9.0))
    with pytest.raises(ConfigError, match="does not fit"):
        PhantomSpec(extents=(12, 12, 12))


def test_empty_phantom_is_constant_head():
    spec = PhantomSpec(tumor_count=0, noise_level=0.0)
    case = generate_phantom(spec)
    assert not case.labels.voxels.any()
    for m in case.modalities:
        v = m.numpy()
        fg = v[v != 0.0]
        assert fg.size > 0 and np.all(fg == fg[0])


def test_single_tumor_has_one_whole_tumor_component():
    for seed in range(4):
        case = generate_phantom(PhantomSpec(seed=seed))
        wt = region_mask(case.labels, "WT").mask
        assert wt.any()
        assert connected_components_oracle(wt) == 1
        et = region_mask(case.labels, "ET").mask
        tc = region_mask(case.labels, "TC").mask
        assert et.any() and np.all(et <= tc) and np.all(tc <= wt)


def test_phantom_is_deterministic_and_masked():
    a = generate_phantom(PhantomSpec(seed=3))
    b = generate_phantom(PhantomSpec(seed=3))
    for ma, mb in zip(a.modalities, b.modalities):
        assert np.array_equal(ma.numpy(), mb.numpy())
    assert np.array_equal(a.labels.voxels, b.labels.voxels)
    tumor = a.labels.voxels != 0
    for m in a.modalities:
        v = m.numpy()
        assert np.all(v[tumor] != 0.0)


# ----- case files --------------------------------------------------------


def test_case_round_trip_bit_exact(tmp_path):
    case = generate_phantom(PhantomSpec(seed=5), case_id="rt0")
    d = write_case(case, tmp_path / "rt0")
    back = read_case(d)
    assert back.case_id == "rt0" and back.spacing == case.spacing
    for a, b in zip(case.modalities, back.modalities):
        assert np.array_equal(a.numpy(), b.numpy())
    assert np.array_equal(case.labels.voxels, back.labels.voxels)


def test_case_without_labels_round_trips(tmp_path):
    case = make_case(np.random.default_rng(16), with_labels=False)
    back = read_case(write_case(case, tmp_path / "nl"))
    assert back.labels is None
    assert np.array_equal(back.modalities[3].numpy(), case.modalities[3].numpy())


def test_missing_modalities_listed(tmp_path):
    case = make_case(np.random.default_rng(17))
    d = write_case(case, tmp_path / "m")
    (d / "t1ce.bin").unlink()
    (d / "flair.bin").unlink()
    with pytest.raises(ParseError, match="t1ce.bin, flair.bin"):
        read_case(d)


def test_truncated_volume_rejected(tmp_path):
    case = make_case(np.random.default_rng(18))
    d = write_case(case, tmp_path / "t")
    f = d / "t2.bin"
    f.write_bytes(f.read_bytes()[:-16])
    with pytest.raises(ParseError, match="t2.bin"):
        read_case(d)


def test_manifest_errors(tmp_path):
    case = make_case(np.random.default_rng(19))
    d = write_case(case, tmp_path / "x")
    (d / "case.json").write_text('{"case_id": "x"}')
    with pytest.raises(ParseError, match="extents"):
        read_case(d)
    (d / "case.json").write_text("not json")
    with pytest.raises(ParseError, match="invalid JSON"):
        read_case(d)
    with pytest.raises(ParseError, match="no such case"):
        read_case(tmp_path / "absent")


def test_extent_mismatch_across_modalities(tmp_path):
    case = make_case(np.random.default_rng(20))
    d = write_case(case, tmp_path / "e")
    from voxseg.tensor import save_array

    save_array(d / "t2.bin", np.ones((3, 3, 3)), name="t2")
    with pytest.raises(ParseError, match="t2.bin"):
        read_case(d)


def test_dataset_manifest_round_trip(tmp_path):
    dirs = [tmp_path / "a", tmp_path / "b"]
    mpath = write_dataset_manifest(["a", "b"], tmp_path / "cases.txt")
    assert read_dataset_manifest(mpath) == dirs
    (tmp_path / "cases.txt").write_text("# comment\n\n")
    with pytest.raises(ParseError, match="no cases"):
        read_dataset_manifest(tmp_path / "cases.txt")
    with pytest.raises(ParseError, match="no such manifest"):
        read_dataset_manifest(tmp_path / "nope.txt")
