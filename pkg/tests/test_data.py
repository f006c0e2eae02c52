import json
import os
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prostate_dl.data import (BundleError, LesionRecord, MaskKind, MaskVolume, PatientStudy, Sequence,
                              Volume3D, derive_significance, load_cohort, load_study, make_folds,
                              save_study, union_masks)
from prostate_dl.phantom import generate_study


def _studies_equal(a: PatientStudy, b: PatientStudy):
    assert a.patient_id == b.patient_id
    for seq in Sequence:
        assert np.array_equal(a.volume(seq).voxels, b.volume(seq).voxels)
        assert a.volume(seq).spacing == b.volume(seq).spacing
        assert np.array_equal(a.prostate_mask(seq).voxels, b.prostate_mask(seq).voxels)
    assert len(a.lesions) == len(b.lesions)
    for la, lb in zip(a.lesions, b.lesions):
        assert (la.lesion_id, la.pirads, la.ggg) == (lb.lesion_id, lb.pirads, lb.ggg)
        for seq in Sequence:
            ma, mb = la.mask(seq), lb.mask(seq)
            assert (ma is None) == (mb is None)
            if ma is not None:
                assert np.array_equal(ma.voxels, mb.voxels)


def test_volume_is_immutable():
    v = Volume3D(np.zeros((2, 3, 4)), Sequence.ADC)
    assert v.shape == (2, 3, 4)
    with pytest.raises(ValueError):
        v.voxels[0, 0, 0] = 1.0


@pytest.mark.parametrize("bad", [np.zeros((0, 2, 2)), np.zeros((2, 2)), np.full((1, 1, 1), np.nan)])
def test_volume_rejects_bad_voxels(bad):
    with pytest.raises(ValueError):
        Volume3D(bad, Sequence.T2W)


def test_mask_must_be_binary():
    with pytest.raises(BundleError, match="non-binary mask"):
        MaskVolume(np.full((1, 2, 2), 2, np.uint8))


@pytest.mark.parametrize("ggg,label", [(0, 0), (1, 0), (2, 1), (5, 1)])
def test_derive_significance(ggg, label):
    assert derive_significance(LesionRecord(0, 3, ggg)) == label


def test_lesion_record_validation():
    with pytest.raises(ValueError):
        LesionRecord(0, 6, 0)
    with pytest.raises(ValueError):
        LesionRecord(0, 3, -1)
    assert not LesionRecord(0, 3, 0).usable


def test_study_extent_mismatch_rejected():
    vol = Volume3D(np.zeros((2, 4, 4)), Sequence.ADC)
    t2 = Volume3D(np.zeros((2, 6, 6)), Sequence.T2W)
    good = MaskVolume(np.zeros((2, 4, 4), np.uint8))
    with pytest.raises(BundleError):
        PatientStudy("x", vol, t2, good, good)


# -- union -------------------------------------------------------------------

def test_union_disjoint_single_voxels():
    a = np.zeros((1, 3, 3), np.uint8)
    b = a.copy()
    a[0, 0, 0] = 1
    b[0, 2, 2] = 1
    assert union_masks([MaskVolume(a), MaskVolume(b)]).count == 2


def test_union_idempotent_and_empty():
    m = MaskVolume((np.arange(27).reshape(3, 3, 3) % 2).astype(np.uint8))
    assert np.array_equal(union_masks([m, m]).voxels, m.voxels)
    assert union_masks([], shape=(2, 2, 2)).count == 0
    with pytest.raises(ValueError):
        union_masks([])


def test_union_extent_mismatch():
    with pytest.raises(ValueError):
        union_masks([MaskVolume(np.zeros((1, 2, 2), np.uint8)), MaskVolume(np.zeros((1, 3, 3), np.uint8))])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_union_equals_logical_or(seed, n):
    r = np.random.default_rng(seed)
    arrs = [(r.random((3, 4, 5)) < 0.3).astype(np.uint8) for _ in range(n)]
    got = union_masks([MaskVolume(a) for a in arrs]).voxels
    assert np.array_equal(got, np.logical_or.reduce(arrs).astype(np.uint8))
    # commutative
    rev = union_masks([MaskVolume(a) for a in arrs[::-1]]).voxels
    assert np.array_equal(got, rev)


# -- folds -------------------------------------------------------------------

def test_folds_ten_ids():
    split = make_folds([f"p{i}" for i in range(10)], k=5, seed=0)
    assert split.sizes() == [2] * 5


def test_folds_157_ids():
    split = make_folds([f"p{i}" for i in range(157)], k=5, seed=3)
    assert sorted(split.sizes()) == [31, 31, 31, 32, 32]


def test_folds_deterministic_and_order_free():
    ids = [f"p{i}" for i in range(23)]
    a = make_folds(ids, 5, 7)
    b = make_folds(list(reversed(ids)), 5, 7)
    assert a.assignment == b.assignment
    assert make_folds(ids, 5, 8).assignment != a.assignment


@pytest.mark.parametrize("ids,k", [(["a", "a", "b"], 2), (["a", "b"], 3), (["a", "b"], 1)])
def test_folds_errors(ids, k):
    with pytest.raises(ValueError):
        make_folds(ids, k)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.integers(2, 6), st.integers(0, 1000))
def test_folds_partition(n, k, seed):
    if n < k:
        return
    ids = [f"id{i}" for i in range(n)]
    split = make_folds(ids, k, seed)
    sizes = split.sizes()
    assert max(sizes) - min(sizes) <= 1
    for f in range(k):
        test, train = set(split.test_ids(f)), set(split.train_ids(f))
        assert not test & train
        assert test | train == set(ids)


# -- bundles -----------------------------------------------------------------

def test_round_trip_phantom(tmp_path, small_params):
    study = generate_study(11, small_params, "P1")
    save_study(study, tmp_path / "P1")
    _studies_equal(study, load_study(tmp_path / "P1"))


def test_round_trip_no_lesions(tmp_path):
    vol = Volume3D(np.random.default_rng(0).random((2, 3, 3)), Sequence.ADC)
    t2 = Volume3D(np.ones((2, 5, 5)), Sequence.T2W)
    st_ = PatientStudy("empty", vol, t2, MaskVolume(np.zeros((2, 3, 3), np.uint8), MaskKind.PROSTATE),
                       MaskVolume(np.zeros((2, 5, 5), np.uint8), MaskKind.PROSTATE))
    save_study(st_, tmp_path / "e")
    back = load_study(tmp_path / "e")
    assert back.lesions == ()
    _studies_equal(st_, back)


def test_round_trip_absent_mask(tmp_path):
    vol = Volume3D(np.zeros((1, 2, 2)), Sequence.ADC)
    t2 = Volume3D(np.zeros((1, 4, 4)), Sequence.T2W)
    m = np.zeros((1, 4, 4), np.uint8)
    m[0, 1, 1] = 1
    les = LesionRecord(3, 4, 2, None, MaskVolume(m))
    st_ = PatientStudy("p", vol, t2, MaskVolume(np.zeros((1, 2, 2), np.uint8)), MaskVolume(m), [les])
    save_study(st_, tmp_path / "p")
    _studies_equal(st_, load_study(tmp_path / "p"))


def test_byte_count_gives_extents(tmp_path, small_params):
    study = generate_study(1, small_params, "P")
    save_study(study, tmp_path / "P")
    size = os.path.getsize(tmp_path / "P" / "adc.f32")
    assert size == 4 * 16 * 32 * 32
    assert load_study(tmp_path / "P").adc.shape == (16, 32, 32)


def test_adc_extent_arithmetic(tmp_path):
    # 128x128x20 float32 file holds 327,680 values
    vol = Volume3D(np.zeros((20, 128, 128)), Sequence.ADC)
    t2 = Volume3D(np.zeros((1, 2, 2)), Sequence.T2W)
    st_ = PatientStudy("a", vol, t2, MaskVolume(np.zeros((20, 128, 128), np.uint8)),
                       MaskVolume(np.zeros((1, 2, 2), np.uint8)))
    save_study(st_, tmp_path / "a")
    assert os.path.getsize(tmp_path / "a" / "adc.f32") // 4 == 327_680
    assert load_study(tmp_path / "a").adc.shape == (20, 128, 128)


def _tamper(path, name, data):
    (path / name).write_bytes(data)
    meta = json.loads((path / "meta.json").read_text())
    meta["checksums"].pop(name, None)
    (path / "meta.json").write_text(json.dumps(meta))


def test_non_binary_mask_file(tmp_path, small_params):
    study = generate_study(2, small_params, "P")
    save_study(study, tmp_path / "P")
    raw = bytearray((tmp_path / "P" / "prostate_adc.u8").read_bytes())
    raw[0] = 2
    _tamper(tmp_path / "P", "prostate_adc.u8", bytes(raw))
    with pytest.raises(BundleError, match="non-binary mask"):
        load_study(tmp_path / "P")


def test_checksum_and_size_errors(tmp_path, small_params):
    study = generate_study(2, small_params, "P")
    save_study(study, tmp_path / "P")
    raw = bytearray((tmp_path / "P" / "t2w.f32").read_bytes())
    raw[0] ^= 1
    (tmp_path / "P" / "t2w.f32").write_bytes(bytes(raw))
    with pytest.raises(BundleError, match="checksum"):
        load_study(tmp_path / "P")
    _tamper(tmp_path / "P", "t2w.f32", bytes(raw[:-4]))
    with pytest.raises(BundleError, match="bytes"):
        load_study(tmp_path / "P")
    (tmp_path / "P" / "t2w.f32").unlink()
    with pytest.raises(FileNotFoundError):
        load_study(tmp_path / "P")


def test_save_read_only(tmp_path, small_params):
    if os.geteuid() == 0:
        target = tmp_path / "file"
        target.write_text("x")  # a file where a directory is needed
        with pytest.raises(OSError):
            save_study(generate_study(0, small_params), target / "sub")
        return
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(0o500)
    with pytest.raises(OSError):
        save_study(generate_study(0, small_params), ro / "x")


def test_load_cohort_without_manifest(tmp_path, small_params):
    for i in range(3):
        save_study(generate_study(i, small_params, f"S{i}"), tmp_path / f"S{i}")
    assert [s.patient_id for s in load_cohort(tmp_path)] == ["S0", "S1", "S2"]
