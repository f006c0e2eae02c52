import json

import numpy as np
import pytest
from scipy import ndimage

from prostate_dl.data import Sequence, derive_significance, load_cohort
from prostate_dl.phantom import (PhantomParams, PlacementError, generate_cohort, generate_studies,
                                 generate_study, lesion_max_dim, pirads_for_radius,
                                 significance_probability)


def test_zero_lesions(small_params):
    p = PhantomParams(**{**small_params.to_dict(), "lesions_per_patient": (0, 0)})
    assert generate_study(3, p).lesions == ()


def test_deterministic(small_params):
    a, b = generate_study(9, small_params), generate_study(9, small_params)
    for seq in Sequence:
        assert np.array_equal(a.volume(seq).voxels, b.volume(seq).voxels)
    assert [(l.pirads, l.ggg) for l in a.lesions] == [(l.pirads, l.ggg) for l in b.lesions]


def test_lesions_inside_prostate_and_connected(small_cohort):
    structure = ndimage.generate_binary_structure(3, 1)
    n = 0
    for study in small_cohort:
        for les in study.lesions:
            for seq in Sequence:
                m = les.mask(seq).voxels.astype(bool)
                assert m.any()
                assert not (m & ~study.prostate_mask(seq).voxels.astype(bool)).any()
                _, n_comp = ndimage.label(m, structure)
                assert n_comp == 1
                n += 1
    assert n > 0


def test_size_significance_rule():
    studies = generate_studies(40, seed=2)
    for s in studies:
        for les in s.lesions:
            if lesion_max_dim(les, s.t2w.shape[2]) < 10:
                assert derive_significance(les) == 0


def test_significance_probability_monotone():
    p = PhantomParams()
    dims = np.linspace(0, 60, 121)
    probs = [significance_probability(d, p) for d in dims]
    assert all(b >= a for a, b in zip(probs, probs[1:]))
    assert significance_probability(9.99, p) == 0.0


def test_pirads_never_two():
    p = PhantomParams()
    scores = {pirads_for_radius(r, p) for r in np.linspace(*p.lesion_radius, 500)}
    assert scores == {1, 3, 4, 5}


def test_cohort_statistics_and_manifest(tmp_path):
    manifest = generate_cohort(100, seed=0, out_dir=tmp_path)
    assert len(manifest) == 100
    lesions = [l for p in manifest for l in p["lesions"]]
    frac = np.mean([l["significant"] for l in lesions])
    assert 0.25 <= frac <= 0.45
    assert all(l["pirads"] != 2 for l in lesions)
    assert set(lesions[0]) >= {"pirads", "ggg", "max_dim"}
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk == manifest
    loaded = load_cohort(tmp_path)
    assert len(loaded) == 100
    assert [s.patient_id for s in loaded] == [p["patient_id"] for p in manifest]


def test_empty_cohort(tmp_path):
    assert generate_cohort(0, seed=0, out_dir=tmp_path) == []
    assert json.loads((tmp_path / "manifest.json").read_text()) == []


def test_placement_failure():
    p = PhantomParams(adc_extent=(4, 16, 16), t2w_extent=(4, 16, 16), lesions_per_patient=(3, 3),
                      lesion_radius=(60.0, 60.0), max_retries=5)
    with pytest.raises(PlacementError):
        generate_study(0, p)


def test_params_validation_and_round_trip():
    with pytest.raises(ValueError):
        PhantomParams(lesion_radius=(5.0, 2.0))
    p = PhantomParams(noise_sigma=0.2)
    assert PhantomParams.from_dict(json.loads(json.dumps(p.to_dict()))) == p


def test_prostate_brighter_than_background(small_cohort):
    s = small_cohort[0]
    v, m = s.t2w.voxels, s.prostate_mask_t2w.voxels.astype(bool)
    assert v[m].mean() > v[~m].mean() + 0.3
