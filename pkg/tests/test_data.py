import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from fedseg.data import (
    ClientSpec, GeneratorConfig, NormStats, Volume, dataset_norm_stats, dixon_water_fat, export_volumes,
    generate_synthetic_volume, import_volumes, preprocess, read_volume, split_clients, split_counts, write_volume,
)
from fedseg.nn import Modality


def _vol(slices, masks=None, pid="p"):
    slices = np.asarray(slices, dtype=np.float32)
    masks = np.zeros(slices.shape, np.uint8) if masks is None else masks
    return Volume(pid, Modality.CT, slices, masks)


# ---- generator ---------------------------------------------------------------

@pytest.mark.parametrize("modality", ["CT", "MRI"])
def test_generator_is_deterministic(modality):
    a = generate_synthetic_volume(modality, 17)
    b = generate_synthetic_volume(modality, 17)
    assert a.slices.tobytes() == b.slices.tobytes() and a.masks.tobytes() == b.masks.tobytes()
    assert a.slices.shape == (8, 32, 32)
    c = generate_synthetic_volume(modality, 18)
    assert c.slices.tobytes() != a.slices.tobytes()


def test_contrast_is_inverted_between_modalities():
    for seed in range(20):
        ct = generate_synthetic_volume("CT", seed)
        mri = generate_synthetic_volume("MRI", seed)
        inside = ct.masks > 0
        assert ct.slices[inside].mean() > ct.slices[~inside].mean()
        assert mri.slices[inside].mean() < mri.slices[~inside].mean()


def test_mask_coverage_over_100_seeds():
    for seed in range(100):
        frac = generate_synthetic_volume("CT", seed).masks.reshape(8, -1).mean(axis=1)
        assert np.all(frac >= 0.05) and np.all(frac <= 0.40), (seed, frac)


def test_mri_variants_share_patient_shape():
    a = generate_synthetic_volume("MRI", 5, variant=0)
    b = generate_synthetic_volume("MRI", 5, variant=2)
    ct = generate_synthetic_volume("CT", 5)
    assert np.array_equal(a.masks, b.masks) and np.array_equal(a.masks, ct.masks)
    assert not np.array_equal(a.slices, b.slices)


def test_liver_histograms_separate_between_modalities():
    ct = np.concatenate([generate_synthetic_volume("CT", s).slices[generate_synthetic_volume("CT", s).masks > 0]
                         for s in range(10)])
    mri = np.concatenate([generate_synthetic_volume("MRI", s).slices[generate_synthetic_volume("MRI", s).masks > 0]
                          for s in range(10)])
    assert sps.ks_2samp(ct, mri).statistic > 0.5


def test_generator_resolution_and_slices_follow_config():
    v = generate_synthetic_volume("CT", 1, GeneratorConfig(resolution=16, slices=5))
    assert v.slices.shape == v.masks.shape == (5, 16, 16)


def test_volume_shape_mismatch():
    with pytest.raises(ValueError):
        Volume("p", Modality.CT, np.zeros((2, 4, 4)), np.zeros((3, 4, 4)))


# ---- dixon -------------------------------------------------------------------

def test_dixon_identities():
    rng = np.random.default_rng(0)
    a = _vol(rng.normal(size=(2, 4, 4)))
    b = _vol(rng.normal(size=(2, 4, 4)))
    water, fat = dixon_water_fat(a, a)
    assert np.all(fat.slices == 0)
    water, fat = dixon_water_fat(a, _vol(-a.slices))
    assert np.all(water.slices == 0)
    water, fat = dixon_water_fat(a, b)
    np.testing.assert_allclose(water.slices + fat.slices, a.slices, atol=1e-6)
    assert np.array_equal(water.masks, a.masks)
    with pytest.raises(ValueError):
        dixon_water_fat(a, _vol(np.zeros((2, 4, 5))))


def test_dixon_sum_is_exact_on_dyadic_values():
    # values on a 1/64 grid keep every intermediate exactly representable
    rng = np.random.default_rng(1)
    a = Volume("p", Modality.MRI, rng.integers(-640, 640, (2, 4, 4)) / 64.0, np.zeros((2, 4, 4), np.uint8))
    b = Volume("p", Modality.MRI, rng.integers(-640, 640, (2, 4, 4)) / 64.0, np.zeros((2, 4, 4), np.uint8))
    water, fat = dixon_water_fat(a, b)
    assert np.array_equal(water.slices + fat.slices, a.slices)


# ---- normalization -----------------------------------------------------------

def test_norm_stats_examples():
    s = dataset_norm_stats([_vol(np.stack([np.full((3, 3), 1.0), np.full((3, 3), 3.0)]))])
    assert s.mean == 2.0 and s.std == 0.0
    with pytest.raises(ValueError):
        dataset_norm_stats([])


def test_norm_stats_two_pass_oracle():
    rng = np.random.default_rng(2)
    vols = [_vol(rng.normal(loc=i, scale=1 + i, size=(3, 5, 5))) for i in range(3)]
    means, stds = [], []
    for v in vols:
        for sl in v.slices.astype(np.float64):
            flat = sl.ravel().tolist()
            m = sum(flat) / len(flat)
            means.append(m)
            stds.append((sum((x - m) ** 2 for x in flat) / len(flat)) ** 0.5)
    s = dataset_norm_stats(vols)
    assert abs(s.mean - sum(means) / len(means)) < 1e-12
    assert abs(s.std - sum(stds) / len(stds)) < 1e-12


def test_preprocess_examples():
    c = float(np.float32(0.3))
    v = _vol(np.full((1, 4, 4), c))
    assert np.all(preprocess(v, NormStats(c, 0.1), (4, 4)).slices == 0)
    assert np.all(preprocess(_vol(np.full((1, 4, 4), 0.3 + 10 * 0.1)), NormStats(0.3, 0.1), (4, 4)).slices == 3.0)
    with pytest.raises(ValueError):
        preprocess(v, NormStats(0.3, 0.0), (4, 4))


def test_preprocess_same_size_resize_is_identity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 8, 8))
    v = Volume("p", Modality.CT, x, (x > 0).astype(np.uint8))
    out = preprocess(v, NormStats(0.0, 1.0), (8, 8))
    assert np.abs(out.slices - np.clip(x, -3, 3)).max() < 1e-6
    assert np.array_equal(out.masks, v.masks)


def test_preprocess_resizes_masks_nearest_and_binary():
    v = generate_synthetic_volume("CT", 3, GeneratorConfig(resolution=64, slices=2))
    out = preprocess(v, dataset_norm_stats([v]), (32, 32))
    assert out.slices.shape == (2, 32, 32)
    assert set(np.unique(out.masks)) <= {0, 1}
    assert abs(out.masks.mean() - v.masks.mean()) < 0.02


@settings(max_examples=30, deadline=None)
@given(st.floats(-100, 100), st.floats(0.01, 10), st.integers(0, 1000))
def test_preprocessed_values_in_clip_range(mean, std, seed):
    x = np.random.default_rng(seed).normal(scale=50, size=(1, 4, 4))
    out = preprocess(_vol(x), NormStats(mean, std), (8, 8))
    assert out.slices.min() >= -3 and out.slices.max() <= 3


# ---- clients -----------------------------------------------------------------

@pytest.mark.parametrize("n,expected", [(10, (4, 2, 4)), (5, (2, 1, 2)), (3, (1, 1, 1)), (4, (1, 1, 2)), (12, (4, 2, 6))])
def test_split_counts(n, expected):
    assert split_counts(n) == expected


def test_split_counts_too_few():
    with pytest.raises(ValueError):
        split_counts(2)
    with pytest.raises(ValueError):
        split_clients([ClientSpec("a", "CT", patients=2)], 0)


SPECS = [
    ClientSpec("ct", "CT", patients=5),
    ClientSpec("mri", "MRI", patients=5, mri_variant=1),
    ClientSpec("mix", "Mixed", patients=8),
]


def test_split_clients_structure_and_determinism():
    gen = GeneratorConfig(resolution=16, slices=3)
    a = split_clients(SPECS, 7, gen)
    b = split_clients(SPECS, 7, gen)
    for ca, cb in zip(a, b):
        for split in ("train", "val", "test"):
            assert [v.patient_id for v in ca.split(split)] == [v.patient_id for v in cb.split(split)]
            for va, vb in zip(ca.split(split), cb.split(split)):
                assert va.slices.tobytes() == vb.slices.tobytes()
    ct = a[0]
    assert (len(ct.train), len(ct.val), len(ct.test)) == (2, 1, 2)
    for c in a:
        ids = [[v.patient_id for v in c.split(s)] for s in ("train", "val", "test")]
        flat = sum(ids, [])
        assert len(flat) == len(set(flat))
        for v in c.train + c.val + c.test:
            assert v.slices.min() >= -3 and v.slices.max() <= 3


def test_mixed_client_has_both_modalities_in_each_split():
    mix = split_clients(SPECS, 7, GeneratorConfig(resolution=16, slices=3))[2]
    for split in ("train", "val", "test"):
        mods = {v.modality for v in mix.split(split)}
        assert mods == {Modality.CT, Modality.MRI}
    x, y, labels = mix.arrays("train")
    assert len(labels) == x.shape[0] == y.shape[0]
    assert set(labels) == {Modality.CT, Modality.MRI}


def test_different_seed_changes_assignment():
    gen = GeneratorConfig(resolution=16, slices=2)
    a = split_clients(SPECS[:1], 1, gen)[0]
    b = split_clients(SPECS[:1], 2, gen)[0]
    assert [v.slices.tobytes() for v in a.train] != [v.slices.tobytes() for v in b.train]


def test_client_spec_rejects_unknown_mix():
    with pytest.raises(ValueError):
        ClientSpec("x", "PET")


# ---- volume files ------------------------------------------------------------

def test_volume_file_round_trip(tmp_path):
    vols = [generate_synthetic_volume("MRI", s, GeneratorConfig(resolution=8, slices=2), variant=1,
                                      patient_id=f"p{s}") for s in range(3)]
    export_volumes(tmp_path, vols)
    back = import_volumes(tmp_path)
    assert [v.patient_id for v in back] == ["p0", "p1", "p2"]
    for a, b in zip(vols, back):
        assert a.slices.tobytes() == b.slices.tobytes() and a.masks.tobytes() == b.masks.tobytes()
        assert b.modality is Modality.MRI and b.variant == 1 and b.meta["seed"] == a.meta["seed"]


def test_truncated_volume_file(tmp_path):
    path = tmp_path / "v.vol"
    write_volume(path, generate_synthetic_volume("CT", 0, GeneratorConfig(resolution=8, slices=2)))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError):
        read_volume(path)
