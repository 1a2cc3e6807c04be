import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attrdis import datagen as dg
from attrdis.numcore import DimensionError


def spec(C=2, corr=None, marg=0.5, **kw):
    corr = np.eye(C) if corr is None else np.asarray(corr, dtype=float)
    marg = [marg] * C if np.isscalar(marg) else marg
    kw.setdefault("input_dim", 4 * C)
    return dg.SceneSpec(marginals=tuple(marg), target_corr=corr, **kw)


def pair_corr(r):
    return np.array([[1.0, r], [r, 1.0]])


def arcsine_law(rho):
    # Pearson correlation of two median-thresholded standard normals
    return 2.0 / math.pi * math.asin(rho)


# -- SceneSpec validation ----------------------------------------------------------

def test_rejects_asymmetric_and_bad_diagonal():
    with pytest.raises(dg.SpecError, match="symmetric"):
        spec(corr=[[1.0, 0.2], [0.1, 1.0]])
    with pytest.raises(dg.SpecError, match="diagonal"):
        spec(corr=[[0.99, 0.2], [0.2, 1.0]])
    with pytest.raises(dg.SpecError):
        spec(corr=pair_corr(1.0))


def test_non_pd_reports_eigenvalue():
    corr = np.array([[1, 0.9, -0.9], [0.9, 1, 0.9], [-0.9, 0.9, 1]])
    lam = np.linalg.eigvalsh(corr)[0]
    with pytest.raises(dg.SpecError, match=f"{lam:.6g}"):
        spec(C=3, corr=corr)


def test_rejects_bad_marginals_and_dims():
    with pytest.raises(dg.SpecError):
        spec(marg=[0.0, 0.5])
    with pytest.raises(dg.SpecError):
        spec(input_dim=0)
    with pytest.raises(dg.SpecError):
        spec(noise_sigma=-1.0)


def test_exclusive_group_validation():
    spec(C=3, marg=[0.2, 0.3, 0.5], exclusive_groups=((0, 1, 2),))
    with pytest.raises(dg.SpecError, match="sum to 1"):
        spec(C=3, marg=[0.2, 0.3, 0.4], exclusive_groups=((0, 1, 2),))
    with pytest.raises(dg.SpecError):
        spec(C=3, marg=[0.5, 0.5, 0.5], exclusive_groups=((0, 0),))


# -- sample_labels ---------------------------------------------------------------

def test_identity_corr_gives_uncorrelated_labels():
    labels = dg.sample_labels(spec(C=4), 100_000, 1)
    off = dg.pearson_matrix(labels)[~np.eye(4, dtype=bool)]
    assert np.all(np.abs(off) <= 0.02)


def test_binary_correlation_follows_arcsine_law():
    labels = dg.sample_labels(spec(corr=pair_corr(0.9)), 100_000, 2)
    r = dg.pearson_matrix(labels)[0, 1]
    assert abs(r - arcsine_law(0.9)) < 0.01


@pytest.mark.parametrize("p", [0.1, 0.5, 0.85])
def test_marginals_within_three_sigma(p):
    n = 100_000
    corr = np.array([[1, 0.8, 0], [0.8, 1, -0.5], [0, -0.5, 1]])
    labels = dg.sample_labels(spec(C=3, corr=corr, marg=p), n, 3)
    assert np.all(np.abs(labels.mean(axis=0) - p) <= 3 * math.sqrt(p * (1 - p) / n))


def test_exclusive_groups_are_one_hot_with_marginals():
    s = spec(C=4, marg=[0.2, 0.3, 0.5, 0.4], exclusive_groups=((0, 1, 2),))
    labels = dg.sample_labels(s, 50_000, 4)
    assert np.all(labels[:, :3].sum(axis=1) == 1)
    np.testing.assert_allclose(labels[:, :3].mean(axis=0), [0.2, 0.3, 0.5], atol=0.01)


def test_labels_deterministic():
    s = spec(C=3, corr=np.eye(3))
    np.testing.assert_array_equal(dg.sample_labels(s, 500, 9), dg.sample_labels(s, 500, 9))
    assert not np.array_equal(dg.sample_labels(s, 500, 9), dg.sample_labels(s, 500, 10))


# -- render_input ----------------------------------------------------------------

def test_all_zero_labels_without_noise_is_zero():
    np.testing.assert_array_equal(dg.render_input([0, 0, 0], spec(C=3), 0), np.zeros(12))


def test_one_hot_without_noise_is_style():
    s = spec(C=3)
    np.testing.assert_array_equal(dg.render_input([0, 1, 0], s, 5), dg.style_vectors(s)[1])


def test_styles_are_unit_vectors():
    np.testing.assert_allclose(np.linalg.norm(dg.style_vectors(spec(C=8, input_dim=64)), axis=1), 1.0,
                               rtol=0, atol=1e-15)


def test_jitter_keeps_direction_changes_magnitude():
    s = spec(C=2, norm_jitter=0.5)
    _, p1 = dg.render_input([1, 1], s, 1, return_parts=True)
    _, p2 = dg.render_input([1, 1], s, 2, return_parts=True)
    for k in range(2):
        u1, u2 = p1[k] / np.linalg.norm(p1[k]), p2[k] / np.linalg.norm(p2[k])
        np.testing.assert_allclose(u1, u2, atol=1e-14)
        assert abs(np.linalg.norm(p1[k]) - np.linalg.norm(p2[k])) > 1e-6


@settings(max_examples=50, deadline=None)
@given(bits=st.lists(st.integers(0, 1), min_size=5, max_size=5), s=st.integers(0, 4), seed=st.integers(0, 99))
def test_render_is_linear_in_labels(bits, s, seed):
    sp = spec(C=5)
    bits[s] = 0
    a, b = np.array(bits), np.array(bits)
    b[s] = 1
    diff = dg.render_input(b, sp, seed) - dg.render_input(a, sp, seed)
    np.testing.assert_allclose(diff, dg.style_vectors(sp)[s], rtol=0, atol=1e-14)


def test_render_rejects_wrong_length():
    with pytest.raises(dg.SpecError):
        dg.render_input([1, 0, 1], spec(C=2), 0)


def test_noise_scale():
    x = np.stack([dg.render_input([0, 0], spec(noise_sigma=0.3), [7, i]) for i in range(2000)])
    assert abs(x.std() - 0.3) < 0.01


# -- splits and diagnostics ------------------------------------------------------

def test_dataset_bit_identical_and_nonempty():
    s = spec(C=3, noise_sigma=0.2, norm_jitter=0.3)
    a, b = dg.make_dataset(s, 50, 3), dg.make_dataset(s, 50, 3)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.labels, b.labels)
    with pytest.raises(dg.SpecError):
        dg.Dataset(np.zeros((0, 2)), np.zeros((0, 1), dtype=np.uint8), "train")


def test_shifted_splits_require_corr_only_difference():
    a = spec(corr=pair_corr(0.5))
    with pytest.raises(dg.SpecError):
        dg.make_shifted_splits(a, spec(corr=pair_corr(0.5), style_seed=1), 10, 10, 0)
    with pytest.raises(dg.SpecError):
        dg.make_shifted_splits(a, spec(corr=pair_corr(0.5), noise_sigma=0.1), 10, 10, 0)


def test_sign_flip_shift_exceeds_one():
    n = 100_000
    tr, te = spec(corr=pair_corr(0.8), input_dim=2), spec(corr=pair_corr(-0.8), input_dim=2)
    ltr, lte = dg.sample_labels(tr, n, 0), dg.sample_labels(te, n, 1)
    shifts = dg.correlation_shift(dg.pearson_matrix(ltr), dg.pearson_matrix(lte))
    assert shifts[-1].value > 1.0
    assert abs(shifts[-1].value - 2 * arcsine_law(0.8)) < 0.02
    assert abs(ltr.mean(axis=0) - lte.mean(axis=0)).max() < 0.02


def test_no_shift_when_specs_equal():
    s = spec(C=4, corr=np.eye(4) * 0.5 + 0.5)
    m1 = dg.pearson_matrix(dg.sample_labels(s, 100_000, 0))
    m2 = dg.pearson_matrix(dg.sample_labels(s, 100_000, 1))
    assert all(p.value <= 0.03 for p in dg.correlation_shift(m1, m2))


def test_pearson_examples():
    col = np.array([0, 1, 1, 0, 1])
    assert dg.pearson_matrix(np.stack([col, col], 1))[0, 1] == pytest.approx(1.0, abs=1e-15)
    assert dg.pearson_matrix(np.stack([col, 1 - col], 1))[0, 1] == pytest.approx(-1.0, abs=1e-15)
    assert dg.pearson_matrix(np.array([[1, 1], [1, 0], [0, 1], [0, 0]]))[0, 1] == 0.0


def test_pearson_constant_column_flagged():
    m, flags = dg.pearson_matrix(np.array([[1, 0], [1, 1], [1, 0]]), return_flags=True)
    np.testing.assert_array_equal(flags, [True, False])
    assert m[0, 1] == 0.0 and m[0, 0] == 0.0 and m[1, 1] == 1.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_pearson_matrix_properties(seed):
    y = np.random.default_rng(seed).integers(0, 2, (20, 4))
    m = dg.pearson_matrix(y)
    np.testing.assert_array_equal(m, m.T)
    assert np.all(np.abs(m) <= 1.0)
    ref = np.corrcoef(y.T.astype(float))
    ok = np.isfinite(ref)
    np.testing.assert_allclose(m[ok], ref[ok], atol=1e-12)


def test_shift_examples():
    a = np.eye(3)
    assert all(p.value == 0 for p in dg.correlation_shift(a, a))
    b = a.copy()
    b[0, 2] = b[2, 0] = 0.5
    c = a.copy()
    c[0, 2] = c[2, 0] = -0.5
    out = dg.correlation_shift(b, c)
    assert [p.value for p in out] == [0.0, 0.0, 1.0]
    assert (out[-1].i, out[-1].j) == (0, 2)
    with pytest.raises(DimensionError):
        dg.correlation_shift(np.eye(2), np.eye(3))


def test_fraction_shifted_on_constructed_matrix():
    # 15 pairs, 3 moved by >= 0.1 -> one fifth
    a, b = np.eye(6), np.eye(6)
    for i, j in [(0, 1), (2, 3), (4, 5)]:
        b[i, j] = b[j, i] = 0.3
    b[1, 2] = b[2, 1] = 0.05
    assert dg.fraction_shifted(dg.correlation_shift(a, b)) == pytest.approx(3 / 15)


def test_text_round_trip_is_bit_exact(tmp_path):
    s = spec(C=3, noise_sigma=0.7, norm_jitter=0.4)
    ds = dg.make_dataset(s, 40, 11, "test")
    dg.save_dataset(ds, tmp_path / "d.txt")
    back = dg.load_dataset(tmp_path / "d.txt")
    np.testing.assert_array_equal(back.x, ds.x)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.split == "test"
    head = (tmp_path / "d.txt").read_text().splitlines()[0]
    assert head == "3 12 40 test"


def test_format_uses_seventeen_digits():
    assert dg.format_float(0.1) == "0.10000000000000001"
    assert float(dg.format_float(1 / 3)) == 1 / 3
