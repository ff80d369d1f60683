import math

import numpy as np
import pytest

from idic.imaging import SpeckleParams
from idic.inverse import Experiment, InverseProblem
from idic.materials import TractionSpec
from idic.mesh import build_unit_square_mesh
from idic.regularization import RegConfig
from idic.synth import (TrueFieldSpec, format_manifest, generate_experiment, make_true_field, parse_manifest,
                        read_bundle, whole_pixel_padding, write_bundle)

SMALL = dict(speckle=SpeckleParams(0.05, 3, 40), fine_n=20, problem_n=10)


@pytest.fixture(scope="module")
def small_bundle():
    return generate_experiment(TrueFieldSpec(), [TractionSpec(0.5, 0.0), TractionSpec(-0.3, 0.1)], (0.1, 0.05),
                               **SMALL)


def test_single_void_levels():
    mesh = build_unit_square_mesh(20)
    spec = TrueFieldSpec(radius=0.2, center=(0.4, 0.6))
    m = make_true_field(spec, mesh)
    r = np.hypot(mesh.vertices[:, 0] - 0.4, mesh.vertices[:, 1] - 0.6)
    assert np.all(m[r < 0.2] == -2.0) and np.all(m[r >= 0.2] == 2.0)
    assert (m == -2.0).sum() > 0


def test_field_kind_examples():
    mesh = build_unit_square_mesh(12)
    one = make_true_field(TrueFieldSpec("grid_discs", grid=1, radius=0.3), mesh)
    assert np.array_equal(one, make_true_field(TrueFieldSpec(radius=0.3), mesh))
    v = make_true_field(TrueFieldSpec("voronoi", num_seeds=1, seed=4), mesh)
    assert np.ptp(v) == 0 and -2 <= v[0] <= 4
    g = make_true_field(TrueFieldSpec("gaussian_random_field", seed=2), mesh)
    assert g.min() == pytest.approx(-2.0) and g.max() == pytest.approx(4.0)
    grid = make_true_field(TrueFieldSpec("grid_discs", grid=3, radius=0.12), build_unit_square_mesh(30))
    assert set(np.unique(grid)) == {-2.0, 2.0, 4.0}


@pytest.mark.parametrize("kw", [dict(kind="blob"), dict(radius=0.6), dict(center=(1.2, 0.5)),
                                dict(kind="grid_discs", grid=3, radius=0.2), dict(kind="voronoi", num_seeds=0)])
def test_field_spec_rejects(kw):
    with pytest.raises(ValueError):
        TrueFieldSpec(**kw)


def test_noise_and_force_error(small_bundle):
    e = small_bundle.experiments[0]
    assert e.traction.t_normal == pytest.approx(0.475) and e.traction_true.t_normal == 0.5
    assert small_bundle.experiments[1].traction.t_shear == pytest.approx(0.095)
    b = generate_experiment(TrueFieldSpec(m_bg=8.0, m_low=8.0), TractionSpec(10.0), (0.0, 0.05), **SMALL,
                            model="linear")
    assert b.experiments[0].traction.t_normal == pytest.approx(9.5)
    clean = generate_experiment(TrueFieldSpec(), TractionSpec(0.5), (0.0, 0.0), **SMALL)
    assert clean.experiments[0].traction == clean.experiments[0].traction_true
    # noise goes to the deformed image only
    assert np.array_equal(clean.experiments[0].I0.values, small_bundle.experiments[0].I0.values)
    assert not np.array_equal(clean.experiments[0].I1.values, small_bundle.experiments[0].I1.values)


def test_shared_reference_and_padding(small_bundle):
    e0, e1 = small_bundle.experiments
    assert np.array_equal(e0.I0.values, e1.I0.values)
    assert whole_pixel_padding(40) * 40 == pytest.approx(round(whole_pixel_padding(40) * 40))
    assert small_bundle.m_true.shape == (121,) and small_bundle.m_true_fine.shape == (441,)


def test_generation_is_deterministic(small_bundle):
    again = generate_experiment(TrueFieldSpec(), [TractionSpec(0.5, 0.0), TractionSpec(-0.3, 0.1)], (0.1, 0.05),
                                **SMALL)
    for a, b in zip(small_bundle.experiments, again.experiments):
        assert np.array_equal(a.I1.values, b.I1.values)


def test_manifest_bit_exact():
    entries = {"format": "idic-bundle-1", "n": 50, "x": 0.1 + 0.2, "tiny": 5e-324, "neg": -1.0 / 3.0,
               "name": "single_void", "big": 12345678901234567}
    text = format_manifest(entries)
    back = parse_manifest(text)
    assert back == entries
    assert all(type(back[k]) is type(v) for k, v in entries.items())
    assert format_manifest(back) == text
    with pytest.raises(ValueError):
        format_manifest({"a=b": 1})
    with pytest.raises(ValueError):
        parse_manifest("no separator here\n")


def test_bundle_roundtrip(tmp_path, small_bundle):
    d = write_bundle(small_bundle, tmp_path / "b")
    back = read_bundle(d)
    assert (back.problem_n, back.fine_n) == (10, 20)
    assert np.array_equal(back.m_true, small_bundle.m_true)
    assert np.array_equal(back.m_true_fine, small_bundle.m_true_fine)
    for a, b in zip(small_bundle.experiments, back.experiments):
        assert a.traction == b.traction and a.traction_true == b.traction_true
        assert np.array_equal(a.I0.values, b.I0.values) and np.array_equal(a.I1.values, b.I1.values)
        assert a.I1.padding == pytest.approx(b.I1.padding) and a.mean_axial_strain == b.mean_axial_strain
    assert back.metadata == small_bundle.metadata
    # writing the re-read bundle reproduces the manifest byte for byte
    d2 = write_bundle(back, tmp_path / "c")
    assert (d / "manifest.txt").read_bytes() == (d2 / "manifest.txt").read_bytes()
    with pytest.raises(FileNotFoundError):
        read_bundle(tmp_path / "missing")


@pytest.mark.parametrize("model,t,target", [("linear", 0.02, 0.002), ("neo_hookean", 0.5, 0.05)])
def test_strain_regimes(model, t, target):
    b = generate_experiment(TrueFieldSpec(), TractionSpec(t), (0.0, 0.0), SpeckleParams(0.05, 0, 40), 40, 10, model)
    s = b.experiments[0].mean_axial_strain
    assert 0.5 * target <= s <= 1.5 * target


def test_truth_explains_noiseless_data():
    # Images are resampled from a P1 speckle, so m_true is not an exact
    # minimizer (its gradient does not vanish); its misfit must still be a
    # small fraction of the misfit at the initial guess.
    b = generate_experiment(TrueFieldSpec(radius=0.2), TractionSpec(0.5), (0.0, 0.0), SpeckleParams(0.04, 1, 200),
                            20, 20)
    prob = InverseProblem(b.problem_mesh, [Experiment(e.traction, e.I0, e.I1) for e in b.experiments],
                          RegConfig(gamma_h1=1e-8), misfit_subdivisions=10)
    at_truth = prob.evaluate(b.m_true)
    assert at_truth.misfit < 0.25 * prob.evaluate(prob.m0).misfit
    assert math.isfinite(at_truth.cost)
