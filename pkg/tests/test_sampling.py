import numpy as np
import pytest
from numpy.testing import assert_array_equal

from fpspatial.geometry import generate_uniform_population, write_population_csv
from fpspatial.sampling import (
    DegenerateSampleError,
    SamplingDesign,
    append_selection_csv,
    draw_sample,
    draw_sample_with_redraws,
    sample_size_ratio,
)


@pytest.fixture(scope="module")
def pop():
    return generate_uniform_population(1296, 3, seed=1)


def test_design_validation():
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            SamplingDesign(rho_c=bad)
        with pytest.raises(ValueError):
            SamplingDesign(rho_u=bad)
    assert SamplingDesign().is_census
    assert SamplingDesign(0.5, 0.4).rho == pytest.approx(0.2)


def test_census_takes_everyone(pop):
    sel = draw_sample(pop, SamplingDesign(), seed=3)
    assert sel.sample_size == pop.size
    assert sample_size_ratio(sel, SamplingDesign(), pop.size) == 1.0


def test_cluster_sampling_takes_whole_clusters(pop):
    sel = draw_sample(pop, SamplingDesign(0.25, 1.0), seed=4)
    per_cluster = np.bincount(pop.cluster_index, weights=sel.indicators)
    assert set(np.unique(per_cluster / pop.cluster_sizes)) <= {0.0, 1.0}


def test_units_only_from_drawn_clusters(pop):
    for s in range(20):
        sel = draw_sample(pop, SamplingDesign(0.5, 0.5), seed=s)
        assert np.all(sel.indicators <= sel.clusters_drawn[pop.cluster_index])
        assert sel.sample_size == sel.indicators.sum()


def test_mean_sample_size(pop):
    design = SamplingDesign(1.0, 0.25)
    n = np.array([draw_sample(pop, design, seed=s).sample_size for s in range(10_000)])
    assert abs(n.mean() / pop.size - 0.25) <= 0.01
    se = n.std(ddof=1) / np.sqrt(n.size)
    assert abs(n.mean() - pop.size * design.rho) <= 3 * se


@pytest.mark.parametrize("rho_c,rho_u,tol", [(1.0, 0.25, 0.02), (0.25, 0.25, 0.05)])
def test_sample_size_ratio_mean(rho_c, rho_u, tol):
    p = generate_uniform_population(10_000, 3, seed=2)
    d = SamplingDesign(rho_c, rho_u)
    r = [sample_size_ratio(draw_sample(p, d, seed=s), d, p.size) for s in range(1000)]
    assert abs(np.mean(r) - 1) <= tol


def test_seed_determinism(pop):
    d = SamplingDesign(0.5, 0.5)
    assert_array_equal(draw_sample(pop, d, 8).indicators, draw_sample(pop, d, 8).indicators)
    assert not np.array_equal(draw_sample(pop, d, 8).indicators, draw_sample(pop, d, 9).indicators)


def test_changing_unit_rate_keeps_cluster_draw(pop):
    a = draw_sample(pop, SamplingDesign(0.3, 0.9), seed=5)
    b = draw_sample(pop, SamplingDesign(0.3, 0.2), seed=5)
    assert_array_equal(a.clusters_drawn, b.clusters_drawn)


def test_degenerate_sample_and_redraw(pop):
    d = SamplingDesign(0.01, 0.01)
    with pytest.raises(DegenerateSampleError):
        draw_sample(pop, d, seed=0, min_units=10)
    small = generate_uniform_population(30, 3, seed=0)
    sel, k = draw_sample_with_redraws(small, SamplingDesign(1.0, 0.5), seed=1, min_units=12)
    assert sel.sample_size >= 12 and k >= 0
    with pytest.raises(DegenerateSampleError):
        draw_sample_with_redraws(small, SamplingDesign(0.01, 0.01), seed=1, max_redraws=3)


def test_selection_csv_column(tmp_path):
    p = generate_uniform_population(9, 3, seed=0)
    write_population_csv(p, tmp_path / "p.csv")
    sel = draw_sample(p, SamplingDesign(1.0, 0.5), seed=2, min_units=0)
    append_selection_csv(tmp_path / "p.csv", tmp_path / "s.csv", sel)
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0].endswith(",sampled")
    assert [int(r.rsplit(",", 1)[1]) for r in rows[1:]] == list(sel.indicators)
