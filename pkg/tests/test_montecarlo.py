import numpy as np
import pytest
from numpy.testing import assert_array_equal

from fpspatial.dgp import DgpConfig
from fpspatial.estimation import ModelSpec
from fpspatial.montecarlo import (
    SUMMARY_ROWS,
    ExperimentConfig,
    PopulationConfig,
    VarianceConfig,
    coverage_rate,
    estimator_summaries,
    run_experiment,
    select_bandwidth,
    summarize,
    write_replications_csv,
    write_summary_csv,
)
from fpspatial.sampling import SamplingDesign


def small_config(**kw):
    base = dict(population=PopulationConfig(m=60, seed=2),
                dgp=DgpConfig("individual_threshold_mvn", p_x=0.5),
                variance=VarianceConfig(bandwidths=(1.0, 2.0, 3.0)),
                replications=12, seed=7, truth_reps=2000)
    base.update(kw)
    return ExperimentConfig(**base)


def test_coverage_examples():
    est = np.array([0.1, -0.3, 0.2])
    assert coverage_rate(est, np.full(3, 1e9), 0.0) == (1.0, 3)
    assert coverage_rate(est, np.zeros(3), 0.0) == (0.0, 3)
    rate, n = coverage_rate(est, np.array([1.0, np.nan, 1e-9]), 0.0)
    assert (rate, n) == (0.5, 2)
    rate, n = coverage_rate(est, np.full(3, np.nan), 0.0)
    assert np.isnan(rate) and n == 0
    with pytest.raises(ValueError):
        coverage_rate(est, est, 0.0, level=1.0)


def test_coverage_of_a_correct_pivot():
    rng = np.random.default_rng(0)
    se = rng.uniform(0.5, 2.0, 100_000)
    est = 3.0 + se * rng.standard_normal(se.size)
    rate, _ = coverage_rate(est, se, 3.0, 0.95)
    assert abs(rate - 0.95) <= 0.005


def test_coverage_critical_value():
    # |est - truth| = 1.959 is inside, 1.961 outside for se = 1
    rate, _ = coverage_rate(np.array([1.959, 1.961]), np.ones(2), 0.0)
    assert rate == 0.5


def test_select_bandwidth_examples():
    oracle = 1.0
    se = np.array([[0.5, 0.5], [1.0, 1.0], [2.0, 2.0]])
    assert select_bandwidth(se, oracle, "mse") == 1
    assert select_bandwidth(se, oracle, "bias") == 1
    above = np.array([[1.1, 1.2], [1.3, 1.4], [1.5, 1.6]])
    assert select_bandwidth(above, oracle, "mse") == 0
    assert select_bandwidth(above, oracle, "bias") == 0
    tie = np.array([[0.9], [1.1]])
    assert select_bandwidth(tie, oracle, "bias") == 0
    with pytest.raises(ValueError):
        select_bandwidth(se, oracle, "median")


def test_select_bandwidth_brute_force():
    rng = np.random.default_rng(4)
    se = rng.uniform(0.5, 1.5, size=(3, 50))
    oracle = 1.02
    mse = [np.mean((row - oracle) ** 2) for row in se]
    bias = [abs(np.mean(row) - oracle) for row in se]
    assert select_bandwidth(se, oracle, "mse") == int(np.argmin(mse))
    assert select_bandwidth(se, oracle, "bias") == int(np.argmin(bias))


@pytest.fixture(scope="module")
def small_result():
    return run_experiment(small_config())


def test_summary_layout(small_result):
    rows = summarize(small_result)
    assert tuple(name for name, _ in rows) == SUMMARY_ROWS
    assert [n for n, _ in summarize(small_result, estimators=())] == ["coeff", "std"]
    assert rows == summarize(small_result)


def test_counts_are_conserved(small_result):
    for s in estimator_summaries(small_result):
        assert s.valid + s.excluded == small_result.replications
        assert 0 <= s.coverage <= 1


def test_same_seed_same_result_any_thread_count(small_result):
    again = run_experiment(small_config(), threads=3)
    for name in ("estimates", "se_ehw", "se_cluster", "se_shac", "sample_size"):
        assert_array_equal(getattr(again, name), getattr(small_result, name))
    other = run_experiment(small_config(seed=8))
    assert not np.array_equal(other.estimates, small_result.estimates)


def test_single_replication_has_undefined_oracle_std():
    res = run_experiment(small_config(replications=1, dgp=DgpConfig("individual_bernoulli", p_u=0.0),
                                      truth=0.0))
    assert not res.oracle_std_defined
    assert np.isnan(dict(summarize(res))["std"])


def test_soft_failures_are_recorded():
    # a spillover cutoff below every pair distance leaves an all-zero regressor
    cfg = small_config(model=ModelSpec(spillover=True, spillover_cutoff=1e-9), replications=5,
                       truth=0.0)
    res = run_experiment(cfg)
    assert res.status == ["RankDeficientError"] * 5
    assert np.isnan(res.estimates).all()
    for s in estimator_summaries(res, ("EHW", "cluster")):
        assert (s.valid, s.excluded) == (0, 5)
        assert np.isnan(s.coverage)


def test_oracle_interval_covers_at_nominal_rate():
    cfg = small_config(population=PopulationConfig(m=81, seed=3),
                       dgp=DgpConfig("individual_bernoulli", p_u=0.3), replications=600,
                       variance=VarianceConfig(bandwidths=(1.0,)), truth_reps=20_000)
    res = run_experiment(cfg)
    rate, n = coverage_rate(res.estimates, np.full(n_ := res.replications, res.oracle_std),
                            res.truth, 0.95)
    assert abs(rate - 0.95) <= 3 * np.sqrt(0.95 * 0.05 / n_)


def test_csv_outputs(tmp_path, small_result):
    write_replications_csv(tmp_path / "r.csv", [("a", small_result)])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("scenario,replication,estimator,kernel,bandwidth")
    assert len(lines) == 1 + 12 * (2 + 3)
    write_summary_csv(tmp_path / "s.csv", [("a", summarize(small_result)),
                                            ("b", summarize(small_result))])
    s = (tmp_path / "s.csv").read_text().splitlines()
    assert s[0] == "statistic,a,b"
    assert [row.split(",")[0] for row in s[1:]] == list(SUMMARY_ROWS)


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(replications=0)
    with pytest.raises(ValueError):
        VarianceConfig(bandwidths=(2.0, 1.0))
    with pytest.raises(ValueError):
        VarianceConfig(bandwidths=(0.0, 1.0))
    assert PopulationConfig(dim=18).size(SamplingDesign(1.0, 0.01)) == 32_400
    assert PopulationConfig(dim=36).size(SamplingDesign()) == 1296
