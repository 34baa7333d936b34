import json
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import brentq
from scipy.stats import norm

from carryover.exceptions import ForecastInvalid, InputError, UsageError
from carryover.forecast import (
    GmmForecast,
    ReservoirForecast,
    ScalarGmm,
    SeasonProfile,
    dump_forecast,
    expected_future_inflow,
    gmm_cdf,
    gmm_quantile,
    load_forecast,
    project_affine,
    sample_inflows,
    synthesize_forecast,
    validate_forecast,
)
from carryover.models import CascadeSystem, Reservoir


def _make_system(*ids: str) -> CascadeSystem:
    return CascadeSystem(
        reservoirs=[Reservoir(id=rid, v_min=0.0, v_max=10.0) for rid in ids]
    )


def _make_forecast(
    mu: list[float], var: list[float], *, rid: str = "r"
) -> GmmForecast:
    return GmmForecast(
        reservoirs={rid: ReservoirForecast(beta=[1.0], mu=[mu], sigma=[var])}
    )


def test_single_gaussian_quantile() -> None:
    g = ScalarGmm(beta=[1.0], mu=[10.0], var=[4.0])
    assert gmm_quantile(g, 0.995) == pytest.approx(10 + 2 * 2.5758293035489, abs=1e-8)
    standard = ScalarGmm(beta=[1.0], mu=[0.0], var=[1.0])
    assert gmm_quantile(standard, 0.975) == pytest.approx(1.959964, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_mixture_quantile(seed: int) -> None:
    rng = np.random.default_rng(seed)
    beta = rng.dirichlet(np.ones(3))
    g = ScalarGmm(
        beta=beta.tolist(),
        mu=rng.uniform(-5, 5, 3).tolist(),
        var=rng.uniform(0.1, 4.0, 3).tolist(),
    )
    for p in (0.0025, 0.3, 0.9975):
        rho = gmm_quantile(g, p)
        assert gmm_cdf(g, rho) == pytest.approx(p, abs=1e-10)
        reference = brentq(
            lambda x, p=p: sum(
                b * norm.cdf(x, m, np.sqrt(v))
                for b, m, v in zip(g.beta, g.mu, g.var, strict=True)
            )
            - p,
            -100,
            100,
            xtol=1e-12,
        )
        assert rho == pytest.approx(reference, abs=1e-7)


def test_step_quantile() -> None:
    g = ScalarGmm(beta=[0.25, 0.75], mu=[3.0, 1.0], var=[0.0, 0.0])
    assert gmm_quantile(g, 0.5) == 1.0
    assert gmm_quantile(g, 0.8) == 3.0
    assert gmm_cdf(g, 2.0) == 0.75


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1])
def test_quantile_level(p: float) -> None:
    with pytest.raises(UsageError):
        gmm_quantile(ScalarGmm(beta=[1.0], mu=[0.0], var=[1.0]), p)


def test_scalar_gmm_validation() -> None:
    with pytest.raises(ValueError):
        ScalarGmm(beta=[0.5], mu=[0.0], var=[1.0])
    with pytest.raises(ValueError):
        ScalarGmm(beta=[1.0], mu=[0.0], var=[-1.0])
    with pytest.raises(ValueError):
        ScalarGmm(beta=[1.0], mu=[0.0, 1.0], var=[1.0])


def test_project_affine() -> None:
    forecast = GmmForecast(
        reservoirs={
            "r": ReservoirForecast(
                beta=[1.0],
                mu=[[1.0, 2.0, 3.0]],
                sigma=[[[1.0, 0.5, 0.0], [0.5, 2.0, 0.0], [0.0, 0.0, 3.0]]],
            )
        }
    )
    g = project_affine(forecast, "r", [1.0, 1.0, 0.0])
    assert g.mu == pytest.approx([3.0])
    assert g.var == pytest.approx([1.0 + 2.0 + 2 * 0.5])
    with pytest.raises(UsageError):
        project_affine(forecast, "r", [1.0, 1.0])
    with pytest.raises(ForecastInvalid):
        project_affine(forecast, "other", [1.0, 1.0, 1.0])
    assert expected_future_inflow(forecast, "r", 1, 2) == pytest.approx(5.0)


def test_sigma_shorthands() -> None:
    diagonal = ReservoirForecast(beta=[1.0], mu=[[1.0, 2.0]], sigma=[[4.0, 9.0]])
    flat = ReservoirForecast(beta=[1.0], mu=[[1.0, 2.0]], sigma=[[4.0, 0, 0, 9.0]])
    assert diagonal.sigma == [[[4.0, 0.0], [0.0, 9.0]]]
    assert flat.sigma == diagonal.sigma
    assert diagonal.window(1, 2).sigma == [[[9.0]]]


def test_validate_forecast() -> None:
    system = _make_system("r", "s")
    forecast = GmmForecast(
        reservoirs={
            "r": ReservoirForecast(
                beta=[0.6, 0.6], mu=[[1.0], [2.0]], sigma=[[1.0], [1.0]]
            ),
        }
    )
    problems = validate_forecast(forecast, system, weeks=2)
    assert "r: weights must be nonnegative and sum to 1" in problems
    assert "r: 1 weeks, expected 2" in problems
    assert "s: missing forecast" in problems
    not_psd = GmmForecast(
        reservoirs={
            "r": ReservoirForecast(
                beta=[1.0], mu=[[1.0, 1.0]], sigma=[[[1.0, 2.0], [2.0, 1.0]]]
            )
        }
    )
    assert validate_forecast(not_psd) == ["r: covariance 0 not positive semidefinite"]


def test_load_forecast(tmp_path: Path) -> None:
    system = _make_system("r")
    forecast = _make_forecast([1.0, 2.0], [0.5, 0.5])
    path = tmp_path / "forecast.json"
    dump_forecast(forecast, path)
    assert load_forecast(path, system, 2) == forecast
    with pytest.raises(ForecastInvalid):
        load_forecast(path, system, 3)
    with pytest.raises(InputError):
        load_forecast(tmp_path / "missing.json")
    path.write_text(json.dumps({"reservoirs": {"r": {"beta": "x"}}}))
    with pytest.raises(InputError):
        load_forecast(path)


def test_sample_inflows() -> None:
    forecast = _make_forecast([5.0, 10.0], [1.0, 4.0])
    samples = sample_inflows(forecast, "r", 20000, np.random.default_rng(0))
    assert samples.shape == (20000, 2)
    assert samples.mean(axis=0) == pytest.approx([5.0, 10.0], abs=0.1)
    assert samples.std(axis=0) == pytest.approx([1.0, 2.0], abs=0.1)


def test_synthesize_forecast() -> None:
    system = _make_system("r", "s")
    profile = SeasonProfile.preset("wet", {"r": 10.0, "s": 2.0})
    assert profile.base_inflow == {"r": 15.0, "s": 3.0}
    forecast = synthesize_forecast(7, system, 4, 2, profile, start_week=10)
    assert forecast == synthesize_forecast(7, system, 4, 2, profile, start_week=10)
    assert forecast.weeks == 6
    assert validate_forecast(forecast, system, 6) == []
    expected = [profile.weekly_mean("r", 10 + k) for k in range(6)]
    assert forecast.get("r").mean() == pytest.approx(expected)
    with pytest.raises(UsageError):
        SeasonProfile.preset("monsoon", {})


def test_profiles_stay_ordered() -> None:
    system = _make_system("r")
    base = {"r": 10.0}
    wet = synthesize_forecast(3, system, 2, 2, SeasonProfile.preset("wet", base))
    dry = synthesize_forecast(3, system, 2, 2, SeasonProfile.preset("dry", base))
    assert np.all(wet.get("r").mean() > dry.get("r").mean())
