"""Shared fixtures: bundled market data, default models and small path sets."""
from __future__ import annotations

import functools

import numpy as np
import pytest

from ccpxva.cli import credit_models, default_g2
from ccpxva.exposure_margin import TradeSpec, resolve_trade
from ccpxva.marketdata import load_market_data
from ccpxva.models.correlation import solve_driver_correlations
from ccpxva.pricer import build_cube
from ccpxva.simulation import build_grid, generate_paths


@functools.lru_cache(maxsize=None)
def market():
    return load_market_data()


@functools.lru_cache(maxsize=None)
def g2_default():
    return default_g2()


@functools.lru_cache(maxsize=None)
def credit(scenario: str = "H/M"):
    return credit_models(market(), scenario)


@functools.lru_cache(maxsize=None)
def par_trade(direction: str = "receiver", maturity: float = 10.0):
    return resolve_trade(TradeSpec(direction, maturity), market().curve, g2_default())


def make_paths(n_paths: int, rho: float = 0.0, seed: int = 11, scenario: str = "H/M", dt: float = 1.0 / 12.0,
               g2=None, maturity: float = 10.0):
    g2 = g2 or g2_default()
    trade = par_trade("receiver", maturity)
    grid = build_grid(maturity, dt, trade.event_times)
    corr = solve_driver_correlations(rho, rho, g2)
    return generate_paths(g2, market().curve, credit(scenario), corr, grid, n_paths, seed)


def make_cube(n_paths: int, rho: float = 0.0, seed: int = 11, direction: str = "receiver",
              scenario: str = "H/M", dt: float = 1.0 / 12.0):
    return build_cube(make_paths(n_paths, rho, seed, scenario, dt), par_trade(direction))


@pytest.fixture(scope="session")
def md():
    return market()


@pytest.fixture(scope="session")
def g2():
    return g2_default()


@pytest.fixture(scope="session")
def hm_credit():
    return credit("H/M")


@pytest.fixture(scope="session")
def receiver():
    return par_trade("receiver")


@pytest.fixture(scope="session")
def payer():
    return par_trade("payer")


@pytest.fixture
def rng():
    return np.random.default_rng(20240526)
