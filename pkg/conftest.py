"""
Shared pytest configuration for serialroc tests
"""

import os
import logging

import pytest

from modules.scores import MatcherMarginals, SynthSpec, parse_score_table

FIXTURES_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'fixtures')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: Monte-Carlo acceptance runs (minutes)')


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch):
    """No file logging and default settings for every test"""
    monkeypatch.setenv('SERIALROC_LOG_DIR', '')
    for name in ('SERIALROC_LOG_LEVEL', 'SERIALROC_WORKERS', 'SERIALROC_MIN_CLASS_ROWS', 'SERIALROC_SEED'):
        monkeypatch.delenv(name, raising=False)
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, '_serialroc_handler', False):
            root.removeHandler(handler)
            handler.close()


@pytest.fixture
def fixture_path():
    def resolve(name: str) -> str:
        return os.path.join(FIXTURES_DIR, name)
    return resolve


@pytest.fixture
def three_matcher_table(fixture_path):
    with open(fixture_path('three_matchers.csv'), encoding='utf-8') as f:
        return parse_score_table(f.read())


@pytest.fixture
def gaussian_spec():
    """Factory: unit-variance matchers with impostor mean 0 and genuine mean d'"""
    def build(dprimes, rho=0.0, n_genuine=1000, n_impostor=10000, impostor_shift=0.0):
        matchers = [
            MatcherMarginals(f"m{i + 1}", float(d), 1.0, float(impostor_shift), 1.0)
            for i, d in enumerate(dprimes)
        ]
        return SynthSpec.equicorrelated(matchers, rho, n_genuine, n_impostor)
    return build
