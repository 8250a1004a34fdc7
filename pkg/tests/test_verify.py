"""Property-suite plumbing."""

import pytest

from modules.errors import ConfigError
from modules.verify import SUITES, SuiteResult, run_suite


def test_suite_result_summary():
    result = SuiteResult("demo")
    result.add("first", True)
    result.add("second", False, "off by one")
    assert not result.passed
    assert result.summary() == "demo: 1/2 checks passed"


def test_known_suites():
    assert sorted(SUITES) == ["beam-oracle", "gating", "gradcheck", "interp", "rnnt-oracle"]


def test_unknown_suite_rejected():
    with pytest.raises(ConfigError):
        run_suite("fuzz")


@pytest.mark.slow
@pytest.mark.parametrize("name", sorted(SUITES))
def test_full_suites_pass(name):
    result = run_suite(name, seed=0)
    assert result.passed, [c for c in result.checks if not c.passed]
