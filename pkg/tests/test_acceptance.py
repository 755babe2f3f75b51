"""Acceptance suite: one test per headline criterion, each printing its
pass/fail line.  Run with `pytest tests/test_acceptance.py -s` to see the
lines, or `ddopt accept --suite all` for the same checks from the CLI."""

import pytest

from ddopt.acceptance import SUITES, run_criterion


@pytest.mark.parametrize("name", list(SUITES))
def test_criterion(name):
    res = run_criterion(name)
    print(res.line())
    assert res.passed, res.details
