import os
import re

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = re.match(r"test_criterion_(\d+)", item.name)
    if not m or item.module.__name__.rsplit(".", 1)[-1] != "test_acceptance":
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        details = [v for k, v in item.user_properties if k == "detail"]
        _CRITERIA.setdefault(int(m.group(1)), []).append((item.name, rep.outcome, details))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        runs = _CRITERIA[n]
        ok = all(o == "passed" for _, o, _ in runs)
        status = "PASS" if ok else ("SKIP" if all(o == "skipped" for _, o, _ in runs) else "FAIL")
        details = "; ".join(d for _, _, ds in runs for d in ds)
        terminalreporter.write_line(f"criterion {n}: {status}" + (f"  [{details}]" if details else ""))
