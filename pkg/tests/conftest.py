import os

import pytest
from hypothesis import HealthCheck, settings

from scenforge import kernels

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

BACKENDS = kernels.backends()


@pytest.fixture(params=sorted(BACKENDS))
def impl(request):
    """Each available kernel backend in turn."""
    return BACKENDS[request.param]


@pytest.fixture(scope="session")
def pg_db(tmp_path_factory):
    from scenforge.database import build_database
    from scenforge.pg import PGConverter

    return build_database(PGConverter(), range(6), tmp_path_factory.mktemp("pgdb") / "pg")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
