import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def pqp():
    from offdiag.ncpoly import compile_poly, parse_ncpoly
    return compile_poly(parse_ncpoly("p*q*p"), name="pqp")


@pytest.fixture(scope="session")
def jacobi_n2():
    from offdiag.jacobi import JacobiSpec, compile_jacobi
    return compile_jacobi(JacobiSpec("0", "n^2"), name="b=n^2")
