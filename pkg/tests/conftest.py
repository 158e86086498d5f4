import pytest

from helpers import make_job, make_site


@pytest.fixture
def job_factory():
    return make_job


@pytest.fixture
def site_factory():
    return make_site
