import pytest

from apigraph.corpus import SyntheticSpec, generate_synthetic_corpus
from apigraph.pipeline import prepare


@pytest.fixture(scope="session")
def small_prep():
    """Prepared features for a 120-app synthetic corpus."""
    return prepare(generate_synthetic_corpus(SyntheticSpec(n_benign=60, n_malware=60), 7))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
