import pytest

from pdt_hfr.dataset import SynthSpec, gen_dataset


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    """The default synthetic dataset (30 identities, seed 42), generated once."""
    out = tmp_path_factory.mktemp("synth42")
    manifest = gen_dataset(SynthSpec(), out)
    return manifest, out


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """10 identities (6/2/2 split), 2 samples per domain, full 112x112 size."""
    out = tmp_path_factory.mktemp("synth_small")
    return gen_dataset(SynthSpec(n_identities=10, samples_per_domain=2, seed=3), out)


_ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects (criterion, title, passed, detail) rows for the summary below."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
