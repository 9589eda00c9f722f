import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "lab",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("lab")


@pytest.fixture
def tiny_encoder():
    from contrastlab.model import EncoderConfig

    return EncoderConfig(input_dim=16, widths=(12, 8), proj_hidden=8, embed_dim=4)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE, ACCEPTANCE_NOTES

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        status, detail = ACCEPTANCE.get(n, ("NOT RUN", ""))
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}".rstrip())
    for line in ACCEPTANCE_NOTES:
        terminalreporter.write_line(line)
