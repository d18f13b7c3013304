from pathlib import Path

import pytest

from schemagm.schema import ModelConfig, apply_config, parse_ddl

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures():
    return FIXTURES


@pytest.fixture
def umr_schema():
    return parse_ddl((FIXTURES / "umr.sql").read_text())


@pytest.fixture
def umr_config():
    return ModelConfig.from_json((FIXTURES / "umr_config.json").read_text())


@pytest.fixture
def umr_applied(umr_schema, umr_config):
    return apply_config(umr_schema, umr_config)


@pytest.fixture
def players_schema():
    return parse_ddl((FIXTURES / "players.sql").read_text())


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
