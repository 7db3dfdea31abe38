from pathlib import Path

import pytest

from featling.llm import CompletionRequest, CompletionResult, ScriptedClient
from featling.schema import load_dataset, load_metadata
from featling.synthetic import solution_mix_responder

FIXTURES = Path(__file__).parent / "fixtures"


def read_fixture(name: str) -> str:
    """Fixture text without the file's final newline."""
    text = (FIXTURES / name).read_text(encoding='utf-8')
    return text[:-1] if text.endswith("\n") else text


class AbortingClient:
    """Fails the test if anything asks it for a completion."""

    def __init__(self):
        self.calls = 0

    def complete(self, request: CompletionRequest) -> CompletionResult:
        self.calls += 1
        raise AssertionError("LLM client called where no call is allowed")


@pytest.fixture
def heart_metadata_path():
    return FIXTURES / "heart_metadata.json"


@pytest.fixture
def heart_shots_path():
    return FIXTURES / "heart_shots.csv"


@pytest.fixture
def heart_schema(heart_metadata_path):
    schema, _, _ = load_metadata(heart_metadata_path)
    return schema


@pytest.fixture
def heart(heart_shots_path, heart_metadata_path):
    """(schema, task, 4-shot LabeledSet) from the stored Heart examples."""
    return load_dataset(heart_shots_path, heart_metadata_path)


@pytest.fixture
def heart_prompt():
    return read_fixture("heart_rule_prompt.txt")


@pytest.fixture
def heart_response():
    return read_fixture("heart_rule_response.txt")


@pytest.fixture
def mix_client():
    return ScriptedClient(solution_mix_responder)


@pytest.fixture
def aborting_client():
    return AbortingClient()


@pytest.fixture
def output_dir(tmp_path):
    return tmp_path / "output"
