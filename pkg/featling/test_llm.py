import json
from unittest.mock import MagicMock, patch

import pytest
import requests

from featling.config import ConfigError, LLMSettings
from featling.llm import (CompletionRequest, HttpClient, LLMError, ReplayClient, ReplayMissError, ScriptedClient,
                          make_client, request_key)


def fake_response(status_code, payload=None, text=''):
    response = MagicMock()
    response.status_code = status_code
    response.text = text or json.dumps(payload or {})
    response.json.return_value = payload
    return response


def ok(content='- Age > 50', finish_reason='stop'):
    return fake_response(200, {
        'choices': [{'message': {'role': 'assistant', 'content': content}, 'finish_reason': finish_reason}],
        'usage': {'prompt_tokens': 120, 'completion_tokens': 30},
    })


def client(**kwargs):
    return HttpClient(api_key='sk-test', base_url='https://llm.example/v1/', backoff_base=0, **kwargs)


def test_missing_api_key_names_the_variable():
    with pytest.raises(ConfigError, match="FEATLING_API_KEY"):
        HttpClient(api_key=None, base_url='https://llm.example/v1')


def test_request_payload_and_result():
    with patch('featling.llm.requests.post', return_value=ok()) as post:
        result = client().complete(CompletionRequest(prompt="hello", temperature=0.5, model_name='m'))

    args, kwargs = post.call_args
    assert args[0] == 'https://llm.example/v1/chat/completions'
    assert kwargs['headers']['Authorization'] == 'Bearer sk-test'
    assert kwargs['json']['messages'] == [{'role': 'user', 'content': 'hello'}]
    assert kwargs['json']['temperature'] == 0.5
    assert kwargs['json']['model'] == 'm'
    assert result.text == '- Age > 50'
    assert (result.prompt_tokens, result.completion_tokens) == (120, 30)


def test_rate_limit_is_retried():
    http = client()
    with patch('featling.llm.requests.post', side_effect=[fake_response(429, text='slow down'), ok()]) as post:
        result = http.complete(CompletionRequest(prompt="p"))
    assert post.call_count == 2
    assert result.text == '- Age > 50'
    assert http.usage_log[-1]['attempts'] == 2


def test_timeouts_are_retried():
    with patch('featling.llm.requests.post', side_effect=[requests.exceptions.Timeout('t'), ok()]) as post:
        client().complete(CompletionRequest(prompt="p"))
    assert post.call_count == 2


def test_backoff_sleeps_release_the_request_slot():
    http = client(max_concurrency=1)
    slot_free = []

    def is_free(*args, **kwargs):
        free = http._slots.acquire(blocking=False)
        if free:
            http._slots.release()
        slot_free.append(free)

    def post(*args, **kwargs):
        is_free()
        return responses.pop(0)

    responses = [fake_response(429), ok()]
    with patch('featling.llm.requests.post', side_effect=post), patch('time.sleep', side_effect=is_free):
        http.complete(CompletionRequest(prompt="p"))
    # held during each POST, free while backing off
    assert slot_free == [False, True, False]


def test_server_errors_give_up_after_max_attempts():
    with patch('featling.llm.requests.post', return_value=fake_response(503, text='down')) as post:
        with pytest.raises(LLMError, match="503"):
            client(max_attempts=3).complete(CompletionRequest(prompt="p"))
    assert post.call_count == 3


def test_client_errors_are_not_retried():
    with patch('featling.llm.requests.post', return_value=fake_response(401, text='bad key')) as post:
        with pytest.raises(LLMError, match="401"):
            client().complete(CompletionRequest(prompt="p"))
    assert post.call_count == 1


def test_malformed_response():
    with patch('featling.llm.requests.post', return_value=fake_response(200, {'choices': []})):
        with pytest.raises(LLMError, match="Malformed"):
            client().complete(CompletionRequest(prompt="p"))


def test_request_key_ignores_seed_and_sampling_caps():
    a = CompletionRequest(prompt="p", temperature=0.5, model_name='m', seed=1, max_tokens=10)
    b = CompletionRequest(prompt="p", temperature=0.5, model_name='m', seed=2, max_tokens=20)
    c = CompletionRequest(prompt="p", temperature=0.0, model_name='m')
    assert request_key(a) == request_key(b)
    assert request_key(a) != request_key(c)


def test_replay_records_then_serves(tmp_path):
    inner = ScriptedClient(lambda prompt, seed: f"answer to {prompt}")
    recorder = ReplayClient(tmp_path, mode='record', inner=inner)
    request = CompletionRequest(prompt="q1", seed=3)
    assert recorder.complete(request).text == "answer to q1"
    assert recorder.misses == 1 and inner.calls == 1

    stored = json.loads(recorder.path_for(request).read_text(encoding='utf-8'))
    assert stored['request']['prompt'] == "q1"
    assert stored['response']['text'] == "answer to q1"

    replay = ReplayClient(tmp_path, mode='strict')
    assert replay.complete(request).text == "answer to q1"
    assert replay.hits == 1
    with pytest.raises(ReplayMissError):
        replay.complete(CompletionRequest(prompt="q2"))


def test_make_client_kinds(tmp_path):
    assert isinstance(make_client(LLMSettings(kind='scripted'), lambda p, s: ''), ScriptedClient)
    with pytest.raises(ConfigError):
        make_client(LLMSettings(kind='scripted'))
    with pytest.raises(ConfigError):
        make_client(LLMSettings(kind='replay'))
    replay = make_client(LLMSettings(kind='replay', transcripts_dir=str(tmp_path)))
    assert isinstance(replay, ReplayClient) and replay.mode == 'strict'


def test_http_kind_without_key(monkeypatch):
    monkeypatch.delenv('FEATLING_API_KEY', raising=False)
    with pytest.raises(ConfigError, match="FEATLING_API_KEY"):
        make_client(LLMSettings(kind='http'))
