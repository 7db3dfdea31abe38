"""
Chat-completion clients: OpenAI-compatible HTTP, record/replay transcripts,
and scripted responders for offline runs.
"""

import hashlib
import json
import logging
import threading
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Union

import requests
from tenacity import Retrying, before_sleep_log, retry_if_exception, stop_after_attempt, wait_exponential

from featling.config import (API_KEY_ENV, MAX_CONCURRENT_REQUESTS, MAX_TOKENS, MODEL_NAME, TEMPERATURE, TOP_P,
                             ConfigError, LLMSettings, get_api_key, get_base_url)

logger = logging.getLogger(__name__)

REQUEST_TIMEOUT = 120  # seconds
MAX_ATTEMPTS = 5
BACKOFF_BASE = 1.0  # seconds, doubled per retry


class LLMError(RuntimeError):
    """Completion request failed or returned an unusable response."""


class ReplayMissError(LLMError):
    """No recorded transcript for a request in strict replay mode."""


class _RetryableStatus(LLMError):
    def __init__(self, status_code: int, body: str):
        super().__init__(f"HTTP {status_code}: {body[:200]}")
        self.status_code = status_code


class ClientKind(str, Enum):
    HTTP = 'http'
    REPLAY = 'replay'
    SCRIPTED = 'scripted'


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    temperature: float = TEMPERATURE
    top_p: float = TOP_P
    max_tokens: int = MAX_TOKENS
    model_name: str = MODEL_NAME
    seed: Optional[int] = None  # only scripted responders see it


@dataclass(frozen=True)
class CompletionResult:
    text: str
    finish_reason: str = 'stop'
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency: float = 0.0


class LLMClient(Protocol):
    def complete(self, request: CompletionRequest) -> CompletionResult:
        ...


def _is_retryable(error: BaseException) -> bool:
    return isinstance(error, (_RetryableStatus, requests.exceptions.Timeout, requests.exceptions.ConnectionError))


class HttpClient:
    """
    POST <base_url>/chat/completions with a single user message.

    Retries 429, 5xx, timeouts and connection errors with exponential backoff;
    a semaphore caps concurrent requests across worker threads.
    """

    def __init__(self, api_key: Optional[str], base_url: str, max_concurrency: int = MAX_CONCURRENT_REQUESTS,
                 max_attempts: int = MAX_ATTEMPTS, backoff_base: float = BACKOFF_BASE,
                 timeout: float = REQUEST_TIMEOUT):
        if not api_key:
            raise ConfigError(f"LLM API key not configured: set {API_KEY_ENV} (e.g. in .secrets/featling.env)")
        self.api_key = api_key
        self.url = base_url.rstrip('/') + '/chat/completions'
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.timeout = timeout
        self._slots = threading.BoundedSemaphore(max_concurrency)
        self._lock = threading.Lock()
        self.usage_log: List[Dict] = []

    def _post(self, payload: Dict) -> Dict:
        headers = {
            'Authorization': f'Bearer {self.api_key}',
            'Content-Type': 'application/json'
        }
        with self._slots:
            response = requests.post(self.url, headers=headers, json=payload, timeout=self.timeout)
        if response.status_code == 429 or response.status_code >= 500:
            logger.warning(f"Model {payload['model']}: HTTP {response.status_code}, will retry")
            raise _RetryableStatus(response.status_code, response.text)
        if response.status_code != 200:
            raise LLMError(f"HTTP {response.status_code}: {response.text[:200]}")
        return response.json()

    def complete(self, request: CompletionRequest) -> CompletionResult:
        payload = {
            "model": request.model_name,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens
        }
        retrying = Retrying(
            stop=stop_after_attempt(self.max_attempts),
            wait=wait_exponential(multiplier=self.backoff_base, exp_base=2),
            retry=retry_if_exception(_is_retryable),
            before_sleep=before_sleep_log(logger, logging.WARNING),
            reraise=True,
        )

        start = time.perf_counter()
        try:
            result = retrying(self._post, payload)
        except LLMError:
            raise
        except requests.exceptions.RequestException as e:
            raise LLMError(f"Request failed after {self.max_attempts} attempts: {e}") from e
        latency = time.perf_counter() - start

        try:
            choice = result['choices'][0]
            text = choice['message']['content']
        except (KeyError, IndexError, TypeError) as e:
            raise LLMError(f"Malformed API response: {e}") from e
        if not isinstance(text, str):
            raise LLMError("Malformed API response: content is not text")

        usage = result.get('usage', {}) or {}
        prompt_tokens = usage.get('prompt_tokens', 0)
        completion_tokens = usage.get('completion_tokens', 0)
        attempts = retrying.statistics.get('attempt_number', 1)
        with self._lock:
            self.usage_log.append({
                'model': request.model_name,
                'prompt_tokens': prompt_tokens,
                'completion_tokens': completion_tokens,
                'attempts': attempts,
            })
        logger.info(f"Model {request.model_name}: Prompt={prompt_tokens}, Completion={completion_tokens}, "
                    f"attempts={attempts}, {latency:.2f}s")
        return CompletionResult(
            text=text,
            finish_reason=choice.get('finish_reason') or 'stop',
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            latency=latency,
        )


def request_key(request: CompletionRequest) -> str:
    """SHA-256 of (prompt, temperature, model_name)."""
    material = json.dumps([request.prompt, request.temperature, request.model_name], ensure_ascii=False)
    return hashlib.sha256(material.encode('utf-8')).hexdigest()


class ReplayClient:
    """
    Transcript store: one <key>.json per request with {request, response, timestamp}.

    strict mode raises ReplayMissError on a miss; record mode asks the inner
    client and saves its answer.
    """

    def __init__(self, store_dir: Union[str, Path], mode: str = 'strict', inner: Optional[LLMClient] = None):
        if mode not in ('strict', 'record'):
            raise ConfigError(f"Unknown replay mode '{mode}'")
        if mode == 'record' and inner is None:
            raise ConfigError("Record mode needs an inner client")
        self.store_dir = Path(store_dir)
        self.mode = mode
        self.inner = inner
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def path_for(self, request: CompletionRequest) -> Path:
        return self.store_dir / f"{request_key(request)}.json"

    def complete(self, request: CompletionRequest) -> CompletionResult:
        path = self.path_for(request)
        if path.exists():
            with open(path, 'r', encoding='utf-8') as f:
                record = json.load(f)
            with self._lock:
                self.hits += 1
            response = record['response']
            return CompletionResult(
                text=response['text'],
                finish_reason=response.get('finish_reason', 'stop'),
                prompt_tokens=response.get('prompt_tokens', 0),
                completion_tokens=response.get('completion_tokens', 0),
            )

        with self._lock:
            self.misses += 1
        if self.mode == 'strict':
            raise ReplayMissError(f"No transcript {path.name} in {self.store_dir}")

        result = self.inner.complete(request)
        record = {
            'request': asdict(request),
            'response': {
                'text': result.text,
                'finish_reason': result.finish_reason,
                'prompt_tokens': result.prompt_tokens,
                'completion_tokens': result.completion_tokens,
            },
            'timestamp': datetime.now(timezone.utc).isoformat(),
        }
        with self._lock:
            self.store_dir.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(record, f, ensure_ascii=False, indent=2, sort_keys=True)
        logger.debug(f"Recorded transcript {path.name}")
        return CompletionResult(
            text=result.text,
            finish_reason=result.finish_reason,
            prompt_tokens=result.prompt_tokens,
            completion_tokens=result.completion_tokens,
        )


Responder = Callable[[str, Optional[int]], str]


class ScriptedClient:
    """Deterministic responder fn(prompt, seed) -> text."""

    def __init__(self, responder: Responder):
        self.responder = responder
        self._lock = threading.Lock()
        self.calls = 0

    def complete(self, request: CompletionRequest) -> CompletionResult:
        with self._lock:
            self.calls += 1
        return CompletionResult(text=self.responder(request.prompt, request.seed))


def make_client(settings: LLMSettings, responder: Optional[Responder] = None) -> LLMClient:
    """
    Build the client described by the llm settings.

    Args:
        settings: LLMSettings from the run config
        responder: scripted responder (scripted kind, or inner client when recording)

    Returns:
        Client implementing complete()
    """
    kind = ClientKind(settings.kind)

    def http() -> HttpClient:
        return HttpClient(
            api_key=get_api_key(),
            base_url=settings.base_url or get_base_url(),
            max_concurrency=settings.max_concurrency,
        )

    def scripted() -> ScriptedClient:
        if responder is None:
            raise ConfigError("Scripted client needs a responder (llm.script)")
        return ScriptedClient(responder)

    if kind is ClientKind.HTTP:
        return http()
    if kind is ClientKind.SCRIPTED:
        return scripted()

    if not settings.transcripts_dir:
        raise ConfigError("Replay client needs llm.transcripts_dir")
    inner = None
    if settings.replay_mode == 'record':
        inner = scripted() if settings.record_with == 'scripted' else http()
    return ReplayClient(settings.transcripts_dir, mode=settings.replay_mode, inner=inner)
