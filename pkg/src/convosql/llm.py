"""Chat-completion clients: a remote OpenAI-compatible HTTP client and a
deterministic scripted mock sharing one interface.

Every caller in the pipeline goes through complete(); the streaming contract
is that the concatenated chunks handed to on_chunk equal the returned text.
"""

import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field

import requests

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.0
DEFAULT_MAX_TOKENS = 1024


class LlmError(Exception):
    pass


class Transport(LlmError):
    """Network or HTTP-level failure."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class BadResponse(LlmError):
    """The endpoint answered but the reply was not parseable."""


class MockExhausted(LlmError):
    """A sequence mock ran out of scripted replies."""


class MockMiss(LlmError):
    """A keyed mock saw a prompt it has no reply for."""


@dataclass
class ChatMessage:
    role: str  # system | user | assistant
    content: str

    def as_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass
class GenerationParams:
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS


@dataclass
class EndpointConfig:
    base_url: str
    api_key: str = field(repr=False, default="")
    model_name: str = ""


def _check_messages(messages):
    if not messages:
        raise ValueError("messages must be non-empty")
    if messages[0].role != "system":
        raise ValueError("first message must have role=system")


class HttpChatClient:
    """Client for any endpoint speaking the chat-completions JSON shape."""

    def __init__(self, config: EndpointConfig, timeout: float = 60.0):
        self.config = config
        self.timeout = timeout

    def complete(self, messages, params: GenerationParams | None = None, on_chunk=None) -> str:
        _check_messages(messages)
        params = params or GenerationParams()
        last_exc: Transport | None = None
        for attempt in range(2):
            try:
                return self._request(messages, params, on_chunk)
            except Transport as exc:
                last_exc = exc
                log.warning("chat request failed (attempt %d): %s", attempt + 1, exc)
        raise last_exc

    def _request(self, messages, params, on_chunk) -> str:
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        payload = {
            "model": self.config.model_name,
            "messages": [m.as_dict() for m in messages],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "stream": on_chunk is not None,
        }
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = "Bearer " + self.config.api_key
        log.debug("POST %s model=%s stream=%s", url, self.config.model_name, payload["stream"])
        try:
            resp = requests.post(
                url,
                json=payload,
                headers=headers,
                timeout=self.timeout,
                stream=on_chunk is not None,
            )
        except requests.RequestException as exc:
            raise Transport(f"request failed: {exc}") from exc
        if resp.status_code != 200:
            raise Transport(f"endpoint returned HTTP {resp.status_code}", status=resp.status_code)
        if on_chunk is None:
            return self._parse_full(resp)
        return self._parse_stream(resp, on_chunk)

    @staticmethod
    def _parse_full(resp) -> str:
        try:
            data = resp.json()
            content = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BadResponse(f"malformed completion response: {exc}") from exc
        if not isinstance(content, str):
            raise BadResponse("completion content is not text")
        return content

    @staticmethod
    def _parse_stream(resp, on_chunk) -> str:
        parts: list[str] = []
        saw_done = False
        for raw in resp.iter_lines(decode_unicode=True):
            if not raw:
                continue
            if not raw.startswith("data:"):
                continue
            data = raw[len("data:"):].strip()
            if data == "[DONE]":
                saw_done = True
                break
            try:
                obj = json.loads(data)
                delta = obj["choices"][0].get("delta", {})
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BadResponse(f"malformed stream event: {exc}") from exc
            piece = delta.get("content")
            if piece:
                on_chunk(piece)
                parts.append(piece)
        if not saw_done and not parts:
            raise BadResponse("stream ended without any content")
        return "".join(parts)


@dataclass
class CallRecord:
    messages: list[ChatMessage]
    reply: str


class ScriptedMock:
    """Deterministic stand-in for a chat endpoint.

    Sequence mode replays a fixed list of replies, one per call, and fails
    loudly when exhausted. Keyed mode maps a digest of the rendered messages
    to a reply and fails loudly on unknown prompts. A script entry may be a
    list of strings, in which case it is delivered chunk by chunk.
    """

    def __init__(self, sequence=None, keyed=None):
        if (sequence is None) == (keyed is None):
            raise ValueError("exactly one of sequence/keyed must be given")
        self._sequence = list(sequence) if sequence is not None else None
        self._keyed = dict(keyed) if keyed is not None else None
        self._cursor = 0
        self._lock = threading.Lock()
        self.calls: list[CallRecord] = []

    @property
    def mode(self) -> str:
        return "sequence" if self._sequence is not None else "keyed"

    @staticmethod
    def digest(messages) -> str:
        rendered = json.dumps([[m.role, m.content] for m in messages], ensure_ascii=False)
        return hashlib.sha256(rendered.encode("utf-8")).hexdigest()[:16]

    def complete(self, messages, params: GenerationParams | None = None, on_chunk=None) -> str:
        _check_messages(messages)
        with self._lock:
            if self._sequence is not None:
                if self._cursor >= len(self._sequence):
                    raise MockExhausted(
                        f"script exhausted after {self._cursor} calls"
                    )
                entry = self._sequence[self._cursor]
                self._cursor += 1
            else:
                key = self.digest(messages)
                if key not in self._keyed:
                    raise MockMiss(f"no scripted reply for prompt digest {key}")
                entry = self._keyed[key]
            chunks = entry if isinstance(entry, list) else [entry]
            reply = "".join(chunks)
            self.calls.append(CallRecord(messages=list(messages), reply=reply))
        if on_chunk is not None:
            for chunk in chunks:
                if chunk:
                    on_chunk(chunk)
        return reply

    @property
    def remaining(self) -> int:
        if self._sequence is None:
            return len(self._keyed)
        return len(self._sequence) - self._cursor
