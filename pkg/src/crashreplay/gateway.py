"""Language-model gateway: request contract, JSON-array filtering, mocks.

Every model call in the pipeline goes through a gateway.  Replies are
filtered down to a strict JSON action array (models pad their answers with
prose); a scriptable mock makes the whole pipeline deterministic offline.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path


class GatewayError(Exception):
    """Base error for gateway failures."""


class TransportError(GatewayError):
    pass


class GatewayTimeout(TransportError):
    pass


class BudgetExceeded(GatewayError):
    """The caller-supplied deadline passed before the call could be made."""


class ExhaustedScript(GatewayError):
    """A mock script has no entry left that matches the prompt."""


class NoActionableOutput(GatewayError):
    """The model produced no usable action array, even after one repair attempt."""


class MalformedCommandError(GatewayError):
    """One or more commands in a parsed array violate their invariants."""

    def __init__(self, issues: list[tuple[int, str]]):
        self.issues = issues
        super().__init__("; ".join(f"command {i}: {reason}" for i, reason in issues))


ENV_ENDPOINT = "CRASHREPLAY_LLM_ENDPOINT"
ENV_MODEL = "CRASHREPLAY_LLM_MODEL"
ENV_API_KEY = "CRASHREPLAY_LLM_API_KEY"


def load_template(name: str) -> str:
    return resources.files("crashreplay").joinpath("templates", name).read_text(encoding="utf-8")


@dataclass
class LlmConfig:
    endpoint: str
    model_name: str
    request_timeout: float = 30.0
    max_retries: int = 2
    temperature: float = 0.0
    api_key: str | None = None

    def __post_init__(self) -> None:
        if self.request_timeout <= 0:
            raise ValueError("request_timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @classmethod
    def from_env(cls, **overrides) -> "LlmConfig":
        endpoint = os.environ.get(ENV_ENDPOINT)
        model = os.environ.get(ENV_MODEL)
        if not endpoint or not model:
            raise GatewayError(
                f"live mode needs {ENV_ENDPOINT} and {ENV_MODEL} set in the environment"
            )
        return cls(
            endpoint=endpoint,
            model_name=model,
            api_key=os.environ.get(ENV_API_KEY),
            **overrides,
        )


#: Device verbs accepted in action commands.
DEVICE_VERBS = frozenset(
    {"click", "set_text", "scroll", "swipe", "rotate", "long_click", "double_click", "back", "restart"}
)

#: Fixed verb normalization table; grammar names map onto device verbs.
VERB_ALIASES = {
    "tap": "click",
    "input": "set_text",
    "long tap": "long_click",
    "double tap": "double_click",
}

_SCROLL_DIRECTIONS = frozenset({"up", "down", "left", "right"})
_ROTATE_DIRECTIONS = frozenset({"landscape", "portrait"})


@dataclass(frozen=True)
class ActionCommand:
    """One executable device action in the JSON protocol."""

    action: str
    feature: str | None = None
    input_text: str | None = None
    direction: str | None = None
    duration_ms: int | None = None

    def to_dict(self) -> dict:
        out: dict = {"action": self.action}
        if self.feature is not None:
            out["feature"] = self.feature
        if self.input_text is not None:
            out["input_text"] = self.input_text
        if self.direction is not None:
            out["direction"] = self.direction
        if self.duration_ms is not None:
            out["duration"] = self.duration_ms
        return out

    def problems(self) -> list[str]:
        issues = []
        if self.action not in DEVICE_VERBS:
            issues.append(f"unknown action {self.action!r}")
            return issues
        if self.action in ("click", "long_click", "double_click", "set_text") and not self.feature:
            issues.append(f"{self.action} requires a feature")
        if self.action == "set_text" and self.input_text is None:
            issues.append("set_text requires input_text")
        if self.action in ("scroll", "swipe"):
            if self.direction is None:
                issues.append(f"{self.action} requires a direction")
            elif self.direction not in _SCROLL_DIRECTIONS:
                issues.append(f"bad {self.action} direction {self.direction!r}")
        if self.action == "rotate" and self.direction is not None and self.direction not in _ROTATE_DIRECTIONS:
            issues.append(f"bad rotate direction {self.direction!r}")
        return issues


def _match_bracket_span(text: str, start: int) -> int | None:
    """Index of the ``]`` closing the ``[`` at ``start``, JSON-string aware."""
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        c = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif c == "\\":
                escaped = True
            elif c == '"':
                in_string = False
            continue
        if c == '"':
            in_string = True
        elif c == "[":
            depth += 1
        elif c == "]":
            depth -= 1
            if depth == 0:
                return i
    return None


def filter_json_payload(text: str) -> str | None:
    """Extract the actionable JSON from free-form model output.

    Scans for balanced square-bracket substrings that parse as a JSON array
    of objects each carrying an ``"action"`` key.  Multiple qualifying
    arrays are concatenated in textual order.  Returns None when nothing
    qualifies.
    """
    commands: list[dict] = []
    found = False
    i = 0
    while i < len(text):
        if text[i] != "[":
            i += 1
            continue
        end = _match_bracket_span(text, i)
        if end is not None:
            candidate = text[i : end + 1]
            try:
                value = json.loads(candidate)
            except json.JSONDecodeError:
                value = None
            if isinstance(value, list) and all(isinstance(o, dict) and "action" in o for o in value):
                commands.extend(value)
                found = True
                i = end + 1
                continue
        i += 1
    if not found:
        return None
    return json.dumps(commands, ensure_ascii=False)


def parse_action_sequence(json_text: str) -> list[ActionCommand]:
    """Map a JSON action array onto validated commands.

    Unknown keys are ignored; verbs and the ``target_direction`` key are
    normalized through the alias tables.  Invariant violations are rejected
    with per-command errors.
    """
    value = json.loads(json_text)
    if not isinstance(value, list):
        raise ValueError("expected a JSON array of action objects")
    commands: list[ActionCommand] = []
    issues: list[tuple[int, str]] = []
    for index, raw in enumerate(value):
        if not isinstance(raw, dict):
            issues.append((index, "not an object"))
            continue
        verb = str(raw.get("action", "")).strip().lower().replace("-", " ").replace("_", " ")
        verb = " ".join(verb.split())
        verb = VERB_ALIASES.get(verb, verb.replace(" ", "_"))
        direction = raw.get("direction", raw.get("target_direction"))
        duration = raw.get("duration")
        if duration is not None:
            try:
                duration = int(duration)
            except (TypeError, ValueError):
                issues.append((index, f"bad duration {duration!r}"))
                continue
        cmd = ActionCommand(
            action=verb,
            feature=None if raw.get("feature") is None else str(raw["feature"]),
            input_text=None if raw.get("input_text") is None else str(raw["input_text"]),
            direction=None if direction is None else str(direction).strip().lower(),
            duration_ms=duration,
        )
        problems = cmd.problems()
        if problems:
            issues.extend((index, p) for p in problems)
            continue
        commands.append(cmd)
    if issues:
        raise MalformedCommandError(issues)
    return commands


@dataclass
class LlmExchange:
    prompt: str
    raw_response: str
    parsed: list[ActionCommand] | None = None
    latency: float = 0.0


class LlmGateway:
    """Base gateway: retries, deadline checks, exchange accounting."""

    def __init__(self, config: LlmConfig):
        self.config = config
        self.exchanges: list[LlmExchange] = []

    # -- transport ---------------------------------------------------------

    def _complete_once(self, prompt: str) -> tuple[str, float]:
        """Return (raw text, latency seconds); raise TransportError on failure."""
        raise NotImplementedError

    def complete(self, prompt: str, deadline: float | None = None) -> str:
        if not prompt:
            raise ValueError("prompt must be nonempty")
        if deadline is not None and time.monotonic() >= deadline:
            raise BudgetExceeded("deadline passed before the gateway call")
        last: Exception | None = None
        for _ in range(self.config.max_retries + 1):
            try:
                raw, latency = self._complete_once(prompt)
            except TransportError as exc:
                last = exc
                continue
            self.exchanges.append(LlmExchange(prompt=prompt, raw_response=raw, latency=latency))
            return raw
        assert last is not None
        raise last

    @property
    def total_llm_time(self) -> float:
        return sum(ex.latency for ex in self.exchanges)

    # -- action protocol ---------------------------------------------------

    def request_actions(self, prompt: str, deadline: float | None = None) -> list[ActionCommand]:
        """Ask for a JSON action array, repairing a non-JSON reply once."""
        raw = self.complete(prompt, deadline)
        payload = filter_json_payload(raw)
        if payload is None:
            repair = f"{prompt}\n\n{load_template('repair.txt').strip()}"
            raw = self.complete(repair, deadline)
            payload = filter_json_payload(raw)
            if payload is None:
                raise NoActionableOutput("no JSON action array, even after a repair attempt")
        try:
            commands = parse_action_sequence(payload)
        except MalformedCommandError as exc:
            raise NoActionableOutput(f"action array failed validation: {exc}") from exc
        self.exchanges[-1].parsed = commands
        return commands


@dataclass
class MockEntry:
    """One scripted mock behaviour.

    Bare-string script lines become one-shot FIFO entries; object lines may
    carry a ``when`` substring or ``when_sha256`` prompt fingerprint and an
    optional ``times`` budget (default unlimited), or a scripted ``error``.
    """

    response: str | None = None
    when: str | None = None
    when_sha256: str | None = None
    times: int | None = None
    error: str | None = None
    used: int = field(default=0, compare=False)

    def matches(self, prompt: str, prompt_sha256: str) -> bool:
        if self.times is not None and self.used >= self.times:
            return False
        if self.when is not None and self.when not in prompt:
            return False
        if self.when_sha256 is not None and self.when_sha256 != prompt_sha256:
            return False
        return True


def _entry_from_value(value) -> MockEntry:
    if isinstance(value, str):
        return MockEntry(response=value, times=1)
    if isinstance(value, dict):
        return MockEntry(
            response=value.get("response"),
            when=value.get("when"),
            when_sha256=value.get("when_sha256"),
            times=value.get("times"),
            error=value.get("error"),
        )
    raise ValueError(f"bad mock entry: {value!r}")


class MockGateway(LlmGateway):
    """Deterministic scripted gateway; latency is always reported as zero."""

    def __init__(self, entries: list[MockEntry]):
        super().__init__(
            LlmConfig(endpoint="mock", model_name="scripted", max_retries=0, temperature=0.0)
        )
        self.entries = entries

    @classmethod
    def from_script(cls, responses: list) -> "MockGateway":
        return cls([_entry_from_value(v) for v in responses])

    @classmethod
    def from_script_file(cls, path: str | Path) -> "MockGateway":
        entries = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                value = json.loads(line)
            except json.JSONDecodeError:
                value = line  # a raw response line, consumed once
            entries.append(_entry_from_value(value))
        return cls(entries)

    def _complete_once(self, prompt: str) -> tuple[str, float]:
        import hashlib

        fingerprint = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        for entry in self.entries:
            if entry.matches(prompt, fingerprint):
                entry.used += 1
                if entry.error is not None:
                    raise TransportError(f"scripted failure: {entry.error}")
                assert entry.response is not None
                return entry.response, 0.0
        raise ExhaustedScript("no scripted response left for this prompt")


class HttpGateway(LlmGateway):
    """Chat-completions style HTTP gateway."""

    def _complete_once(self, prompt: str) -> tuple[str, float]:
        import requests

        headers = {}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        body = {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
        }
        start = time.monotonic()
        try:
            resp = requests.post(
                self.config.endpoint, json=body, headers=headers, timeout=self.config.request_timeout
            )
            resp.raise_for_status()
            payload = resp.json()
        except requests.Timeout as exc:
            raise GatewayTimeout(str(exc)) from exc
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        latency = time.monotonic() - start
        try:
            if "choices" in payload:
                text = payload["choices"][0]["message"]["content"]
            else:
                text = payload["text"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"bad completion payload: {exc}") from exc
        return str(text), latency
