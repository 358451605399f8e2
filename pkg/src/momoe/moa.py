"""Single-layer mixture-of-agents: proposers answer in parallel, one aggregator decides.

Each proposer sees the same prompt. The aggregator sees a fixed-layout prompt
holding the original prompt and every successful proposer answer verbatim; its
reply is reduced to a sentiment label by :func:`parse_label`.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import httpx

from .data import SentimentLabel
from .errors import AggregationError, ConfigError

AGENT_KINDS = ("scripted", "local_model", "http")

Clock = Callable[[], float]


@dataclass(frozen=True)
class AgentSpec:
    name: str
    kind: str = "scripted"
    endpoint: str | None = None
    model_id: str = ""
    timeout_ms: int = 30_000
    max_retries: int = 0
    api_key_env: str | None = None
    response_text_path: str | None = None
    # kind-specific settings: scripted reply/replies/stall_ms/fail_times, local_model checkpoint
    options: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if not self.name:
            raise ConfigError("agent name must be nonempty", "name")
        if self.kind not in AGENT_KINDS:
            raise ConfigError(f"agent {self.name!r}: unknown kind {self.kind!r}", "kind")
        if self.timeout_ms < 1:
            raise ConfigError(f"agent {self.name!r}: timeout_ms must be >= 1", "timeout_ms")
        if self.max_retries < 0:
            raise ConfigError(f"agent {self.name!r}: max_retries must be >= 0", "max_retries")
        if self.kind == "http" and not (self.endpoint and self.response_text_path):
            raise ConfigError(
                f"agent {self.name!r}: http agents need endpoint and response_text_path", "endpoint"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "AgentSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown agent field {sorted(unknown)[0]!r}", sorted(unknown)[0])
        if "name" not in d:
            raise ConfigError("agent entry without a name", "name")
        return cls(**d)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AgentResponse:
    agent_name: str
    text: str
    latency_ms: float
    status: str  # ok | timeout | error
    error_detail: str = ""
    attempts: int = 1

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class MoaRecord:
    original_prompt: str
    responses: list[AgentResponse]
    aggregator_prompt: str
    final_text: str
    final_label: SentimentLabel | None
    all_proposers_ok: bool
    label_parsed: bool
    disagreement: bool
    proposer_labels: list[SentimentLabel | None]
    aggregator_response: AgentResponse | None = None
    status: str = "ok"
    error_detail: str = ""
    gold: SentimentLabel | None = None

    def to_json(self) -> dict:
        def lab(x):
            return None if x is None else x.value

        return {
            "original_prompt": self.original_prompt,
            "responses": [asdict(r) for r in self.responses],
            "aggregator_prompt": self.aggregator_prompt,
            "aggregator_response": None if self.aggregator_response is None else asdict(self.aggregator_response),
            "final_text": self.final_text,
            "final_label": lab(self.final_label),
            "proposer_labels": [lab(x) for x in self.proposer_labels],
            "flags": {
                "all_proposers_ok": self.all_proposers_ok,
                "label_parsed": self.label_parsed,
                "disagreement": self.disagreement,
            },
            "status": self.status,
            "error_detail": self.error_detail,
            "gold": lab(self.gold),
        }


class Agent:
    """Something that turns a prompt into text. Implementations must be thread-safe."""

    spec: AgentSpec

    def generate(self, prompt: str) -> str:
        raise NotImplementedError


class ScriptedAgent(Agent):
    """Deterministic stand-in for a remote model.

    ``reply`` is a fixed string, a mapping from prompt to string (key
    ``"default"`` as fallback) or a callable. ``stall_ms`` sleeps before
    answering; ``fail_times`` makes the first n calls raise.
    """

    def __init__(
        self,
        spec: AgentSpec | str,
        reply: str | dict | Callable[[str], str] | None = None,
        stall_ms: float = 0,
        fail_times: int = 0,
        **spec_fields,
    ):
        self.spec = AgentSpec(name=spec, kind="scripted", **spec_fields) if isinstance(spec, str) else spec
        opts = self.spec.options
        self.reply = reply if reply is not None else opts.get("reply", opts.get("replies", ""))
        self.stall_ms = stall_ms or opts.get("stall_ms", 0)
        self._failures_left = fail_times or opts.get("fail_times", 0)
        self._lock = threading.Lock()
        self.calls = 0

    def generate(self, prompt: str) -> str:
        with self._lock:
            self.calls += 1
            fail = self._failures_left > 0
            if fail:
                self._failures_left -= 1
        if self.stall_ms:
            time.sleep(self.stall_ms / 1000)
        if fail:
            raise RuntimeError(f"scripted failure from {self.spec.name}")
        if callable(self.reply):
            return self.reply(prompt)
        if isinstance(self.reply, dict):
            return self.reply.get(prompt, self.reply.get("default", ""))
        return self.reply


class LocalModelAgent(Agent):
    """Wraps the fine-tuned toy model; answers by scoring the three label words."""

    def __init__(self, spec: AgentSpec | str, model):
        self.spec = AgentSpec(name=spec, kind="local_model") if isinstance(spec, str) else spec
        self.model = model

    def generate(self, prompt: str) -> str:
        from .model import score_labels

        label, _ = score_labels(self.model, prompt)
        return f"The sentiment of this text is: {label.value}"


def extract_path(doc: Any, path: str) -> Any:
    """Follow a dotted selector such as ``choices.0.message.content`` or ``choices[0].message.content``."""
    cur = doc
    for part in re.findall(r"[^.\[\]]+", path):
        if isinstance(cur, list):
            cur = cur[int(part)]
        elif isinstance(cur, dict):
            cur = cur[part]
        else:
            raise KeyError(part)
    return cur


class HttpAgent(Agent):
    """Chat-completion style JSON client.

    Sends ``{"model": model_id, "messages": [{"role": "user", "content": prompt}]}``
    and reads the reply text at ``response_text_path``. The API key is read from
    the named environment variable on every call and is never stored.
    """

    def __init__(self, spec: AgentSpec, transport: httpx.BaseTransport | None = None):
        if spec.kind != "http":
            raise ConfigError(f"agent {spec.name!r} is not an http agent", "kind")
        self.spec = spec
        self._transport = transport

    def generate(self, prompt: str) -> str:
        spec = self.spec
        headers = {"Content-Type": "application/json"}
        if spec.api_key_env:
            key = os.environ.get(spec.api_key_env)
            if not key:
                raise RuntimeError(f"environment variable {spec.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        body = {"model": spec.model_id, "messages": [{"role": "user", "content": prompt}]}
        with httpx.Client(transport=self._transport, timeout=spec.timeout_ms / 1000) as client:
            resp = client.post(spec.endpoint, json=body, headers=headers)
        resp.raise_for_status()
        text = extract_path(resp.json(), spec.response_text_path)
        if not isinstance(text, str):
            raise RuntimeError(f"value at {spec.response_text_path!r} is not text")
        return text


def build_agent(spec: AgentSpec, model_cache: dict | None = None) -> Agent:
    if spec.kind == "scripted":
        return ScriptedAgent(spec)
    if spec.kind == "http":
        return HttpAgent(spec)
    from .model import load_model

    ckpt = spec.options.get("checkpoint")
    if not ckpt:
        raise ConfigError(f"agent {spec.name!r}: local_model agents need options.checkpoint", "options.checkpoint")
    cache = {} if model_cache is None else model_cache
    if ckpt not in cache:
        cache[ckpt] = load_model(ckpt)
    return LocalModelAgent(spec, cache[ckpt])


def load_agents_config(path: str | Path) -> tuple[list[AgentSpec], AgentSpec]:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})", "agents") from None
    return parse_agents_config(doc)


def parse_agents_config(doc: dict) -> tuple[list[AgentSpec], AgentSpec]:
    if not isinstance(doc, dict) or "proposers" not in doc or "aggregator" not in doc:
        raise ConfigError("agents config needs 'proposers' and 'aggregator'", "agents")
    proposers = [AgentSpec.from_dict(d) for d in doc["proposers"]]
    if not proposers:
        raise ConfigError("at least one proposer is required", "agents.proposers")
    return proposers, AgentSpec.from_dict(doc["aggregator"])


def _attempt(agent: Agent, prompt: str, timeout_s: float) -> tuple[str, str, str]:
    """One call bounded by ``timeout_s``; returns (status, text, detail).

    The call runs on a daemon thread so a stalled agent cannot hold the process.
    """
    box: dict[str, Any] = {}

    def run():
        try:
            box["text"] = agent.generate(prompt)
        except Exception as exc:  # agent failures become statuses
            box["error"] = f"{type(exc).__name__}: {exc}"

    t = threading.Thread(target=run, daemon=True, name=f"agent-{agent.spec.name}")
    t.start()
    t.join(timeout_s)
    if t.is_alive():
        return "timeout", "", f"no reply within {timeout_s * 1000:.0f} ms"
    if "error" in box:
        return "error", "", box["error"]
    text = box.get("text")
    if not isinstance(text, str) or not text.strip():
        return "error", "", "empty reply"
    return "ok", text, ""


def call_agent(agent: Agent, prompt: str, clock: Clock = time.perf_counter) -> AgentResponse:
    spec = agent.spec
    start = clock()
    status, text, detail = "error", "", ""
    attempts = 0
    for attempts in range(1, spec.max_retries + 2):
        status, text, detail = _attempt(agent, prompt, spec.timeout_ms / 1000)
        if status == "ok":
            break
    latency = (clock() - start) * 1000
    return AgentResponse(spec.name, text, latency, status, detail, attempts)


def fan_out(prompt: str, proposers: Sequence[Agent], clock: Clock = time.perf_counter) -> list[AgentResponse]:
    """Query every proposer concurrently; responses come back in proposer order."""
    if not proposers:
        raise ConfigError("no proposers configured", "proposers")
    with ThreadPoolExecutor(max_workers=len(proposers)) as pool:
        return list(pool.map(lambda a: call_agent(a, prompt, clock), proposers))


AGGREGATOR_HEADER = (
    "You are the final decision-making agent for a financial sentiment classification task.\n"
    "Several agents answered the prompt below independently. Weigh their answers and their\n"
    "reasoning, correct any mistakes, and decide the sentiment yourself."
)
AGGREGATOR_FOOTER = "Answer with exactly one word: positive, negative, or neutral."


def build_aggregator_prompt(original: str, responses: Sequence[AgentResponse]) -> str:
    ok = [r for r in responses if r.ok]
    if not ok:
        raise AggregationError("no proposer output")
    parts = [AGGREGATOR_HEADER, "", "Original prompt:", original, "", "Agent answers:"]
    for i, r in enumerate(ok, start=1):
        parts += [f"[{i}] Agent {r.agent_name} says:", r.text, ""]
    failed = [r for r in responses if not r.ok]
    if failed:
        parts.append("No answer from: " + ", ".join(f"{r.agent_name} ({r.status})" for r in failed))
        parts.append("")
    parts.append(AGGREGATOR_FOOTER)
    return "\n".join(parts)


_LABEL_RE = re.compile(r"\b(positive|negative|neutral)\b", re.IGNORECASE)


def parse_label(text: str) -> SentimentLabel | None:
    """Last whole-word label mention wins; ``None`` if there is none."""
    found = _LABEL_RE.findall(text or "")
    if not found:
        return None
    return SentimentLabel(found[-1].lower())


def run_moa(
    prompt: str,
    proposers: Sequence[Agent],
    aggregator: Agent,
    clock: Clock = time.perf_counter,
    gold: SentimentLabel | None = None,
) -> MoaRecord:
    responses = fan_out(prompt, proposers, clock)
    labels = [parse_label(r.text) if r.ok else None for r in responses]
    parsed = {lab for lab in labels if lab is not None}
    record = MoaRecord(
        original_prompt=prompt,
        responses=responses,
        aggregator_prompt="",
        final_text="",
        final_label=None,
        all_proposers_ok=all(r.ok for r in responses),
        label_parsed=False,
        disagreement=len(parsed) > 1,
        proposer_labels=labels,
        gold=gold,
    )
    try:
        record.aggregator_prompt = build_aggregator_prompt(prompt, responses)
    except AggregationError as exc:
        record.status, record.error_detail = "error", str(exc)
        return record
    agg = call_agent(aggregator, record.aggregator_prompt, clock)
    record.aggregator_response = agg
    if not agg.ok:
        record.status = "error"
        record.error_detail = f"aggregator {agg.agent_name} failed: {agg.status} {agg.error_detail}".strip()
        return record
    record.final_text = agg.text
    record.final_label = parse_label(agg.text)
    record.label_parsed = record.final_label is not None
    return record
