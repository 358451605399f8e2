import json
import threading
import time
from pathlib import Path

import httpx
import numpy as np
import pytest

from momoe.data import SentimentLabel
from momoe.errors import AggregationError, ConfigError
from momoe.moa import (
    AgentResponse,
    AgentSpec,
    HttpAgent,
    LocalModelAgent,
    ScriptedAgent,
    build_agent,
    build_aggregator_prompt,
    call_agent,
    extract_path,
    fan_out,
    parse_agents_config,
    parse_label,
    run_moa,
)

from conftest import SCENARIO_PROMPT, majority_wrong_scenario, override_scenario, small_config

GOLDEN = Path(__file__).parent / "golden"
FIXED_CLOCK = lambda: 0.0  # noqa: E731


def ok(name, text):
    return AgentResponse(name, text, 1.0, "ok")


THREE_OK = [
    ok("toy", "The sentiment of this text is: negative"),
    ok("remote_a", "Revenue growth is mentioned, but I read it as negative."),
    ok("remote_b", "Raised guidance signals confidence. Positive."),
]


# ---- AgentSpec ----

@pytest.mark.parametrize(
    "fields, bad",
    [
        ({"timeout_ms": 0}, "timeout_ms"),
        ({"max_retries": -1}, "max_retries"),
        ({"kind": "carrier-pigeon"}, "kind"),
        ({"kind": "http", "response_text_path": "a"}, "endpoint"),
        ({"name": ""}, "name"),
    ],
)
def test_agent_spec_validation(fields, bad):
    with pytest.raises(ConfigError) as exc:
        AgentSpec(**{"name": "a", **fields})
    assert exc.value.field == bad


def test_agents_config_parsing():
    doc = {
        "proposers": [{"name": "a", "options": {"reply": "positive"}}, {"name": "b", "max_retries": 2}],
        "aggregator": {"name": "j", "kind": "scripted"},
    }
    proposers, agg = parse_agents_config(doc)
    assert [p.name for p in proposers] == ["a", "b"] and proposers[1].max_retries == 2 and agg.name == "j"
    with pytest.raises(ConfigError, match="colour"):
        parse_agents_config({"proposers": [{"name": "a", "colour": "red"}], "aggregator": {"name": "j"}})
    with pytest.raises(ConfigError):
        parse_agents_config({"proposers": [{"name": "a"}]})
    with pytest.raises(ConfigError):
        parse_agents_config({"proposers": [], "aggregator": {"name": "j"}})


# ---- fan_out ----

def test_fan_out_keeps_proposer_order_regardless_of_completion():
    # the first agent finishes last
    agents = [
        ScriptedAgent("slow", reply="one", stall_ms=150),
        ScriptedAgent("mid", reply="two", stall_ms=50),
        ScriptedAgent("fast", reply="three"),
    ]
    out = fan_out("p", agents)
    assert [r.agent_name for r in out] == ["slow", "mid", "fast"]
    assert [r.text for r in out] == ["one", "two", "three"]
    assert all(r.ok for r in out)


def test_fan_out_runs_concurrently():
    agents = [ScriptedAgent(f"a{i}", reply="x", stall_ms=200) for i in range(4)]
    start = time.perf_counter()
    fan_out("p", agents)
    assert time.perf_counter() - start < 0.6


def test_stalled_agent_times_out_others_ok():
    agents = [
        ScriptedAgent("a", reply="positive"),
        ScriptedAgent("stuck", reply="never", stall_ms=2000, timeout_ms=100),
        ScriptedAgent("c", reply="neutral"),
    ]
    start = time.perf_counter()
    out = fan_out("p", agents)
    assert time.perf_counter() - start < 1.5
    assert [r.status for r in out] == ["ok", "timeout", "ok"]
    assert out[1].text == ""


def test_zero_proposers_is_config_error():
    with pytest.raises(ConfigError):
        fan_out("p", [])


def test_retries_recover_from_failures():
    agent = ScriptedAgent("flaky", reply="negative", fail_times=2, max_retries=2)
    r = call_agent(agent, "p")
    assert r.ok and r.attempts == 3 and agent.calls == 3


def test_retries_exhausted_reports_error():
    agent = ScriptedAgent("flaky", reply="negative", fail_times=5, max_retries=1)
    r = call_agent(agent, "p")
    assert r.status == "error" and r.attempts == 2 and "scripted failure" in r.error_detail


def test_empty_reply_is_not_ok():
    assert call_agent(ScriptedAgent("mute", reply="   "), "p").status == "error"


def test_scripted_agent_is_thread_safe():
    agent = ScriptedAgent("shared", reply="positive")
    threads = [threading.Thread(target=lambda: [agent.generate("p") for _ in range(50)]) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert agent.calls == 400


# ---- aggregator prompt ----

def test_aggregator_prompt_golden_three_ok():
    assert build_aggregator_prompt(SCENARIO_PROMPT, THREE_OK) == (GOLDEN / "aggregator_three_ok.txt").read_text()


def test_aggregator_prompt_golden_with_failures():
    responses = [
        THREE_OK[0],
        AgentResponse("remote_a", "", 30000.0, "timeout", "no reply"),
        AgentResponse("remote_b", "", 5.0, "error", "boom"),
    ]
    text = build_aggregator_prompt(SCENARIO_PROMPT, responses)
    assert text == (GOLDEN / "aggregator_one_ok.txt").read_text()
    assert "Agent remote_a says" not in text and "Agent remote_b says" not in text
    assert "remote_a (timeout)" in text and "remote_b (error)" in text


def test_aggregator_prompt_contains_everything_verbatim():
    text = build_aggregator_prompt(SCENARIO_PROMPT, THREE_OK)
    for piece in [SCENARIO_PROMPT] + [r.text for r in THREE_OK]:
        assert piece in text


def test_aggregator_prompt_needs_one_ok_response():
    with pytest.raises(AggregationError, match="no proposer output"):
        build_aggregator_prompt("p", [AgentResponse("a", "", 1.0, "timeout")])


# ---- parse_label ----

@pytest.mark.parametrize(
    "text, expected",
    [
        ("The sentiment of this text is: Positive.", SentimentLabel.POSITIVE),
        ("Although two agents said negative, the correct answer is neutral", SentimentLabel.NEUTRAL),
        ("I cannot decide.", None),
        ("NEGATIVE", SentimentLabel.NEGATIVE),
        ("non-positive outlook", SentimentLabel.POSITIVE),
        ("positively glowing, negatively framed", None),
        ("neutral then positive then negative", SentimentLabel.NEGATIVE),
        ("", None),
    ],
)
def test_parse_label(text, expected):
    assert parse_label(text) is expected


# ---- run_moa ----

def test_override_scenario():
    proposers, agg = override_scenario()
    rec = run_moa(SCENARIO_PROMPT, proposers, agg, gold=SentimentLabel.POSITIVE)
    assert rec.proposer_labels == [SentimentLabel.NEGATIVE, SentimentLabel.NEGATIVE, SentimentLabel.POSITIVE]
    assert rec.final_label is SentimentLabel.POSITIVE
    assert rec.disagreement and rec.all_proposers_ok and rec.label_parsed and rec.status == "ok"


def test_majority_wrong_scenario():
    proposers, agg = majority_wrong_scenario()
    rec = run_moa(SCENARIO_PROMPT, proposers, agg, gold=SentimentLabel.POSITIVE)
    assert rec.final_label is SentimentLabel.NEUTRAL
    assert rec.final_label is not rec.gold
    assert rec.disagreement and rec.status == "ok"
    assert rec.to_json()["final_label"] == "neutral" and rec.to_json()["gold"] == "positive"


def test_agreement_clears_disagreement_flag():
    proposers = [ScriptedAgent(n, reply="positive") for n in "abc"] + [ScriptedAgent("d", reply="no idea")]
    rec = run_moa("p", proposers, ScriptedAgent("j", reply="positive"))
    assert not rec.disagreement and rec.proposer_labels[-1] is None


def test_unparsed_final_label_is_recorded():
    proposers, _ = override_scenario()
    rec = run_moa(SCENARIO_PROMPT, proposers, ScriptedAgent("j", reply="Hard to say."))
    assert rec.status == "ok" and rec.final_label is None and not rec.label_parsed
    assert rec.final_text == "Hard to say."


def test_all_proposers_failing_is_recorded_as_error():
    proposers = [ScriptedAgent(n, reply="x", fail_times=1) for n in "ab"]
    agg = ScriptedAgent("j", reply="positive")
    rec = run_moa("p", proposers, agg)
    assert rec.status == "error" and "no proposer output" in rec.error_detail
    assert agg.calls == 0 and not rec.all_proposers_ok


def test_single_failure_does_not_abort():
    proposers = [ScriptedAgent("a", reply="negative"), ScriptedAgent("b", reply="x", fail_times=1)]
    rec = run_moa("p", proposers, ScriptedAgent("j", reply="negative"))
    assert rec.status == "ok" and not rec.all_proposers_ok and rec.final_label is SentimentLabel.NEGATIVE


def test_aggregator_failure_is_recorded():
    proposers, _ = override_scenario()
    rec = run_moa(SCENARIO_PROMPT, proposers, ScriptedAgent("j", reply="x", fail_times=3, max_retries=1))
    assert rec.status == "error" and "j" in rec.error_detail and rec.aggregator_response.attempts == 2


def test_scripted_pipeline_is_bit_identical():
    dumps = []
    for _ in range(2):
        proposers, agg = override_scenario()
        rec = run_moa(SCENARIO_PROMPT, proposers, agg, clock=FIXED_CLOCK)
        dumps.append(json.dumps(rec.to_json(), sort_keys=True))
    assert dumps[0] == dumps[1]


def test_aggregator_sees_proposer_order():
    seen = []
    agg = ScriptedAgent("j", reply=lambda p: seen.append(p) or "neutral")
    proposers = [ScriptedAgent("a", reply="first", stall_ms=100), ScriptedAgent("b", reply="second")]
    run_moa("p", proposers, agg)
    assert seen[0].index("first") < seen[0].index("second")


# ---- agent kinds ----

def test_extract_path():
    doc = {"choices": [{"message": {"content": "hi"}}]}
    assert extract_path(doc, "choices.0.message.content") == "hi"
    assert extract_path(doc, "choices[0].message.content") == "hi"
    with pytest.raises(KeyError):
        extract_path(doc, "choices.0.text")


def _http_spec(**kw):
    return AgentSpec(
        name="remote",
        kind="http",
        endpoint="https://llm.invalid/v1/chat",
        model_id="m-1",
        api_key_env="MOMOE_TEST_KEY",
        response_text_path="choices.0.message.content",
        **kw,
    )


def test_http_agent_wire_format(monkeypatch):
    monkeypatch.setenv("MOMOE_TEST_KEY", "sekrit")
    captured = {}

    def handler(request: httpx.Request):
        captured["auth"] = request.headers.get("authorization")
        captured["body"] = json.loads(request.content)
        return httpx.Response(200, json={"choices": [{"message": {"content": "It is neutral."}}]})

    agent = HttpAgent(_http_spec(), transport=httpx.MockTransport(handler))
    r = call_agent(agent, "hello")
    assert r.ok and r.text == "It is neutral."
    assert captured["auth"] == "Bearer sekrit"
    assert captured["body"] == {"model": "m-1", "messages": [{"role": "user", "content": "hello"}]}
    assert "sekrit" not in json.dumps(r.__dict__)
    assert "sekrit" not in json.dumps(agent.spec.to_json())


def test_http_agent_errors_become_status(monkeypatch):
    monkeypatch.delenv("MOMOE_TEST_KEY", raising=False)
    agent = HttpAgent(_http_spec(), transport=httpx.MockTransport(lambda req: httpx.Response(200, json={})))
    r = call_agent(agent, "hello")
    assert r.status == "error" and "MOMOE_TEST_KEY" in r.error_detail

    monkeypatch.setenv("MOMOE_TEST_KEY", "k")
    agent = HttpAgent(_http_spec(), transport=httpx.MockTransport(lambda req: httpx.Response(503)))
    assert call_agent(agent, "hello").status == "error"


def test_local_model_agent_and_builder(tmp_path):
    from momoe.model import build_model, save_model

    m = build_model(small_config(0))
    agent = LocalModelAgent("toy", m)
    text = agent.generate("abc")
    assert text.startswith("The sentiment of this text is: ") and parse_label(text) is not None

    save_model(m, tmp_path / "ck.npz")
    spec = AgentSpec(name="toy", kind="local_model", options={"checkpoint": str(tmp_path / "ck.npz")})
    cache = {}
    a, b = build_agent(spec, cache), build_agent(spec, cache)
    assert a.model is b.model
    assert a.generate("abc") == text
    np.testing.assert_array_equal(a.model.frozen["head"], m.frozen["head"])
    with pytest.raises(ConfigError):
        build_agent(AgentSpec(name="toy", kind="local_model"))
