import numpy as np
import pytest

from momoe.model import ModelConfig, TokenBatch, build_model
from momoe.moe import MoEConfig


def central_diff(f, x, eps=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        fp = f()
        x[idx] = orig - eps
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, n, floor=1e-6):
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def small_config(seed=0, **moe_kw):
    moe = dict(num_experts=4, top_k=2, model_dim=8, expert_hidden=16, alpha=0.01)
    moe.update(moe_kw)
    return ModelConfig(model_dim=8, num_heads=2, num_layers=2, max_seq_len=32, moe=MoEConfig(**moe), init_seed=seed)


def random_batch(seed, b=2, length=16, vocab=259):
    rng = np.random.default_rng(seed)
    ids = rng.integers(3, vocab, size=(b, length))
    mask = np.zeros((b, length), dtype=int)
    mask[:, length // 2 : length - 1] = 1
    return TokenBatch(ids, mask)


@pytest.fixture
def small_model():
    return build_model(small_config())


# --- scripted agent scenarios shared by the MoA and acceptance tests ---

SCENARIO_PROMPT = (
    "What is the sentiment of this news?\n"
    "Acme Corp reported quarterly revenue up 12% and raised its full-year guidance.\n"
    "The sentiment of this text is:"
)


def _tally_majority(prompt: str) -> str:
    from momoe.moa import AGGREGATOR_FOOTER, parse_label

    answers = prompt.split("Agent answers:", 1)[1].split(AGGREGATOR_FOOTER, 1)[0]
    votes = [parse_label(chunk) for chunk in answers.split("\n[")[1:]]
    votes = [v for v in votes if v is not None]
    best = max(set(votes), key=votes.count)
    return f"Most agents agree. Final answer: {best.value}"


def override_scenario():
    """Two proposers are wrong, one is right; the aggregator picks the right label."""
    from momoe.moa import ScriptedAgent

    proposers = [
        ScriptedAgent("toy", reply="The sentiment of this text is: negative"),
        ScriptedAgent("remote_a", reply="Revenue growth is mentioned, but I read it as negative."),
        ScriptedAgent("remote_b", reply="Raised guidance signals confidence. Positive."),
    ]
    aggregator = ScriptedAgent(
        "judge", reply="Two agents said negative, yet raised guidance is good news. The answer is positive."
    )
    return proposers, aggregator


def majority_wrong_scenario():
    """Two proposers agree on a wrong label and the aggregator follows the majority."""
    from momoe.moa import ScriptedAgent

    proposers = [
        ScriptedAgent("toy", reply="The sentiment of this text is: neutral"),
        ScriptedAgent("remote_a", reply="This is a routine update, neutral."),
        ScriptedAgent("remote_b", reply="Clearly positive."),
    ]
    return proposers, ScriptedAgent("judge", reply=_tally_majority)


# --- acceptance report: one line per criterion, printed after the run ---

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
