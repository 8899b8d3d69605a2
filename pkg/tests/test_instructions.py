"""Instruction generation: template expansion, client path, post-filtering."""

import pytest

from langrasp.data.instructions import (
    API_KEY_ENV,
    HttpCompletionClient,
    InstructionSet,
    KIND_INSTRUCTION,
    KIND_QUESTION,
    generate_instructions,
    parse_target_description,
)

CUP = "water cup: a small vessel, used for drink water."
SCISSORS = "scissors: a hand tool typically used for cutting paper or fabric."


class FakeClient:
    def __init__(self, text):
        self.text = text
        self.prompts = []

    def complete(self, prompt):
        self.prompts.append(prompt)
        return self.text


class FailingClient:
    def complete(self, prompt):
        raise ConnectionError("no route to host")


def test_parse_target_description():
    assert parse_target_description(CUP) == ("water cup", ["drink water"])
    name, funcs = parse_target_description("knife: used for cut bread; slice cheese.")
    assert name == "knife"
    assert funcs == ["cut bread", "slice cheese"]
    with pytest.raises(ValueError):
        parse_target_description("no separator here")
    with pytest.raises(ValueError):
        parse_target_description("hammer: a heavy tool.")
    with pytest.raises(ValueError):
        parse_target_description("hammer: used for .")


def test_templates_produce_five_plus_five():
    out = generate_instructions(CUP)
    assert len(out) == 10
    kinds = [kind for _, kind in out]
    assert kinds == [KIND_QUESTION] * 5 + [KIND_INSTRUCTION] * 5
    texts = [text for text, _ in out]
    assert any("I need to drink water" in t for t in texts)
    assert all("water cup" not in t.casefold() for t in texts)


def test_templates_deterministic():
    a = generate_instructions(CUP)
    b = generate_instructions(CUP)
    assert a.pairs == b.pairs


def test_templates_gerund_function_uses_for_shaped_slots():
    out = generate_instructions(SCISSORS)
    texts = [text for text, _ in out]
    assert len(out) == 10
    assert all("scissors" not in t.casefold() for t in texts)
    assert any("cutting paper or fabric" in t for t in texts)
    assert all("to cutting" not in t for t in texts)


def test_templates_round_robin_over_functions():
    out = generate_instructions("knife: used for cut bread; slice cheese.")
    texts = " | ".join(text for text, _ in out)
    assert "cut bread" in texts
    assert "slice cheese" in texts
    assert "knife" not in texts.casefold()


def test_client_lines_used_and_violators_replaced():
    lines = "\n".join(
        [
            "1. Can you find me something for cutting paper or fabric?",
            "2. Which tool here can trim a sheet down to size?",
            "3. What would you use on the scissors pile?",
            "4. Is anything here sharp enough for cutting paper or fabric?",
            "5. Do you see a cutter around?",
            "6. I need something for cutting paper or fabric.",
            "7. Hand me the sharp one.",
            "8. Bring me whatever can trim this sheet.",
            "9. Get me the tool for cutting paper or fabric.",
            "10. Pass me something with two blades.",
        ]
    )
    client = FakeClient(lines)
    out = generate_instructions(SCISSORS, llm=client)
    texts = [text for text, _ in out]
    assert len(out) == 10
    assert all("scissors" not in t.casefold() for t in texts)
    assert any("cutting paper or fabric" in t for t in texts)
    meta = out.provenance["targets"][0]
    assert meta["source"] == "llm"
    assert meta["dropped"] == 1
    assert meta["topped_up"] == 1
    assert out.provenance["reviewed"] is False
    assert 'Never use the word "scissors"' in client.prompts[0]


def test_client_failure_falls_back_to_templates():
    out = generate_instructions(SCISSORS, llm=FailingClient())
    assert len(out) == 10
    assert out.provenance["fallback"] is True
    assert out.provenance["targets"][0]["source"] == "templates"
    assert out.provenance["reviewed"] is True


def test_object_and_parts_each_get_ten():
    out = generate_instructions(
        "mug: a cup with a handle, used for drinking coffee.",
        part_descriptions=[
            "handle: the loop on the side, used for holding the cup.",
            "rim: the top edge, used for sipping from.",
        ],
    )
    assert len(out) == 30
    meta = out.provenance["targets"]
    assert [m["start"] for m in meta] == [0, 10, 20]
    assert [m["count"] for m in meta] == [10, 10, 10]
    handle_slice = [t for t, _ in out[10:20]]
    assert all("handle" not in t.casefold() for t in handle_slice)


def test_instruction_set_iterates_as_pairs():
    s = InstructionSet(pairs=[("a", KIND_QUESTION)])
    assert list(s) == [("a", KIND_QUESTION)]
    assert s[0] == ("a", KIND_QUESTION)


class StubResponse:
    def __init__(self, payload):
        self.payload = payload

    def raise_for_status(self):
        pass

    def json(self):
        return self.payload


class StubSession:
    def __init__(self, fail_times=0):
        self.calls = []
        self.fail_times = fail_times

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers})
        if len(self.calls) <= self.fail_times:
            raise ConnectionError("transient")
        return StubResponse({"text": "1. first line\n2. second line"})


def test_http_client_sends_env_credential(monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "sk-test-123")
    session = StubSession()
    client = HttpCompletionClient("http://llm.local/v1/complete", session=session)
    text = client.complete("prompt text")
    assert "first line" in text
    call = session.calls[0]
    assert call["url"] == "http://llm.local/v1/complete"
    assert call["headers"]["Authorization"] == "Bearer sk-test-123"
    assert call["json"]["prompt"] == "prompt text"


def test_http_client_omits_header_without_credential(monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    session = StubSession()
    HttpCompletionClient("http://llm.local/v1/complete", session=session).complete("p")
    assert "Authorization" not in session.calls[0]["headers"]


def test_http_client_retries_once_then_raises(monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    session = StubSession(fail_times=1)
    client = HttpCompletionClient("http://llm.local/v1/complete", session=session)
    assert "first line" in client.complete("p")
    assert len(session.calls) == 2

    session2 = StubSession(fail_times=2)
    client2 = HttpCompletionClient("http://llm.local/v1/complete", session=session2)
    with pytest.raises(RuntimeError, match="after retry"):
        client2.complete("p")
