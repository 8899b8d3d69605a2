"""Indirect-instruction generation: template expansion with an optional
external text-generation client.

A target is described as "name: free text ... used for F1; F2". The functions
declared after "used for" drive template expansion; an external client, when
configured, writes the instructions instead and the templates only fill gaps.
Every produced instruction is post-filtered so it never contains the target's
name (case-insensitive).
"""

import os
import re
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Protocol, Sequence, Tuple

API_KEY_ENV = "LANGRASP_LLM_API_KEY"

KIND_QUESTION = "question"
KIND_INSTRUCTION = "instruction"

# Each template carries the verb form its {function} slot expects: "base"
# reads after "to" ("to drink water"), "gerund" after "for"
# ("for cutting paper or fabric").
DEFAULT_TEMPLATE_BANK: Dict[str, Tuple[Tuple[str, str], ...]] = {
    KIND_QUESTION: (
        ("Can you hand me something to {function}?", "base"),
        ("Is there anything here I could use to {function}?", "base"),
        ("What would you grab to {function}?", "base"),
        ("Which of these could I use to {function}?", "base"),
        ("Do you see anything I can use to {function}?", "base"),
        ("Could you find me a tool to {function}?", "base"),
        ("What should I pick up to {function}?", "base"),
        ("Would any of these work to {function}?", "base"),
        ("What here would help me {function}?", "base"),
        ("Mind passing me something to {function}?", "base"),
        ("Can you find me something for {function}?", "gerund"),
        ("Is there a good tool for {function} on the table?", "gerund"),
        ("Which item here works best for {function}?", "gerund"),
        ("Do you see anything suitable for {function}?", "gerund"),
        ("What would you recommend for {function}?", "gerund"),
        ("Could you point me to something for {function}?", "gerund"),
        ("Any chance there is something for {function} here?", "gerund"),
        ("What do people usually reach for when {function}?", "gerund"),
        ("Which of these is meant for {function}?", "gerund"),
        ("Is anything on the desk made for {function}?", "gerund"),
    ),
    KIND_INSTRUCTION: (
        ("I need to {function}.", "base"),
        ("I need something to {function}.", "base"),
        ("I want to {function}.", "base"),
        ("Hand me something to {function}.", "base"),
        ("Please pass me something I can use to {function}.", "base"),
        ("Find me a tool to {function}.", "base"),
        ("Grab me whatever I can use to {function}.", "base"),
        ("Help me {function}.", "base"),
        ("Pick up something I could use to {function}.", "base"),
        ("Get me whatever lets me {function}.", "base"),
        ("I need something for {function}.", "gerund"),
        ("Get me the item meant for {function}.", "gerund"),
        ("Pass me your best pick for {function}.", "gerund"),
        ("I am looking for something for {function}.", "gerund"),
        ("Bring me a tool for {function}.", "gerund"),
        ("Hand over whatever works for {function}.", "gerund"),
        ("Fetch me something suitable for {function}.", "gerund"),
        ("I could use a hand with {function}.", "gerund"),
        ("Set me up with something for {function}.", "gerund"),
        ("Give me an option for {function}.", "gerund"),
    ),
}

_NUMBERING = re.compile(r"^\s*(?:\d+\s*[.):\-]?|[-*])\s*")


class TextCompletionClient(Protocol):
    """Minimal interface to an external text generator."""

    def complete(self, prompt: str) -> str: ...


@dataclass
class HttpCompletionClient:
    """POSTs {"prompt", "max_tokens"} to a JSON endpoint returning {"text"}.

    The bearer credential comes only from the LANGRASP_LLM_API_KEY environment
    variable; one retry covers transient transport failures.
    """

    endpoint: str
    timeout: float = 30.0
    max_tokens: int = 512
    session: Optional[object] = None

    def complete(self, prompt: str) -> str:
        import requests

        sess = self.session if self.session is not None else requests
        headers = {}
        key = os.environ.get(API_KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = {"prompt": prompt, "max_tokens": self.max_tokens}
        last_err: Optional[Exception] = None
        for _ in range(2):
            try:
                resp = sess.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
                resp.raise_for_status()
                return str(resp.json()["text"])
            except Exception as err:
                last_err = err
        raise RuntimeError(f"completion request failed after retry: {last_err}")


@dataclass
class InstructionSet:
    """Generated (instruction, kind) pairs plus provenance metadata.

    Iterates as plain (instruction, kind) tuples; provenance records the
    source per target, how many lines the name filter dropped, and whether a
    human reviewed the text (templates ship reviewed, client output does not).
    """

    pairs: List[Tuple[str, str]] = field(default_factory=list)
    provenance: Dict[str, object] = field(default_factory=dict)

    def __iter__(self) -> Iterator[Tuple[str, str]]:
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, index):
        return self.pairs[index]


def parse_target_description(description: str) -> Tuple[str, List[str]]:
    """Split "name: text ... used for F1; F2" into (name, [functions])."""
    if ":" not in description:
        raise ValueError(
            f"description must look like 'name: text', got {description!r}"
        )
    name, rest = description.split(":", 1)
    name = name.strip()
    if not name:
        raise ValueError(f"description has an empty name: {description!r}")
    lowered = rest.casefold()
    marker = "used for "
    pos = lowered.find(marker)
    if pos < 0:
        raise ValueError(
            f"description for {name!r} must declare functions with 'used for'"
        )
    tail = rest[pos + len(marker):]
    end = len(tail)
    for stop in (".", "\n"):
        cut = tail.find(stop)
        if cut >= 0:
            end = min(end, cut)
    functions = [f.strip() for f in tail[:end].split(";") if f.strip()]
    if not functions:
        raise ValueError(f"description for {name!r} declares no functions")
    return name, functions


def _function_form(function: str) -> str:
    head = function.split()[0]
    return "gerund" if head.endswith("ing") and len(head) > 4 else "base"


def _expand_templates(
    name: str,
    functions: Sequence[str],
    kind: str,
    count: int,
    bank: Dict[str, Tuple[Tuple[str, str], ...]],
    taken: set,
) -> List[str]:
    """Fill templates in bank order, round-robin over functions, skipping any
    render that mentions the name or repeats an earlier instruction."""
    out: List[str] = []
    templates = bank[kind]
    slot = 0
    for cycle in range(len(functions)):
        for template, form in templates:
            if len(out) >= count:
                return out
            function = functions[(slot + cycle) % len(functions)]
            if form != _function_form(function):
                continue
            text = template.format(function=function)
            if name.casefold() in text.casefold() or text in taken:
                continue
            out.append(text)
            taken.add(text)
            slot += 1
    return out


def build_prompt(name: str, description: str, per_kind: int) -> str:
    return (
        "A person needs the item described below but will not say its name.\n"
        f"Item: {description}\n"
        f"Write {per_kind} indirect questions and then {per_kind} indirect "
        f"instructions they might say, one per line, numbered 1 to {2 * per_kind}. "
        f'Never use the word "{name}".'
    )


def _parse_completion(text: str) -> List[str]:
    lines = []
    for raw in text.splitlines():
        line = _NUMBERING.sub("", raw).strip()
        if line:
            lines.append(line)
    return lines


def generate_instructions(
    object_description: str,
    part_descriptions: Sequence[str] = (),
    llm: Optional[TextCompletionClient] = None,
    template_bank: Optional[Dict[str, Tuple[Tuple[str, str], ...]]] = None,
    per_kind: int = 5,
) -> InstructionSet:
    """Produce per_kind indirect questions plus per_kind indirect instructions
    for the object and for each part description.

    With a client, its lines are used after dropping any that mention the
    target name; shortfalls (and client failures) fall back to deterministic
    template expansion, recorded per target in provenance.
    """
    bank = template_bank if template_bank is not None else DEFAULT_TEMPLATE_BANK
    result = InstructionSet()
    target_meta: List[Dict[str, object]] = []
    any_llm = False
    any_fallback = False
    for description in (object_description, *part_descriptions):
        name, functions = parse_target_description(description)
        start = len(result.pairs)
        dropped = 0
        topped_up = 0
        source = "templates"
        questions: List[str] = []
        statements: List[str] = []
        if llm is not None:
            try:
                text = llm.complete(build_prompt(name, description, per_kind))
                lines = _parse_completion(text)
                kept = [ln for ln in lines if name.casefold() not in ln.casefold()]
                dropped = len(lines) - len(kept)
                questions = kept[:per_kind]
                statements = kept[per_kind: 2 * per_kind]
                source = "llm"
                any_llm = True
            except Exception:
                any_fallback = True
                source = "templates"
        taken = set(questions) | set(statements)
        if len(questions) < per_kind:
            extra = _expand_templates(
                name, functions, KIND_QUESTION, per_kind - len(questions), bank, taken
            )
            topped_up += len(extra) if source == "llm" else 0
            questions.extend(extra)
        if len(statements) < per_kind:
            extra = _expand_templates(
                name, functions, KIND_INSTRUCTION, per_kind - len(statements), bank, taken
            )
            topped_up += len(extra) if source == "llm" else 0
            statements.extend(extra)
        result.pairs.extend((q, KIND_QUESTION) for q in questions)
        result.pairs.extend((s, KIND_INSTRUCTION) for s in statements)
        target_meta.append(
            {
                "name": name,
                "start": start,
                "count": len(result.pairs) - start,
                "source": source,
                "dropped": dropped,
                "topped_up": topped_up,
            }
        )
    result.provenance = {
        "targets": target_meta,
        "fallback": any_fallback,
        "reviewed": not any_llm,
    }
    return result
