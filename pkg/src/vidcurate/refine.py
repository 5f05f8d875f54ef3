"""Caption -> generation-instruction refinement through a chat model.

The prompt is a fixed directive, the annotated exemplars as input/output
demonstrations, then the target caption. Free text is escaped so a caption
can never forge a block delimiter.
"""

from __future__ import annotations

import html
import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .service import ChatBackend, ResultCache, content_hash

MAX_INSTRUCTION_CHARS = 1024
MAX_GENERATIONS = 2

_URL = re.compile(r"(?i)\b(?:https?://|www\.)\S+|\b[\w-]+\.(?:com|org|net|io|ly)\b")
_BLOCK = re.compile(r"<example>\n<input>(.*?)</input>\n<output>(.*?)</output>\n</example>", re.S)


class RefinementFailed(RuntimeError):
    def __init__(self, reason: str):
        super().__init__(f"refinement failed: {reason}")
        self.reason = reason


@dataclass(frozen=True)
class Exemplar:
    raw_caption: str
    redundant_spans: tuple[str, ...]
    refined_instruction: str

    def __post_init__(self):
        object.__setattr__(self, "redundant_spans", tuple(self.redundant_spans))
        if not self.refined_instruction.strip():
            raise ValueError("exemplar refined_instruction is empty")
        for span in self.redundant_spans:
            if span not in self.raw_caption:
                raise ValueError(f"redundant span {span!r} does not occur in its caption")


@dataclass(frozen=True)
class RefinementResult:
    clip_id: str
    instruction: str
    backend_fingerprint: str
    cached: bool


@dataclass(frozen=True)
class Validation:
    ok: bool
    reason: str = ""

    def __bool__(self):
        return self.ok


def _read_data(name: str) -> str:
    return resources.files("vidcurate.data").joinpath(name).read_text(encoding="utf-8")


def load_exemplars(path: str | Path | None = None) -> list[Exemplar]:
    raw = Path(path).read_text(encoding="utf-8") if path else _read_data("exemplars.json")
    return [Exemplar(e["raw_caption"], tuple(e.get("redundant_spans", ())), e["refined_instruction"])
            for e in json.loads(raw)]


def load_blocklist(path: str | Path | None = None) -> list[str]:
    raw = Path(path).read_text(encoding="utf-8") if path else _read_data("blocklist.txt")
    return [ln.strip() for ln in raw.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]


def load_directive(path: str | Path | None = None) -> str:
    raw = Path(path).read_text(encoding="utf-8") if path else _read_data("refine_directive.txt")
    return raw.strip()


def _esc(text: str) -> str:
    return html.escape(text, quote=False)


def build_prompt(caption: str, exemplars: Sequence[Exemplar], directive: str | None = None) -> str:
    if not caption or not caption.strip():
        raise ValueError("caption is empty")
    if not exemplars:
        raise ValueError("at least one exemplar is required")
    directive = load_directive() if directive is None else directive
    parts = [f"<directive>\n{_esc(directive)}\n</directive>"]
    for ex in exemplars:
        parts.append(f"<example>\n<input>{_esc(ex.raw_caption)}</input>\n"
                     f"<output>{_esc(ex.refined_instruction)}</output>\n</example>")
    parts.append(f"<caption>{_esc(caption)}</caption>")
    return "\n".join(parts) + "\n"


def parse_prompt(prompt: str) -> tuple[str, list[tuple[str, str]], str]:
    """Recover (directive, [(input, output), ...], caption) from a built prompt."""
    m = re.match(r"<directive>\n(.*?)\n</directive>\n", prompt, re.S)
    target = re.search(r"<caption>(.*?)</caption>\n\Z", prompt, re.S)
    if not m or not target:
        raise ValueError("not a refinement prompt")
    demos = [(html.unescape(a), html.unescape(b)) for a, b in _BLOCK.findall(prompt)]
    return html.unescape(m.group(1)), demos, html.unescape(target.group(1))


def _phrase_pattern(phrase: str) -> re.Pattern:
    return re.compile(r"(?<![\w'])" + re.escape(phrase) + r"(?![\w'])", re.I)


def validate_instruction(text: str | None, blocklist: Iterable[str] | None = None) -> Validation:
    if text is None or not text.strip():
        return Validation(False, "empty")
    text = text.strip()
    if len(text) > MAX_INSTRUCTION_CHARS:
        return Validation(False, "too_long")
    if _URL.search(text):
        return Validation(False, "url")
    for phrase in load_blocklist() if blocklist is None else blocklist:
        if _phrase_pattern(phrase).search(text):
            return Validation(False, "pedagogical")
    if re.search(r"\n\s*\n", text):
        return Validation(False, "multi_paragraph")
    return Validation(True)


def refine_caption(caption: str, client: ChatBackend, *, clip_id: str = "",
                   exemplars: Sequence[Exemplar] | None = None, directive: str | None = None,
                   cache: ResultCache | None = None, blocklist: Sequence[str] | None = None,
                   max_generations: int = MAX_GENERATIONS) -> RefinementResult:
    """Refine one caption, consulting the cache before the service."""
    exemplars = load_exemplars() if exemplars is None else exemplars
    blocklist = load_blocklist() if blocklist is None else list(blocklist)
    prompt = build_prompt(caption, exemplars, directive)
    key = content_hash(client.model, prompt)
    fingerprint = f"{client.model}:{key[:16]}"
    cache = cache or ResultCache(None)
    hit = cache.get(key)
    if hit is not None and validate_instruction(hit.get("instruction"), blocklist):
        return RefinementResult(clip_id, hit["instruction"], fingerprint, cached=True)

    messages = [{"role": "user", "content": prompt}]
    verdict = Validation(False, "no attempts")
    for _ in range(max_generations):
        text = (client.complete(messages) or "").strip()
        verdict = validate_instruction(text, blocklist)
        if verdict:
            cache.put(key, {"instruction": text, "model": client.model})
            return RefinementResult(clip_id, text, fingerprint, cached=False)
    raise RefinementFailed(verdict.reason)


class MockRefiner:
    """Offline stand-in for the chat model.

    Drops sentences that contain a blocklisted phrase or a URL and returns
    the rest of the target caption, so the pipeline runs without a service.
    """

    model = "mock-refiner"

    def __init__(self, blocklist: Sequence[str] | None = None):
        self.blocklist = load_blocklist() if blocklist is None else list(blocklist)
        self.calls = 0

    def complete(self, messages):
        self.calls += 1
        _, _, caption = parse_prompt(messages[-1]["content"])
        sentences = re.split(r"(?<=[.!?])\s+", caption.strip())
        kept = [s for s in sentences if validate_instruction(s, self.blocklist)]
        return " ".join(kept)
