"""Domain types for the commonsense-triple pipeline.

Everything here is an immutable value: knowledge types, the seven
pre-defined relations with their validity matrix, head items, triples,
prompt specs, and the template assets used to render distillation and
judging prompts. Rendering is pure; identical inputs give byte-identical
output.
"""
from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import SchemaError

DEFAULT_LANG = "zh"

BLANK = "___"


class KnowledgeType(str, enum.Enum):
    """The three head-item types: deliberate events, events that happen to
    someone, and states someone is in."""

    VOLUNTARY = "voluntary"
    INVOLUNTARY = "involuntary"
    STATE = "state"

    @classmethod
    def parse(cls, text: str) -> "KnowledgeType":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise SchemaError(f"unknown knowledge type: {text!r}") from None


class FilterStatus(str, enum.Enum):
    """Filtering lifecycle of a triple. Only HinderedBy triples move through
    raw -> kept/removed; every other relation stays not_applicable."""

    NOT_APPLICABLE = "not_applicable"
    RAW = "raw"
    KEPT = "kept"
    REMOVED = "removed"


# Localized labels used for the {TYPE} slot of the head-distillation prompt.
TYPE_LABELS = {
    "zh": {
        KnowledgeType.VOLUNTARY: "自愿事件",
        KnowledgeType.INVOLUNTARY: "非自愿事件",
        KnowledgeType.STATE: "状态",
    },
    "en": {
        KnowledgeType.VOLUNTARY: "voluntary event",
        KnowledgeType.INVOLUNTARY: "involuntary event",
        KnowledgeType.STATE: "state",
    },
}


@dataclass(frozen=True)
class Relation:
    """One of the seven pre-defined relations.

    ``templates`` maps a language code to the relation's sentence template,
    which must contain the ``{Head}`` and ``{Tail}`` slots. ``template``
    exposes the canonical English wording.
    """

    name: str
    valid_types: frozenset
    templates: tuple  # ((language, template), ...) pairs

    @property
    def template(self) -> str:
        return self.template_for("en")

    def template_for(self, lang: str) -> str:
        for code, tpl in self.templates:
            if code == lang:
                return tpl
        raise SchemaError(f"relation {self.name} has no {lang!r} template")

    def sentence(self, head_text: str, tail_text: str, lang: str = DEFAULT_LANG) -> str:
        """Instantiate the template into a natural sentence."""
        tpl = self.template_for(lang)
        return tpl.replace("{Head}", head_text).replace("{Tail}", tail_text)

    def sentence_with_blank(self, head_text: str, lang: str = DEFAULT_LANG) -> str:
        """The template sentence with the tail slot left open, used at the
        end of a tail-distillation prompt."""
        return self.sentence(head_text, BLANK, lang)

    def is_valid_for(self, kt: KnowledgeType) -> bool:
        return kt in self.valid_types


_ALL = frozenset(KnowledgeType)
_NO_STATE = frozenset({KnowledgeType.VOLUNTARY, KnowledgeType.INVOLUNTARY})
_VOLUNTARY_ONLY = frozenset({KnowledgeType.VOLUNTARY})


def _rel(name: str, valid: frozenset, en: str, zh: str) -> Relation:
    return Relation(name=name, valid_types=valid, templates=(("en", en), ("zh", zh)))


# Declaration order is the canonical presentation order used everywhere a
# stable relation ordering is needed.
RELATIONS: dict = {
    r.name: r
    for r in (
        _rel(
            "xWant",
            _ALL,
            "After the occurrence of {Head}, PersonX wants {Tail}",
            "{Head}发生后，PersonX想要{Tail}",
        ),
        _rel(
            "xReact",
            _NO_STATE,
            "After the occurrence of {Head}, PersonX feels {Tail}",
            "{Head}发生后，PersonX感到{Tail}",
        ),
        _rel(
            "xEffect",
            _ALL,
            "After the occurrence of {Head}, PersonX does {Tail} as a result",
            "{Head}发生后，PersonX因此{Tail}",
        ),
        _rel(
            "xAttr",
            _ALL,
            "After the occurrence of {Head}, we can know that PersonX is {Tail}",
            "{Head}发生后，可以看出PersonX是{Tail}",
        ),
        _rel(
            "xNeed",
            _ALL,
            "Before the occurrence of {Head}, PersonX needs {Tail}",
            "{Head}发生前，PersonX需要{Tail}",
        ),
        _rel(
            "xIntent",
            _VOLUNTARY_ONLY,
            "When doing {Head}, PersonX's intent is {Tail}",
            "做{Head}时，PersonX的意图是{Tail}",
        ),
        _rel(
            "HinderedBy",
            _ALL,
            "The occurrence of {Head} can be hindered by {Tail}",
            "{Head}的发生可能被{Tail}阻碍",
        ),
    )
}

RELATION_ORDER = tuple(RELATIONS)
HINDERED_BY = RELATIONS["HinderedBy"]


def get_relation(name: str) -> Relation:
    try:
        return RELATIONS[name]
    except KeyError:
        raise SchemaError(f"unknown relation: {name!r}") from None


def valid_relations(kt: KnowledgeType) -> set:
    """All relations whose validity cell for ``kt`` is checked."""
    return {r for r in RELATIONS.values() if r.is_valid_for(kt)}


# --- normalization -----------------------------------------------------------

# Leading list markers: bullets, "1.", "2)", "3、", "(4)", "5．". The digit
# forms refuse to fire in front of another digit so decimals and ranges
# ("1.5倍", "3、5号楼") survive as content.
_LEADING_MARKER = re.compile(r"^\s*(?:[-*•·●◦‣]+|\(?\d{1,3}[.)、．](?!\d)|\(\d{1,3}\))\s*")
_TRAILING_PUNCT = re.compile(r"[\s.。,，!！?？;；:：…~～]+$")
_WS = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """Canonical form used for all uniqueness decisions.

    Trims whitespace, strips leading list markers, strips trailing sentence
    punctuation, and collapses internal whitespace runs (including tabs and
    newlines) to a single space. May return an empty string.

    Runs to a fixpoint, so normalized text is always stable under
    re-normalization — stored keys must not drift when records are read
    back and reconstructed.
    """
    prev = None
    while text != prev:
        prev = text
        text = _LEADING_MARKER.sub("", text.strip(), count=1)
        text = _TRAILING_PUNCT.sub("", text)
        text = _WS.sub(" ", text).strip()
    return text


# --- value types --------------------------------------------------------------

_ORIGINS = ("seed", "distilled")


@dataclass(frozen=True)
class HeadItem:
    """A short event/state description typed as voluntary, involuntary or
    state. Text is stored in normalized form with the PersonX placeholder."""

    text: str
    knowledge_type: KnowledgeType
    origin: str = "distilled"

    def __post_init__(self):
        norm = normalize_text(self.text)
        if not norm:
            raise SchemaError("head item text is empty after normalization")
        object.__setattr__(self, "text", norm)
        if not isinstance(self.knowledge_type, KnowledgeType):
            object.__setattr__(self, "knowledge_type", KnowledgeType.parse(self.knowledge_type))
        if self.origin not in _ORIGINS:
            raise SchemaError(f"bad head origin: {self.origin!r}")

    @property
    def key(self) -> tuple:
        return (self.text, self.knowledge_type.value)


@dataclass(frozen=True)
class Triple:
    """(head, relation, tail) with provenance and filtering lifecycle.

    Construction enforces the validity matrix: a triple whose relation is
    not valid for the head's knowledge type cannot exist. ``filter_status``
    defaults to raw for HinderedBy and not_applicable otherwise.
    """

    head: HeadItem
    relation: Relation
    tail: str
    origin: str = "distilled"
    filter_status: FilterStatus | None = None

    def __post_init__(self):
        if not self.relation.is_valid_for(self.head.knowledge_type):
            raise SchemaError(
                f"relation {self.relation.name} is not valid for "
                f"{self.head.knowledge_type.value} head items"
            )
        norm = normalize_text(self.tail)
        if not norm:
            raise SchemaError("tail text is empty after normalization")
        object.__setattr__(self, "tail", norm)
        if self.origin not in _ORIGINS:
            raise SchemaError(f"bad triple origin: {self.origin!r}")
        status = self.filter_status
        if status is None:
            status = (
                FilterStatus.RAW
                if self.relation.name == "HinderedBy"
                else FilterStatus.NOT_APPLICABLE
            )
        elif not isinstance(status, FilterStatus):
            status = FilterStatus(status)
        if self.relation.name == "HinderedBy":
            if status == FilterStatus.NOT_APPLICABLE:
                raise SchemaError("HinderedBy triples carry a filtering status")
        elif status != FilterStatus.NOT_APPLICABLE:
            raise SchemaError(
                f"filter status {status.value} is reserved for HinderedBy triples"
            )
        object.__setattr__(self, "filter_status", status)

    @property
    def key(self) -> tuple:
        return (self.head.text, self.head.knowledge_type.value, self.relation.name, self.tail)

    def sentence(self, lang: str = DEFAULT_LANG) -> str:
        return self.relation.sentence(self.head.text, self.tail, lang)


_PROMPT_KINDS = ("head_distill", "tail_distill", "judge")


@dataclass(frozen=True)
class PromptSpec:
    """Shape of one prompt kind: how many in-context examples, at what
    temperature, and (for tail distillation) how many tails per request."""

    kind: str
    example_count: int
    temperature: float
    tails_per_request: int | None = None

    def __post_init__(self):
        if self.kind not in _PROMPT_KINDS:
            raise SchemaError(f"unknown prompt kind: {self.kind!r}")
        if self.example_count < 0:
            raise SchemaError("example_count must be >= 0")
        if not 0.0 <= self.temperature <= 2.0:
            raise SchemaError("temperature must be in [0, 2]")
        if self.kind == "tail_distill":
            if not self.tails_per_request or self.tails_per_request < 1:
                raise SchemaError("tail_distill requires tails_per_request >= 1")
        elif self.tails_per_request is not None:
            raise SchemaError("tails_per_request only applies to tail_distill")

    @classmethod
    def head_distill(cls, example_count: int = 10, temperature: float = 0.7) -> "PromptSpec":
        return cls("head_distill", example_count, temperature)

    @classmethod
    def tail_distill(
        cls,
        example_count: int = 8,
        tails_per_request: int = 10,
        temperature: float = 0.7,
    ) -> "PromptSpec":
        return cls("tail_distill", example_count, temperature, tails_per_request)

    @classmethod
    def judge(cls, temperature: float = 0.0) -> "PromptSpec":
        return cls("judge", 0, temperature)


# --- prompt templates ---------------------------------------------------------

_TEMPLATE_FILES = ("head_distill", "tail_distill", "judge")


@dataclass(frozen=True)
class TemplateSet:
    """The three prompt scaffolds, loaded from UTF-8 text assets.

    Slots: {TYPE} knowledge-type label, {EXAMPLES} numbered example block,
    {HEAD} query sentence, {NAME} person name, {N} requested item count.
    """

    language: str
    head_distill: str
    tail_distill: str
    judge: str

    @classmethod
    def from_dir(cls, path: str | Path, language: str) -> "TemplateSet":
        base = Path(path)
        texts = {}
        for name in _TEMPLATE_FILES:
            f = base / f"{name}.txt"
            if not f.is_file():
                raise SchemaError(f"missing prompt template: {f}")
            texts[name] = f.read_text(encoding="utf-8").strip()
        return cls(language=language, **texts)

    @classmethod
    def builtin(cls, language: str = DEFAULT_LANG) -> "TemplateSet":
        root = resources.files("ckdistill") / "assets" / "templates" / language
        if not root.is_dir():
            raise SchemaError(f"no builtin templates for language {language!r}")
        return cls.from_dir(Path(str(root)), language)


def _numbered(items: Iterable[str]) -> str:
    return "\n".join(f"{i}. {text}" for i, text in enumerate(items, start=1))


def render_head_prompt(
    seed_sample: Sequence[HeadItem],
    kt: KnowledgeType,
    templates: TemplateSet,
    spec: PromptSpec | None = None,
    request_count: int = 10,
) -> str:
    """Few-shot prompt asking for more head items of one knowledge type."""
    if not seed_sample:
        raise SchemaError("head prompt needs at least one example seed")
    for item in seed_sample:
        if item.knowledge_type != kt:
            raise SchemaError(
                f"seed {item.text!r} has type {item.knowledge_type.value}, "
                f"expected {kt.value}"
            )
    if spec is not None and len(seed_sample) != spec.example_count:
        raise SchemaError(
            f"expected {spec.example_count} example seeds, got {len(seed_sample)}"
        )
    label = TYPE_LABELS.get(templates.language, TYPE_LABELS["en"])[kt]
    return (
        templates.head_distill.replace("{TYPE}", label)
        .replace("{EXAMPLES}", _numbered(item.text for item in seed_sample))
        .replace("{N}", str(request_count))
    )


def render_tail_prompt(
    example_triples: Sequence[Triple],
    head: HeadItem,
    rel: Relation,
    name: str,
    templates: TemplateSet,
    spec: PromptSpec,
) -> str:
    """Few-shot prompt asking for tail completions of one (head, relation).

    Every PersonX placeholder in the rendered sentences is replaced by
    ``name``; the finished prompt never contains a literal placeholder.
    """
    if not rel.is_valid_for(head.knowledge_type):
        raise SchemaError(
            f"relation {rel.name} is not valid for {head.knowledge_type.value} heads"
        )
    for ex in example_triples:
        if ex.relation.name != rel.name:
            raise SchemaError(
                f"example triple has relation {ex.relation.name}, expected {rel.name}"
            )
    if not name or "PersonX" in name:
        raise SchemaError(f"bad name for placeholder substitution: {name!r}")
    lang = templates.language
    examples = _numbered(ex.sentence(lang) for ex in example_triples)
    prompt = (
        templates.tail_distill.replace("{NAME}", name)
        .replace("{EXAMPLES}", examples)
        .replace("{HEAD}", rel.sentence_with_blank(head.text, lang))
        .replace("{N}", str(spec.tails_per_request))
    )
    prompt = prompt.replace("PersonX", name)
    if "PersonX" in prompt or "[NAME]" in prompt:
        raise SchemaError("placeholder left unsubstituted in tail prompt")
    return prompt


def render_judge_prompt(triple: Triple, templates: TemplateSet) -> str:
    """Yes/no validity question over the triple's rendered sentence."""
    return templates.judge.replace("{HEAD}", triple.sentence(templates.language))


# --- seed and name-pool files -------------------------------------------------


def _jsonl_records(path: str | Path):
    p = Path(path)
    if not p.is_file():
        raise SchemaError(f"seed file not found: {p}")
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise SchemaError(f"{p}:{lineno}: invalid JSON ({e.msg})") from None
        if not isinstance(rec, dict):
            raise SchemaError(f"{p}:{lineno}: expected a JSON object")
        yield lineno, rec


def load_head_seeds(path: str | Path) -> list:
    """Line-delimited head seeds: {"text": ..., "knowledge_type": ...}."""
    seeds, seen = [], set()
    for lineno, rec in _jsonl_records(path):
        try:
            item = HeadItem(
                text=str(rec["text"]),
                knowledge_type=KnowledgeType.parse(str(rec["knowledge_type"])),
                origin="seed",
            )
        except KeyError as e:
            raise SchemaError(f"{path}:{lineno}: missing field {e.args[0]!r}") from None
        except SchemaError as e:
            raise SchemaError(f"{path}:{lineno}: {e}") from None
        if item.key in seen:
            raise SchemaError(f"{path}:{lineno}: duplicate head seed {item.text!r}")
        seen.add(item.key)
        seeds.append(item)
    if not seeds:
        raise SchemaError(f"{path}: no head seeds found")
    return seeds


def load_triple_seeds(path: str | Path) -> list:
    """Line-delimited triple seeds:
    {"head": ..., "head_type": ..., "relation": ..., "tail": ...}."""
    seeds, seen = [], set()
    for lineno, rec in _jsonl_records(path):
        try:
            head = HeadItem(
                text=str(rec["head"]),
                knowledge_type=KnowledgeType.parse(str(rec["head_type"])),
                origin="seed",
            )
            triple = Triple(
                head=head,
                relation=get_relation(str(rec["relation"])),
                tail=str(rec["tail"]),
                origin="seed",
            )
        except KeyError as e:
            raise SchemaError(f"{path}:{lineno}: missing field {e.args[0]!r}") from None
        except SchemaError as e:
            raise SchemaError(f"{path}:{lineno}: {e}") from None
        if triple.key in seen:
            raise SchemaError(f"{path}:{lineno}: duplicate triple seed")
        seen.add(triple.key)
        seeds.append(triple)
    if not seeds:
        raise SchemaError(f"{path}: no triple seeds found")
    return seeds


def load_name_pool(path: str | Path) -> list:
    """Name pool: one name per line, blanks ignored, order preserved."""
    p = Path(path)
    if not p.is_file():
        raise SchemaError(f"name pool not found: {p}")
    names, seen = [], set()
    for line in p.read_text(encoding="utf-8").splitlines():
        name = line.strip()
        if name and name not in seen:
            seen.add(name)
            names.append(name)
    if not names:
        raise SchemaError(f"{p}: name pool is empty")
    return names


def builtin_name_pool() -> list:
    root = resources.files("ckdistill") / "assets" / "names_zh.txt"
    return load_name_pool(Path(str(root)))
