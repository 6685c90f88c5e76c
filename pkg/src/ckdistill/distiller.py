"""Two-stage distillation: collect head items, then collect tails for every
valid (head, relation) pair.

Randomness is derived per task from the plan's root seed, so runs are
reproducible and resumable regardless of the order tasks complete in.
"""
from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .errors import CostCapError, GatewayError, PlanError, SchemaError
from .gateway import CompletionRequest, GatewayBase
from .schema import (
    FilterStatus,
    HeadItem,
    KnowledgeType,
    PromptSpec,
    Relation,
    TemplateSet,
    Triple,
    normalize_text,
    render_head_prompt,
    render_tail_prompt,
    valid_relations,
)

log = logging.getLogger(__name__)

# Conservative, start-anchored refusal markers; mid-sentence negations like
# "PersonX无法入睡" must never be caught.
DEFAULT_REFUSAL_MARKERS = (
    "抱歉",
    "对不起",
    "很抱歉",
    "作为一个ai",
    "作为ai",
    "我不能",
    "i'm sorry",
    "i am sorry",
    "sorry,",
    "i cannot",
    "i can't",
    "as an ai",
)


@dataclass(frozen=True)
class DistillPlan:
    """Targets, seed pool sizes, prompt shapes and loop bounds for one run."""

    target_heads_per_type: int
    seeds_per_type: int = 200
    triple_seeds_per_relation: int = 100
    head_spec: PromptSpec = field(default_factory=PromptSpec.head_distill)
    tail_spec: PromptSpec = field(default_factory=PromptSpec.tail_distill)
    rng_seed: int = 0
    items_per_head_request: int = 10
    stall_limit: int = 20
    failure_tolerance: int = 3
    max_requests_per_stage: int = 1000

    def __post_init__(self):
        if self.target_heads_per_type < 1:
            raise PlanError("target_heads_per_type must be positive")
        if self.seeds_per_type < self.head_spec.example_count:
            raise PlanError(
                f"seeds_per_type ({self.seeds_per_type}) must cover the "
                f"{self.head_spec.example_count} prompt examples"
            )
        if self.triple_seeds_per_relation < self.tail_spec.example_count:
            raise PlanError(
                f"triple_seeds_per_relation ({self.triple_seeds_per_relation}) must "
                f"cover the {self.tail_spec.example_count} prompt examples"
            )
        if self.stall_limit < 1 or self.failure_tolerance < 0:
            raise PlanError("stall_limit must be >= 1 and failure_tolerance >= 0")
        if self.items_per_head_request < 1 or self.max_requests_per_stage < 1:
            raise PlanError("request bounds must be positive")


@dataclass
class ParseReport:
    """Accounting for one parsed response: every candidate line is either
    parsed, rejected (with a reason), or a duplicate."""

    parsed_count: int = 0
    rejected_lines: list = field(default_factory=list)  # (line, reason)
    duplicate_count: int = 0

    @property
    def total_lines(self) -> int:
        return self.parsed_count + len(self.rejected_lines) + self.duplicate_count

    def merge(self, other: "ParseReport") -> None:
        self.parsed_count += other.parsed_count
        self.rejected_lines.extend(other.rejected_lines)
        self.duplicate_count += other.duplicate_count


def derive_rng(root_seed: int, *parts) -> random.Random:
    """Stable per-task RNG, independent of Python hash randomization."""
    key = "|".join([str(root_seed), *map(str, parts)])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def sample_seeds(pool: Sequence, k: int, rng: random.Random) -> list:
    """k distinct elements without replacement; deterministic given rng."""
    if len(pool) < k:
        raise PlanError(f"seed pool of {len(pool)} cannot supply {k} examples")
    return rng.sample(list(pool), k)


def is_refusal(text: str, markers: Sequence[str] = DEFAULT_REFUSAL_MARKERS) -> bool:
    lowered = text.strip().lower()
    return any(lowered.startswith(m) for m in markers)


def parse_items(
    response_text: str,
    refusal_markers: Sequence[str] = DEFAULT_REFUSAL_MARKERS,
) -> tuple:
    """Split a response into normalized items.

    Returns (items, report). Blank lines, refusal lines and lines that
    normalize to nothing are rejected; repeats within the same response
    count as duplicates.
    """
    items: list = []
    seen: set = set()
    report = ParseReport()
    for line in response_text.splitlines():
        if not line.strip():
            report.rejected_lines.append((line, "blank"))
            continue
        if is_refusal(line, refusal_markers):
            report.rejected_lines.append((line, "refusal"))
            continue
        norm = normalize_text(line)
        if not norm:
            report.rejected_lines.append((line, "empty_after_normalization"))
            continue
        if norm in seen:
            report.duplicate_count += 1
            continue
        seen.add(norm)
        items.append(norm)
    report.parsed_count = len(items)
    return items, report


@dataclass
class HeadDistillResult:
    knowledge_type: KnowledgeType
    items: list  # HeadItem, in discovery order, capped at the target
    cycles: int
    requests: int
    stalled: bool
    parse: ParseReport
    warnings: list = field(default_factory=list)


def distill_heads(
    kt: KnowledgeType,
    seeds: Sequence[HeadItem],
    plan: DistillPlan,
    gateway: GatewayBase,
    templates: TemplateSet,
    refusal_markers: Sequence[str] = DEFAULT_REFUSAL_MARKERS,
) -> HeadDistillResult:
    """Grow the head-item set for one knowledge type.

    Each cycle samples prompt examples from the seed pool, asks the gateway
    for more items, and keeps the new unique ones. Stops at the target
    count, the per-stage request cap, or after ``stall_limit`` consecutive
    cycles that produced nothing new. Items equal to a seed are dropped so
    seeds stay a disjoint provenance class.
    """
    typed = [s for s in seeds if s.knowledge_type == kt]
    if len(typed) != len(seeds):
        raise SchemaError(f"seed list contains items that are not {kt.value}")
    rng = derive_rng(plan.rng_seed, "heads", kt.value)
    seed_texts = {s.text for s in typed}
    collected: dict = {}
    result = HeadDistillResult(kt, [], 0, 0, False, ParseReport())
    stalled_cycles = 0
    consecutive_failures = 0

    while len(collected) < plan.target_heads_per_type:
        if result.requests >= plan.max_requests_per_stage:
            result.warnings.append(
                f"request cap {plan.max_requests_per_stage} reached with "
                f"{len(collected)} of {plan.target_heads_per_type} items"
            )
            break
        if stalled_cycles >= plan.stall_limit:
            result.stalled = True
            result.warnings.append(
                f"stalled after {stalled_cycles} cycles without new items "
                f"({len(collected)} of {plan.target_heads_per_type})"
            )
            break
        sample = sample_seeds(typed, plan.head_spec.example_count, rng)
        prompt = render_head_prompt(
            sample, kt, templates, plan.head_spec, plan.items_per_head_request
        )
        req = CompletionRequest.user(
            gateway.model_id, prompt, plan.head_spec.temperature
        )
        result.cycles += 1
        try:
            resp = gateway.complete(req)
            result.requests += 1
            consecutive_failures = 0
        except CostCapError as e:
            result.warnings.append(str(e))
            break
        except GatewayError as e:
            result.requests += 1
            consecutive_failures += 1
            stalled_cycles += 1
            log.warning("head cycle failed (%s)", e)
            if consecutive_failures > plan.failure_tolerance:
                raise
            continue
        if is_refusal(resp.text, refusal_markers) or resp.finish_reason == "refused":
            # one fresh-sample retry happens naturally on the next cycle
            result.parse.rejected_lines.append((resp.text[:80], "refusal"))
            stalled_cycles += 1
            continue
        texts, report = parse_items(resp.text, refusal_markers)
        result.parse.merge(report)
        new_count = 0
        for text in texts:
            if text in seed_texts or text in collected:
                continue
            collected[text] = HeadItem(text, kt, origin="distilled")
            new_count += 1
            if len(collected) >= plan.target_heads_per_type:
                break
        stalled_cycles = 0 if new_count else stalled_cycles + 1

    result.items = list(collected.values())[: plan.target_heads_per_type]
    return result


def enumerate_tail_tasks(heads: Iterable[HeadItem]) -> list:
    """All (head, relation) pairs allowed by the validity matrix, ordered by
    head text then relation name."""
    tasks = []
    for head in heads:
        for rel in valid_relations(head.knowledge_type):
            tasks.append((head, rel))
    tasks.sort(key=lambda t: (t[0].text, t[0].knowledge_type.value, t[1].name))
    return tasks


def task_id(head: HeadItem, rel: Relation) -> str:
    key = f"{head.text}|{head.knowledge_type.value}|{rel.name}"
    return hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]


def build_tail_request(
    head: HeadItem,
    rel: Relation,
    triple_seeds: Sequence[Triple],
    plan: DistillPlan,
    name_pool: Sequence[str],
    templates: TemplateSet,
    model_id: str,
) -> tuple:
    """(request, name) for one tail task; deterministic given the plan seed."""
    pool = [t for t in triple_seeds if t.relation.name == rel.name]
    rng = derive_rng(plan.rng_seed, "tails", head.text, head.knowledge_type.value, rel.name)
    examples = sample_seeds(pool, plan.tail_spec.example_count, rng)
    name = name_pool[rng.randrange(len(name_pool))]
    prompt = render_tail_prompt(examples, head, rel, name, templates, plan.tail_spec)
    req = CompletionRequest.user(model_id, prompt, plan.tail_spec.temperature)
    return req, name


@dataclass
class TailDistillResult:
    triples: list
    report: ParseReport


def parse_tail_response(
    response_text: str,
    head: HeadItem,
    rel: Relation,
    name: str,
    plan: DistillPlan,
    refusal_markers: Sequence[str] = DEFAULT_REFUSAL_MARKERS,
) -> TailDistillResult:
    """Turn one response into triples: restore the PersonX placeholder,
    normalize, drop duplicates, cap at tails_per_request."""
    texts, report = parse_items(response_text, refusal_markers)
    triples: list = []
    seen: set = set()
    for text in texts:
        tail = normalize_text(text.replace(name, "PersonX"))
        if not tail or tail in seen:
            if tail:
                report.duplicate_count += 1
                report.parsed_count -= 1
            continue
        seen.add(tail)
        if len(triples) < (plan.tail_spec.tails_per_request or 0):
            triples.append(Triple(head=head, relation=rel, tail=tail, origin="distilled"))
    return TailDistillResult(triples, report)


def distill_tails(
    task: tuple,
    triple_seeds: Sequence[Triple],
    plan: DistillPlan,
    gateway: GatewayBase,
    name_pool: Sequence[str],
    templates: TemplateSet,
) -> TailDistillResult:
    """One gateway call for one (head, relation) task."""
    head, rel = task
    req, name = build_tail_request(
        head, rel, triple_seeds, plan, name_pool, templates, gateway.model_id
    )
    resp = gateway.complete(req)
    if is_refusal(resp.text) or resp.finish_reason == "refused":
        report = ParseReport(rejected_lines=[(resp.text[:80], "refusal")])
        return TailDistillResult([], report)
    return parse_tail_response(resp.text, head, rel, name, plan)


# --- batched tail stage with checkpointing -------------------------------------


@dataclass
class TailStageReport:
    tasks_total: int = 0
    tasks_done: int = 0
    tasks_failed: list = field(default_factory=list)  # (task_id, message)
    triples_produced: int = 0
    requests: int = 0
    resumed_from: int = 0


class Checkpoint:
    """Resumable progress manifest for the tail stage."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.completed: set = set()
        self.requests_used = 0
        self.rng_seed: int | None = None
        if self.path and self.path.is_file():
            data = json.loads(self.path.read_text(encoding="utf-8"))
            self.completed = set(data.get("completed", []))
            self.requests_used = data.get("requests_used", 0)
            self.rng_seed = data.get("rng_seed")

    def write(self) -> None:
        if not self.path:
            return
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(
            json.dumps(
                {
                    "version": 1,
                    "rng_seed": self.rng_seed,
                    "requests_used": self.requests_used,
                    "completed": sorted(self.completed),
                },
                indent=0,
            ),
            encoding="utf-8",
        )
        tmp.replace(self.path)


def run_tail_stage(
    heads: Sequence[HeadItem],
    triple_seeds: Sequence[Triple],
    plan: DistillPlan,
    gateway: GatewayBase,
    name_pool: Sequence[str],
    templates: TemplateSet,
    sink,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int = 500,
) -> TailStageReport:
    """Dispatch every valid tail task through the gateway in bounded batches.

    ``sink(triples)`` receives each chunk's triples (typically the store's
    insert). Completed task ids are checkpointed every ``checkpoint_every``
    tasks so an interrupted run resumes without re-spending requests.
    """
    ckpt = Checkpoint(checkpoint_path)
    if ckpt.rng_seed is not None and ckpt.rng_seed != plan.rng_seed:
        raise PlanError(
            f"checkpoint was written with rng_seed={ckpt.rng_seed}, "
            f"plan has {plan.rng_seed}"
        )
    ckpt.rng_seed = plan.rng_seed

    tasks = enumerate_tail_tasks(heads)
    report = TailStageReport(tasks_total=len(tasks), resumed_from=len(ckpt.completed))
    pending = [(t, task_id(*t)) for t in tasks if task_id(*t) not in ckpt.completed]
    budget = max(0, plan.max_requests_per_stage - ckpt.requests_used)
    if len(pending) > budget:
        log.warning(
            "tail stage budget %d covers %d of %d pending tasks; rerun to resume",
            budget,
            budget,
            len(pending),
        )
        pending = pending[:budget]

    chunk_size = max(1, gateway.max_concurrent * 4)
    since_checkpoint = 0
    for start in range(0, len(pending), chunk_size):
        chunk = pending[start : start + chunk_size]
        prepared = []
        for (head, rel), tid in chunk:
            req, name = build_tail_request(
                head, rel, triple_seeds, plan, name_pool, templates, gateway.model_id
            )
            prepared.append((head, rel, tid, req, name))
        results = gateway.complete_batch([p[3] for p in prepared])
        chunk_triples = []
        for res, (head, rel, tid, _req, name) in zip(results, prepared):
            report.requests += 1
            ckpt.requests_used += 1
            if not res.ok:
                report.tasks_failed.append((tid, str(res.error)))
                continue
            parsed = parse_tail_response(res.response.text, head, rel, name, plan)
            chunk_triples.extend(parsed.triples)
            ckpt.completed.add(tid)
            report.tasks_done += 1
            since_checkpoint += 1
        if chunk_triples:
            sink(chunk_triples)
            report.triples_produced += len(chunk_triples)
        if since_checkpoint >= checkpoint_every:
            ckpt.write()
            since_checkpoint = 0
    ckpt.write()
    return report
