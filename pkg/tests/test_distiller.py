import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ckdistill.distiller import (
    Checkpoint,
    DistillPlan,
    ParseReport,
    build_tail_request,
    derive_rng,
    distill_heads,
    distill_tails,
    enumerate_tail_tasks,
    is_refusal,
    parse_items,
    parse_tail_response,
    run_tail_stage,
    sample_seeds,
    task_id,
)
from ckdistill.errors import CostCapError, PlanError, SchemaError, TransportError
from ckdistill.gateway import ScriptedGateway
from ckdistill.schema import KnowledgeType, PromptSpec, TemplateSet, get_relation

from conftest import head, triple

ZH = TemplateSet.builtin("zh")
NAMES = ["小明", "小红", "小刚"]


def toy_plan(**overrides) -> DistillPlan:
    base = dict(
        target_heads_per_type=6,
        seeds_per_type=4,
        triple_seeds_per_relation=2,
        head_spec=PromptSpec.head_distill(3, 0.7),
        tail_spec=PromptSpec.tail_distill(2, 4, 0.7),
        rng_seed=13,
        items_per_head_request=5,
        stall_limit=3,
        failure_tolerance=2,
        max_requests_per_stage=50,
    )
    base.update(overrides)
    return DistillPlan(**base)


def vol_seeds(n: int = 4):
    return [head(f"PersonX种子{i}", "voluntary", origin="seed") for i in range(n)]


def triple_seed_pool(per_relation: int = 2):
    from ckdistill.schema import RELATION_ORDER

    return [
        triple(f"PersonX样例{rel}{i}", rel, f"样例尾{rel}{i}")
        for rel in RELATION_ORDER
        for i in range(per_relation)
    ]


class TestDeriveRng:
    def test_same_parts_same_stream(self):
        a = derive_rng(7, "tails", "某事", "voluntary", "xWant")
        b = derive_rng(7, "tails", "某事", "voluntary", "xWant")
        assert [a.random() for _ in range(5)] == [b.random() for _ in range(5)]

    def test_any_part_changes_stream(self):
        base = derive_rng(7, "tails", "某事").random()
        assert derive_rng(8, "tails", "某事").random() != base
        assert derive_rng(7, "heads", "某事").random() != base
        assert derive_rng(7, "tails", "别事").random() != base

    def test_sequence_is_frozen(self):
        # Pin the derivation so checkpointed runs stay replayable across
        # releases: changing the key scheme would silently re-randomize
        # every resumed run.
        # value recomputed by hand: sha256("0|heads|voluntary")[:8] big-endian
        rng = derive_rng(0, "heads", "voluntary")
        assert rng.randrange(10**9) == 742151500

    def test_sample_seeds_distinct_and_deterministic(self):
        pool = list(range(20))
        got = sample_seeds(pool, 5, derive_rng(1, "x"))
        assert len(set(got)) == 5
        assert got == sample_seeds(pool, 5, derive_rng(1, "x"))

    def test_sample_seeds_pool_too_small(self):
        with pytest.raises(PlanError, match="cannot supply"):
            sample_seeds([1, 2], 3, derive_rng(0))


class TestRefusalAndParsing:
    @pytest.mark.parametrize(
        "text",
        ["抱歉，我帮不了", "对不起，这个问题", "我不能提供", "I'm sorry, but no", "As an AI, I.."],
    )
    def test_refusals_detected(self, text):
        assert is_refusal(text)

    @pytest.mark.parametrize(
        "text",
        ["PersonX无法入睡", "PersonX感到抱歉", "他说对不起之后离开了", "PersonX不能按时到场"],
    )
    def test_mid_sentence_negations_kept(self, text):
        assert not is_refusal(text)

    def test_parse_items_accounting(self):
        text = "1. 去跑步\n\n2. 去跑步\n抱歉，无法继续\n3. 看书\n。。。"
        items, report = parse_items(text)
        assert items == ["去跑步", "看书"]
        assert report.parsed_count == 2
        assert report.duplicate_count == 1
        reasons = [r for _, r in report.rejected_lines]
        assert reasons.count("blank") == 1
        assert reasons.count("refusal") == 1
        assert reasons.count("empty_after_normalization") == 1
        assert report.total_lines == len(text.splitlines())

    @settings(deadline=None, max_examples=100)
    @given(st.text(alphabet="abc跑步看书。1.-\n ", max_size=120))
    def test_every_line_is_accounted_for(self, text):
        _, report = parse_items(text)
        assert report.total_lines == len(text.splitlines())

    def test_reports_merge(self):
        a = ParseReport(parsed_count=2, rejected_lines=[("x", "blank")], duplicate_count=1)
        b = ParseReport(parsed_count=1, rejected_lines=[], duplicate_count=4)
        a.merge(b)
        assert (a.parsed_count, a.duplicate_count, a.total_lines) == (3, 5, 9)


class TestPlanValidation:
    def test_target_must_be_positive(self):
        with pytest.raises(PlanError):
            toy_plan(target_heads_per_type=0)

    def test_seed_pool_must_cover_examples(self):
        with pytest.raises(PlanError, match="seeds_per_type"):
            toy_plan(seeds_per_type=2)  # head_spec asks for 3 examples
        with pytest.raises(PlanError, match="triple_seeds_per_relation"):
            toy_plan(triple_seeds_per_relation=1)

    def test_loop_bounds(self):
        with pytest.raises(PlanError):
            toy_plan(stall_limit=0)
        with pytest.raises(PlanError):
            toy_plan(max_requests_per_stage=0)


def numbered_responder(prefix: str):
    """Each call yields a fresh block of unique items."""
    counter = {"n": 0}

    def respond(request, index):
        lines = []
        for _ in range(3):
            counter["n"] += 1
            lines.append(f"{len(lines) + 1}. {prefix}{counter['n']}")
        return "\n".join(lines)

    return respond


class TestHeadStage:
    def test_reaches_target_and_caps(self):
        gw = ScriptedGateway(responder=numbered_responder("PersonX学做事"))
        res = distill_heads(KnowledgeType.VOLUNTARY, vol_seeds(), toy_plan(), gw, ZH)
        assert len(res.items) == 6
        assert not res.stalled
        assert all(i.origin == "distilled" for i in res.items)
        assert len({i.text for i in res.items}) == 6

    def test_seed_texts_are_excluded(self):
        def respond(request, index):
            return "1. PersonX种子0\n2. PersonX新事一\n3. PersonX新事二"

        gw = ScriptedGateway(responder=respond)
        res = distill_heads(
            KnowledgeType.VOLUNTARY, vol_seeds(), toy_plan(target_heads_per_type=2), gw, ZH
        )
        assert {i.text for i in res.items} == {"PersonX新事一", "PersonX新事二"}

    def test_mixed_type_seed_list_rejected(self):
        seeds = vol_seeds(3) + [head("PersonX头疼", "involuntary", origin="seed")]
        with pytest.raises(SchemaError, match="voluntary"):
            distill_heads(KnowledgeType.VOLUNTARY, seeds, toy_plan(), ScriptedGateway(["x"]), ZH)

    def test_stalls_after_limit_without_new_items(self):
        gw = ScriptedGateway(responder=lambda r, i: "1. PersonX原地踏步")
        res = distill_heads(KnowledgeType.VOLUNTARY, vol_seeds(), toy_plan(), gw, ZH)
        assert res.stalled
        assert len(res.items) == 1
        assert any("stalled" in w for w in res.warnings)
        # first cycle produced the item, then stall_limit empty cycles
        assert res.cycles == 1 + 3

    def test_whole_response_refusal_counts_toward_stall(self):
        gw = ScriptedGateway(responder=lambda r, i: "抱歉，我无法帮助你")
        res = distill_heads(KnowledgeType.VOLUNTARY, vol_seeds(), toy_plan(), gw, ZH)
        assert res.stalled and res.items == []

    def test_transient_failures_within_tolerance_continue(self):
        outcomes = [TransportError("boom"), TransportError("boom")]
        fresh = numbered_responder("PersonX继续做事")

        def respond(request, index):
            if outcomes:
                raise outcomes.pop(0)
            return fresh(request, index)

        gw = ScriptedGateway(responder=respond)
        res = distill_heads(KnowledgeType.VOLUNTARY, vol_seeds(), toy_plan(), gw, ZH)
        assert len(res.items) == 6

    def test_failures_beyond_tolerance_raise(self):
        gw = ScriptedGateway(responder=lambda r, i: (_ for _ in ()).throw(TransportError("down")))
        with pytest.raises(TransportError):
            distill_heads(
                KnowledgeType.VOLUNTARY, vol_seeds(), toy_plan(failure_tolerance=1), gw, ZH
            )

    def test_request_cap_stops_with_warning(self):
        gw = ScriptedGateway(responder=lambda r, i: "1. PersonX只有一件事")
        res = distill_heads(
            KnowledgeType.VOLUNTARY,
            vol_seeds(),
            toy_plan(max_requests_per_stage=2, stall_limit=10),
            gw,
            ZH,
        )
        assert res.requests == 2
        assert any("request cap" in w for w in res.warnings)

    def test_gateway_cost_cap_ends_stage_gracefully(self):
        gw = ScriptedGateway(responder=lambda r, i: "1. PersonX做一件事", request_cap=1)
        res = distill_heads(KnowledgeType.VOLUNTARY, vol_seeds(), toy_plan(), gw, ZH)
        assert len(res.items) == 1
        assert any("cap" in w.lower() for w in res.warnings)


class TestTailTasks:
    def test_enumeration_respects_matrix(self):
        heads = [
            head("PersonX去游泳", "voluntary"),
            head("PersonX头晕", "involuntary"),
            head("PersonX个子高", "state"),
        ]
        tasks = enumerate_tail_tasks(heads)
        per_head = {}
        for h, rel in tasks:
            per_head.setdefault(h.text, set()).add(rel.name)
        assert len(per_head["PersonX去游泳"]) == 7
        assert per_head["PersonX头晕"] == {"xWant", "xEffect", "xAttr", "xReact", "xNeed", "HinderedBy"}
        assert per_head["PersonX个子高"] == {"xWant", "xEffect", "xAttr", "xNeed", "HinderedBy"}
        assert len(tasks) == 18

    def test_enumeration_order_is_canonical(self):
        heads = [head("乙事", "voluntary"), head("甲事", "voluntary")]
        tasks = enumerate_tail_tasks(heads)
        keys = [(h.text, r.name) for h, r in tasks]
        assert keys == sorted(keys)
        assert tasks == enumerate_tail_tasks(list(reversed(heads)))

    def test_task_id_distinct_per_task(self):
        heads = [head("PersonX去游泳", "voluntary"), head("PersonX头晕", "involuntary")]
        ids = [task_id(h, r) for h, r in enumerate_tail_tasks(heads)]
        assert len(set(ids)) == len(ids)

    def test_build_request_is_deterministic(self):
        h = head("PersonX去爬山", "voluntary")
        rel = get_relation("xWant")
        args = (h, rel, triple_seed_pool(), toy_plan(), NAMES, ZH, "m")
        req1, name1 = build_tail_request(*args)
        req2, name2 = build_tail_request(*args)
        assert req1.digest() == req2.digest()
        assert name1 == name2
        assert name1 in NAMES
        assert name1 in req1.text and "PersonX" not in req1.text

    def test_request_varies_by_task(self):
        h = head("PersonX去爬山", "voluntary")
        plan = toy_plan()
        pool = triple_seed_pool()
        d1, _ = build_tail_request(h, get_relation("xWant"), pool, plan, NAMES, ZH, "m")
        d2, _ = build_tail_request(h, get_relation("xNeed"), pool, plan, NAMES, ZH, "m")
        assert d1.digest() != d2.digest()

    def test_parse_restores_placeholder_and_caps(self):
        h = head("PersonX去爬山", "voluntary")
        rel = get_relation("xWant")
        text = "1. 小明想喝水\n2. 小明想喝水\n3. 休息一下\n4. 给小明拍照\n5. 再来一次\n6. 吃点东西"
        res = parse_tail_response(text, h, rel, "小明", toy_plan())
        tails = [t.tail for t in res.triples]
        assert tails == ["PersonX想喝水", "休息一下", "给PersonX拍照", "再来一次"]  # capped at 4
        assert all(t.head == h and t.relation.name == "xWant" for t in res.triples)
        assert res.report.duplicate_count == 1

    def test_distinct_lines_may_collide_after_restore(self):
        h = head("PersonX去爬山", "voluntary")
        rel = get_relation("xWant")
        # "小明想喝水" and "PersonX想喝水" normalize to the same tail
        text = "1. 小明想喝水\n2. PersonX想喝水"
        res = parse_tail_response(text, h, rel, "小明", toy_plan())
        assert [t.tail for t in res.triples] == ["PersonX想喝水"]
        assert res.report.parsed_count == 1
        assert res.report.duplicate_count == 1

    def test_distill_tails_refusal_yields_no_triples(self):
        gw = ScriptedGateway(responder=lambda r, i: "抱歉，我不能回答")
        h = head("PersonX去爬山", "voluntary")
        res = distill_tails((h, get_relation("xWant")), triple_seed_pool(), toy_plan(), gw, NAMES, ZH)
        assert res.triples == []
        assert [r for _, r in res.report.rejected_lines] == ["refusal"]


class TestTailStage:
    def run(self, gw, plan, heads, checkpoint=None):
        got = []
        report = run_tail_stage(
            heads,
            triple_seed_pool(),
            plan,
            gw,
            NAMES,
            ZH,
            sink=got.extend,
            checkpoint_path=checkpoint,
            checkpoint_every=2,
        )
        return got, report

    def test_full_run_covers_every_task(self):
        heads = [head(f"PersonX活动{i}", "voluntary") for i in range(3)]
        gw = ScriptedGateway(responder=lambda r, i: "1. 答复甲\n2. 答复乙")
        got, report = self.run(gw, toy_plan(), heads)
        assert report.tasks_total == report.tasks_done == 21
        assert report.triples_produced == len(got) == 42
        assert report.tasks_failed == []

    def test_failed_tasks_are_recorded_not_completed(self, tmp_path):
        ckpt = tmp_path / "ckpt.json"
        calls = {"n": 0}

        def flaky(request, index):
            calls["n"] += 1
            if calls["n"] == 3:
                return 500
            return "1. 答复"

        heads = [head(f"PersonX活动{i}", "voluntary") for i in range(1)]
        gw = ScriptedGateway(responder=flaky, max_retries=0)
        got, report = self.run(gw, toy_plan(), heads, checkpoint=ckpt)
        assert report.tasks_done == 6 and len(report.tasks_failed) == 1
        data = json.loads(ckpt.read_text())
        assert len(data["completed"]) == 6

        # resume: only the failed task is retried
        gw2 = ScriptedGateway(responder=lambda r, i: "1. 补上的答复")
        got2, report2 = self.run(gw2, toy_plan(), heads, checkpoint=ckpt)
        assert report2.resumed_from == 6
        assert report2.requests == 1
        assert [t.tail for t in got2] == ["补上的答复"]

    def test_budget_exhaustion_resumes_cleanly(self, tmp_path):
        ckpt = tmp_path / "ckpt.json"
        heads = [head(f"PersonX活动{i}", "voluntary") for i in range(2)]  # 14 tasks
        gw = ScriptedGateway(responder=lambda r, i: "1. 答复")
        plan = toy_plan(max_requests_per_stage=5)
        _, first = self.run(gw, plan, heads, checkpoint=ckpt)
        assert first.tasks_done == 5

        _, second = self.run(gw, plan, heads, checkpoint=ckpt)
        assert second.resumed_from == 5
        # budget already half-spent: 5 remaining requests allowed... the cap is
        # cumulative across resumed runs, so nothing beyond it is spent
        assert second.requests == 0

        relaxed = toy_plan(max_requests_per_stage=50)
        _, third = self.run(gw, relaxed, heads, checkpoint=ckpt)
        assert third.resumed_from == 5
        assert third.tasks_done == 9
        done_total = first.tasks_done + third.tasks_done
        assert done_total == 14

    def test_checkpoint_seed_mismatch_refuses_to_run(self, tmp_path):
        ckpt = tmp_path / "ckpt.json"
        heads = [head("PersonX活动", "voluntary")]
        gw = ScriptedGateway(responder=lambda r, i: "1. 答复")
        self.run(gw, toy_plan(rng_seed=1), heads, checkpoint=ckpt)
        with pytest.raises(PlanError, match="rng_seed"):
            self.run(gw, toy_plan(rng_seed=2), heads, checkpoint=ckpt)

    def test_checkpoint_roundtrip(self, tmp_path):
        path = tmp_path / "c.json"
        ck = Checkpoint(path)
        ck.rng_seed = 5
        ck.completed = {"b", "a"}
        ck.requests_used = 7
        ck.write()
        again = Checkpoint(path)
        assert again.rng_seed == 5
        assert again.completed == {"a", "b"}
        assert again.requests_used == 7

    def test_no_checkpoint_path_is_ephemeral(self):
        ck = Checkpoint(None)
        ck.write()  # no-op, no error
        assert ck.completed == set()
