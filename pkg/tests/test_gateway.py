import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ckdistill.errors import ConfigError, CostCapError, RequestError, TransportError
from ckdistill.gateway import (
    CompletionRequest,
    CompletionResponse,
    GatewayConfig,
    RateLimiter,
    RecordingGateway,
    ReplayGateway,
    ScriptedGateway,
    SyntheticGateway,
    VirtualClock,
)


def req(prompt: str = "你好", model: str = "m", temp: float = 0.7) -> CompletionRequest:
    return CompletionRequest.user(model, prompt, temp)


class TestRequest:
    def test_digest_is_content_addressed(self):
        assert req("a").digest() == req("a").digest()
        assert req("a").digest() != req("b").digest()
        assert req("a", temp=0.0).digest() != req("a", temp=0.7).digest()
        assert req("a", model="x").digest() != req("a", model="y").digest()

    def test_body_shape(self):
        body = req("写一句话", model="mm", temp=0.3).body()
        assert body["model"] == "mm"
        assert body["temperature"] == 0.3
        assert body["messages"] == [{"role": "user", "content": "写一句话"}]

    def test_empty_text_requires_refused(self):
        with pytest.raises(ConfigError):
            CompletionResponse(text="", finish_reason="complete")
        CompletionResponse(text="", finish_reason="refused")  # allowed


class TestRateLimiter:
    def test_blocks_at_limit_until_window_passes(self):
        clock = VirtualClock()
        rl = RateLimiter(limit=3, window=60.0, clock=clock)
        stamps = [rl.acquire() for _ in range(4)]
        assert stamps[:3] == [0.0, 0.0, 0.0]
        assert stamps[3] == pytest.approx(60.0)

    @settings(deadline=None, max_examples=30)
    @given(
        limit=st.integers(min_value=1, max_value=8),
        n=st.integers(min_value=1, max_value=60),
    )
    def test_any_window_holds_at_most_limit(self, limit, n):
        """The defining property: no 60-second span ever contains more
        than `limit` grants, which a bursty token bucket would violate."""
        clock = VirtualClock()
        rl = RateLimiter(limit=limit, window=60.0, clock=clock)
        stamps = [rl.acquire() for _ in range(n)]
        assert stamps == sorted(stamps)
        for i, t0 in enumerate(stamps):
            in_window = [t for t in stamps[i:] if t - t0 < 60.0]
            assert len(in_window) <= limit

    def test_thread_safety_under_contention(self):
        clock = VirtualClock()
        rl = RateLimiter(limit=5, window=60.0, clock=clock)
        stamps = []
        lock = threading.Lock()

        def grab():
            s = rl.acquire()
            with lock:
                stamps.append(s)

        threads = [threading.Thread(target=grab) for _ in range(20)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(stamps) == 20
        for t0 in stamps:
            assert sum(1 for t in stamps if t0 <= t < t0 + 60.0) <= 5


class TestRetriesAndCaps:
    def test_transient_then_success(self):
        gw = ScriptedGateway([429, 503, "好的"], max_retries=3)
        assert gw.complete(req()).text == "好的"
        assert len(gw.calls) == 3

    def test_retries_exhausted_raises_transport_error(self):
        gw = ScriptedGateway([500, 500, 500], max_retries=2)
        with pytest.raises(TransportError) as exc:
            gw.complete(req())
        assert exc.value.last_status == 500
        assert len(gw.calls) == 3  # initial try + 2 retries

    def test_client_error_is_not_retried(self):
        gw = ScriptedGateway([404], max_retries=5)
        with pytest.raises(RequestError) as exc:
            gw.complete(req())
        assert exc.value.status == 404
        assert len(gw.calls) == 1

    def test_cost_cap_counts_attempts(self):
        gw = ScriptedGateway(["a", "b", "c"], request_cap=2)
        gw.complete(req("1"))
        gw.complete(req("2"))
        with pytest.raises(CostCapError, match="2"):
            gw.complete(req("3"))

    def test_backoff_is_bounded_by_cap(self):
        clock = VirtualClock()
        gw = ScriptedGateway(
            [429] * 6 + ["ok"],
            max_retries=6,
            backoff_base=0.5,
            backoff_cap=4.0,
            clock=clock,
            jitter_seed=3,
        )
        assert gw.complete(req()).text == "ok"
        # six sleeps, each within (0, cap]; total can never exceed 6 * cap
        assert 0 < clock.monotonic() <= 6 * 4.0

    def test_batch_preserves_order_and_isolates_failures(self):
        def responder(r: CompletionRequest, i: int):
            if "bad" in r.text:
                return 400
            return f"回答{r.text}"

        gw = ScriptedGateway(responder=responder, max_concurrent=4)
        results = gw.complete_batch([req("0"), req("bad"), req("2")])
        assert [r.index for r in results] == [0, 1, 2]
        assert results[0].response.text == "回答0"
        assert not results[1].ok and isinstance(results[1].error, RequestError)
        assert results[2].response.text == "回答2"

    def test_batch_respects_concurrency_bound(self):
        gate = threading.Semaphore(0)

        def responder(r, i):
            return "x"

        gw = ScriptedGateway(responder=responder, max_concurrent=3)
        gw.complete_batch([req(str(i)) for i in range(12)])
        assert gw.in_flight_peak <= 3

    def test_gateway_config_bounds(self):
        with pytest.raises(ConfigError):
            GatewayConfig(max_concurrent=0)
        with pytest.raises(ConfigError):
            GatewayConfig(backoff_base=1.0, backoff_cap=0.5)
        with pytest.raises(ConfigError):
            GatewayConfig(request_cap=0)


class TestSyntheticGateway:
    def test_same_request_same_reply(self):
        a = SyntheticGateway(seed=1).complete(req("请再写出10个句子"))
        b = SyntheticGateway(seed=1).complete(req("请再写出10个句子"))
        assert a.text == b.text

    def test_seed_changes_reply(self):
        a = SyntheticGateway(seed=1).complete(req("请再写出10个句子"))
        b = SyntheticGateway(seed=2).complete(req("请再写出10个句子"))
        assert a.text != b.text

    def test_honors_requested_count(self):
        resp = SyntheticGateway(seed=0).complete(req("请再写出7个这样的句子"))
        assert len(resp.text.splitlines()) == 7

    def test_judge_prompts_get_verdicts(self):
        gw = SyntheticGateway(seed=0)
        replies = {
            gw.complete(req(f"这句话{i}是否合理？")).text for i in range(40)
        }
        assert replies <= {"是", "否"}
        assert len(replies) == 2  # invalid_rate 0.3 hits both sides over 40 draws


class TestRecordReplay:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "transcript.jsonl"
        inner = SyntheticGateway(seed=5)
        rec = RecordingGateway(inner, path)
        reqs = [req(f"请再写出3个句子 变体{i}") for i in range(5)]
        recorded = [rec.complete(r).text for r in reqs]
        rec.close()

        rep = ReplayGateway(path)
        replayed = [rep.complete(r).text for r in reqs]
        assert replayed == recorded

    def test_duplicate_digests_replay_fifo(self, tmp_path):
        path = tmp_path / "transcript.jsonl"
        gw = ScriptedGateway(["第一", "第二"])
        rec = RecordingGateway(gw, path)
        same = req("同一个请求")
        first, second = rec.complete(same).text, rec.complete(same).text
        rec.close()
        rep = ReplayGateway(path)
        assert [rep.complete(same).text, rep.complete(same).text] == [first, second]

    def test_replay_miss_is_a_transport_error(self, tmp_path):
        path = tmp_path / "transcript.jsonl"
        RecordingGateway(ScriptedGateway(["x"]), path).complete(req("已录制"))
        rep = ReplayGateway(path)
        with pytest.raises(TransportError, match="transcript"):
            rep.complete(req("没录制过"))

    def test_batch_recording_is_input_ordered(self, tmp_path):
        path = tmp_path / "transcript.jsonl"
        rec = RecordingGateway(SyntheticGateway(seed=9, max_concurrent=4), path)
        reqs = [req(f"请再写出2个句子 任务{i}") for i in range(8)]
        rec.complete_batch(reqs)
        rec.close()
        digests = [
            __import__("json").loads(line)["digest"]
            for line in path.read_text().splitlines()
        ]
        assert digests == [r.digest() for r in reqs]

    def test_missing_transcript_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            ReplayGateway(tmp_path / "absent.jsonl")
