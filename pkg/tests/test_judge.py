"""Tests for the simulated judge and batch judging."""

import numpy as np
import pytest

from uqroute.judge import (
    JudgePair,
    NullJudge,
    SimJudge,
    batch_judge,
    judge_sim,
    run_batch_judge,
    sim_judge_preset,
)
from uqroute.pref_data import GroundTruth
from uqroute.utils.config import SimJudgeConfig
from uqroute.utils.errors import InvalidInputError
from uqroute.utils.models import JudgeRequest, Verdict

from .conftest import CONTEXT_DIM, ITEM_DIM


@pytest.fixture
def truth():
    return GroundTruth(7, CONTEXT_DIM, ITEM_DIM)


def _pairs(n, seed=0):
    rng = np.random.default_rng(seed)
    return [
        JudgePair(f"pair-{i}", rng.standard_normal(CONTEXT_DIM), rng.standard_normal(ITEM_DIM) * 2,
                  rng.standard_normal(ITEM_DIM) * 2)
        for i in range(n)
    ]


def _deltas(truth, pairs):
    return np.array([truth.delta(p.context, p.response_a, p.response_b) for p in pairs])


# ── Simulated judge ─────────────────────────────────────────────────────────


class TestSimJudge:
    def test_perfect_judge_is_correct(self, truth):
        judge = SimJudge(SimJudgeConfig(accuracy=1.0, tie_threshold=0.0), truth)
        pairs = _pairs(200)
        for pair, delta in zip(pairs, _deltas(truth, pairs)):
            expected = Verdict.A_BETTER if delta > 0 else Verdict.B_BETTER
            assert judge.judge_sync(pair) is expected

    def test_infinite_tie_band(self, truth):
        judge = SimJudge(SimJudgeConfig(tie_threshold=float("inf")), truth)
        assert {judge.judge_sync(p) for p in _pairs(50)} == {Verdict.TIE}

    def test_identical_responses_tie(self, truth):
        judge = SimJudge(SimJudgeConfig(accuracy=1.0, tie_threshold=0.0), truth)
        item = np.ones(ITEM_DIM)
        assert judge.judge_sync(JudgePair("same", np.zeros(CONTEXT_DIM), item, item)) is Verdict.TIE

    def test_tie_band(self, truth):
        judge = SimJudge(SimJudgeConfig(accuracy=1.0, tie_threshold=0.25), truth)
        pairs = _pairs(300, seed=1)
        for pair, delta in zip(pairs, _deltas(truth, pairs)):
            assert (judge.judge_sync(pair) is Verdict.TIE) == (abs(delta) < 0.25)

    @pytest.mark.parametrize("accuracy", [0.95, 0.789])
    def test_accuracy_rate(self, truth, accuracy):
        n = 10_000
        judge = SimJudge(SimJudgeConfig(accuracy=accuracy, tie_threshold=0.0, seed=3), truth)
        pairs = _pairs(n, seed=2)
        correct = [
            judge.judge_sync(p) is (Verdict.A_BETTER if d > 0 else Verdict.B_BETTER)
            for p, d in zip(pairs, _deltas(truth, pairs))
        ]
        se = np.sqrt(accuracy * (1 - accuracy) / n)
        assert abs(np.mean(correct) - accuracy) < 3 * se

    def test_deterministic_per_pair(self, truth):
        config = SimJudgeConfig(accuracy=0.6, seed=4)
        pair = _pairs(1)[0]
        assert judge_sim(config, truth, pair) is judge_sim(config, truth, pair)

    def test_order_independent(self, truth):
        judge = SimJudge(SimJudgeConfig(accuracy=0.7, seed=5), truth)
        pairs = _pairs(40, seed=6)
        forward = [o.verdict for o in run_batch_judge(judge, pairs).outcomes]
        backward = [o.verdict for o in run_batch_judge(judge, pairs[::-1]).outcomes]
        assert forward == backward[::-1]

    def test_empty_id(self, truth):
        judge = SimJudge(SimJudgeConfig(), truth)
        pair = _pairs(1)[0]
        with pytest.raises(InvalidInputError):
            judge.judge_sync(JudgePair("", pair.context, pair.response_a, pair.response_b))

    def test_presets(self):
        assert sim_judge_preset(SimJudgeConfig(), "r1-hard").accuracy == pytest.approx(0.789)
        perfect = sim_judge_preset(SimJudgeConfig(), "perfect")
        assert perfect.accuracy == 1.0
        assert perfect.tie_threshold == 0.0
        with pytest.raises(InvalidInputError):
            sim_judge_preset(SimJudgeConfig(), "oracle")

    def test_simulated_latency(self, truth):
        judge = SimJudge(SimJudgeConfig(latency_ms_mean=50.0), truth)
        pair = _pairs(1)[0]
        assert judge.simulated_latency_ms(pair) > 0
        assert judge.simulated_latency_ms(pair) == judge.simulated_latency_ms(pair)
        assert SimJudge(SimJudgeConfig(), truth).simulated_latency_ms(pair) == 0.0


# ── Wire encoding ───────────────────────────────────────────────────────────


class TestJudgePair:
    def test_request_round_trip(self):
        pair = _pairs(1, seed=9)[0]
        restored = JudgePair.from_request(pair.to_request())
        assert restored.pair_id == pair.pair_id
        np.testing.assert_array_equal(restored.x_pair, pair.x_pair)

    def test_opaque_request_rejected(self):
        request = JudgeRequest(id="x", context="hello", response_a="a", response_b="b")
        with pytest.raises(InvalidInputError):
            JudgePair.from_request(request)

    def test_from_x_pair(self):
        x = np.arange(CONTEXT_DIM + 2 * ITEM_DIM, dtype=float)
        pair = JudgePair.from_x_pair("p", x, CONTEXT_DIM, ITEM_DIM)
        np.testing.assert_array_equal(pair.x_pair, x)


# ── Batching ────────────────────────────────────────────────────────────────


class TestBatchJudge:
    def test_empty_batch(self, truth):
        result = run_batch_judge(SimJudge(SimJudgeConfig(), truth), [])
        assert result.outcomes == []
        assert result.ledger.judge_calls == 0

    def test_ledger_counts(self, truth):
        result = run_batch_judge(SimJudge(SimJudgeConfig(latency_ms_mean=10.0), truth), _pairs(25))
        assert result.ledger.judge_calls == 25
        assert result.ledger.fallbacks == 0
        assert result.ledger.judge_attempts == 25
        assert result.ledger.judge_latency_ms > 0
        assert [o.pair_id for o in result.outcomes] == [f"pair-{i}" for i in range(25)]

    def test_null_judge_reports_failures(self):
        result = run_batch_judge(NullJudge(), _pairs(5))
        assert result.ledger.fallbacks == 5
        assert result.ledger.judge_calls == 0
        assert all(not o.ok and o.error for o in result.outcomes)

    @pytest.mark.asyncio
    async def test_async_batch(self, truth):
        judge = SimJudge(SimJudgeConfig(accuracy=1.0, tie_threshold=0.0), truth)
        pairs = _pairs(10)
        result = await batch_judge(judge, pairs)
        assert [o.verdict for o in result.outcomes] == [judge.judge_sync(p) for p in pairs]
