import random
from collections import deque
from itertools import permutations as iter_permutations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmplan.core.permutation import Permutation
from mmplan.core.types import CandidateImage, MultimodalGoal, Plan, PlanStep
from mmplan.errors import ProtocolError
from mmplan.ordering import (
    IdentitySequencer,
    OracleSequencer,
    OrderingMetrics,
    RandomSequencer,
    accuracy,
    compute_metrics,
    distance,
    evaluate_ordering,
    kendall_tau,
    lcs_length,
    make_sequencer,
    min_swaps,
    truncate_and_shuffle,
    weighted_min_swaps,
)

# -- independent oracles ------------------------------------------------------


def oracle_inversions(mapping):
    n = len(mapping)
    return sum(1 for i in range(n) for j in range(i + 1, n) if mapping[i] > mapping[j])


def oracle_distance(mapping):
    return sum(abs(v - (i + 1)) for i, v in enumerate(mapping))


def oracle_lcs_dp(mapping):
    a, b = list(mapping), sorted(mapping)
    dp = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            dp[i][j] = dp[i - 1][j - 1] + 1 if a[i - 1] == b[j - 1] else max(dp[i - 1][j], dp[i][j - 1])
    return dp[-1][-1]


def oracle_min_swaps_bfs(mapping):
    start, goal = tuple(mapping), tuple(sorted(mapping))
    if start == goal:
        return 0
    seen = {start}
    queue = deque([(start, 0)])
    while queue:
        state, depth = queue.popleft()
        for i in range(len(state)):
            for j in range(i + 1, len(state)):
                nxt = list(state)
                nxt[i], nxt[j] = nxt[j], nxt[i]
                nxt = tuple(nxt)
                if nxt == goal:
                    return depth + 1
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append((nxt, depth + 1))
    raise AssertionError("unreachable")


# -- spec examples -------------------------------------------------------------


def test_accuracy_examples():
    assert accuracy(Permutation.identity(5)) == 100.0
    assert accuracy(Permutation((2, 1, 3, 4, 5))) == 60.0


def test_distance_examples():
    assert distance(Permutation.identity(4)) == 0.0
    assert distance(Permutation((5, 4, 3, 2, 1))) == 12.0


def test_kendall_tau_examples():
    assert kendall_tau(Permutation.identity(5)) == 1.0
    assert kendall_tau(Permutation((4, 3, 2, 1))) == -1.0
    assert kendall_tau(Permutation((2, 1, 3, 4, 5))) == pytest.approx(0.8)
    with pytest.raises(ValueError):
        kendall_tau(Permutation((1,)))


def test_min_swaps_examples():
    assert min_swaps(Permutation.identity(6)) == 0
    assert min_swaps(Permutation((2, 1, 4, 3))) == 2


def test_weighted_min_swaps_examples():
    assert weighted_min_swaps(Permutation.identity(5)) == 0.0
    assert weighted_min_swaps(Permutation((5, 4, 3, 2, 1))) == 6.0
    assert weighted_min_swaps(Permutation((2, 1, 4, 3))) == 2.0


def test_lcs_examples():
    assert lcs_length(Permutation.identity(5)) == 5
    assert lcs_length(Permutation((3, 1, 2))) == 2
    assert lcs_length(Permutation((5, 4, 3, 2, 1))) == 1


def test_oracle_equivalence_small():
    for n in range(1, 6):
        for mapping in iter_permutations(range(1, n + 1)):
            p = Permutation(mapping)
            assert p.inversions() == oracle_inversions(mapping)
            assert distance(p) == oracle_distance(mapping)
            assert lcs_length(p) == oracle_lcs_dp(mapping)
            assert min_swaps(p) == oracle_min_swaps_bfs(mapping)


perm5 = st.permutations([1, 2, 3, 4, 5])


@settings(max_examples=60, deadline=None)
@given(perm5)
def test_metric_bounds_property(mapping):
    p = Permutation(tuple(mapping))
    m = compute_metrics(p)
    n = len(p)
    assert 0.0 <= m.acc <= 100.0
    assert 0 <= m.ms <= n - 1
    assert 1 <= m.lcs <= n
    assert -1.0 <= m.tau <= 1.0
    assert m.dist >= 0.0
    assert m.wms >= m.ms
    assert (m.tau == 1.0) == p.is_identity()
    assert (m.tau == -1.0) == (p.mapping == tuple(range(n, 0, -1)))
    # purity: recomputation yields the same values
    assert compute_metrics(p) == m


# -- shuffle / evaluate ---------------------------------------------------------


def visual_plan(n, tmp_path=None, write=False):
    steps = []
    for i in range(1, n + 1):
        cand = CandidateImage(k=1, image=f"images/step_{i}_cand_1.png")
        steps.append(PlanStep(index=i, text=f"step {i}", candidates=(cand,), selected=1))
        if write:
            path = tmp_path / cand.image
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(f"img{i}".encode())
    goal = MultimodalGoal(goal_text="Goal?", task_id="t")
    return Plan(goal=goal, steps=tuple(steps))


def test_truncate_to_first_five():
    task = truncate_and_shuffle(visual_plan(7), seed=3)
    assert len(task.images) == 5
    task3 = truncate_and_shuffle(visual_plan(3), seed=3)
    assert len(task3.images) == 3


def test_shuffle_never_identity_and_deterministic():
    for seed in range(40):
        task = truncate_and_shuffle(visual_plan(5), seed=seed)
        assert not task.shuffle.is_identity()
    a = truncate_and_shuffle(visual_plan(5), seed=11)
    b = truncate_and_shuffle(visual_plan(5), seed=11)
    assert a.shuffle == b.shuffle and a.images == b.images


def test_shuffle_requires_two_visual_steps():
    with pytest.raises(ValueError):
        truncate_and_shuffle(visual_plan(1), seed=0)


def test_oracle_sequencer_recovers_gold(tmp_path):
    plan = visual_plan(5, tmp_path, write=True)
    result = evaluate_ordering(plan, OracleSequencer(), seed=4, run_dir=tmp_path)
    assert result.metrics == OrderingMetrics(acc=100.0, dist=0.0, ms=0, wms=0.0, lcs=5, tau=1.0)


def test_identity_sequencer_prediction_equals_shuffle(tmp_path):
    plan = visual_plan(5, tmp_path, write=True)
    for seed in range(10):
        result = evaluate_ordering(plan, IdentitySequencer(), seed=seed, run_dir=tmp_path)
        task = truncate_and_shuffle(plan, seed=seed)
        assert result.predicted == task.shuffle


def test_identity_sequencer_means_near_random(tmp_path):
    plan = visual_plan(5, tmp_path, write=True)
    metrics = [evaluate_ordering(plan, IdentitySequencer(), seed=s, run_dir=tmp_path).metrics
               for s in range(1500)]
    n = len(metrics)
    mean = lambda key: sum(getattr(m, key) for m in metrics) / n
    # conditioned on non-identity shuffles: E[acc]=115/119*20, E[dist]=8*120/119,
    # E[ms]=326/119, E[tau]=-1/119
    assert mean("acc") == pytest.approx(19.33, abs=1.2)
    assert mean("dist") == pytest.approx(8.067, abs=0.35)
    assert mean("ms") == pytest.approx(2.7395, abs=0.08)
    assert mean("tau") == pytest.approx(-0.0084, abs=0.05)


def test_random_sequencer_deterministic(tmp_path):
    plan = visual_plan(4, tmp_path, write=True)
    r1 = evaluate_ordering(plan, RandomSequencer(seed=5), seed=2, run_dir=tmp_path)
    r2 = evaluate_ordering(plan, RandomSequencer(seed=5), seed=2, run_dir=tmp_path)
    assert r1.predicted == r2.predicted


def test_non_permutation_prediction_is_protocol_error(tmp_path):
    plan = visual_plan(4, tmp_path, write=True)

    class Broken:
        name = "broken"

        def predict(self, images, gold_positions):
            return [1, 1, 2, 3]

    with pytest.raises(ProtocolError):
        evaluate_ordering(plan, Broken(), seed=0, run_dir=tmp_path)


def test_make_sequencer_specs():
    assert isinstance(make_sequencer("oracle"), OracleSequencer)
    assert isinstance(make_sequencer("identity"), IdentitySequencer)
    assert isinstance(make_sequencer("random", seed=3), RandomSequencer)
    assert make_sequencer("http://host:1234").base_url == "http://host:1234"
    with pytest.raises(ValueError):
        make_sequencer("nonsense")


def test_http_sequencer_roundtrip(tmp_path):
    plan = visual_plan(3, tmp_path, write=True)

    class FakeSession:
        def post(self, url, json=None, timeout=None):
            assert url.endswith("/v1/sequence")
            assert len(json["images"]) == 3

            class R:
                status_code = 200

                def json(self):
                    return {"order": [1, 2, 3]}

            return R()

    from mmplan.ordering import HttpSequencer

    seq = HttpSequencer("http://fake", session=FakeSession())
    result = evaluate_ordering(plan, seq, seed=9, run_dir=tmp_path)
    assert result.predicted == truncate_and_shuffle(plan, seed=9).shuffle
