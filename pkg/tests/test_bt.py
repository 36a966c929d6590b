import numpy as np
import pytest

from stockbot.bt import (
    Action,
    Blackboard,
    Condition,
    Fallback,
    ReactiveFallback,
    Retry,
    Sequence,
    Status,
    TreeError,
    build_fallback_subtree,
)


class Stub(Action):
    """Scripted leaf: yields statuses from a list, then repeats the last."""

    def __init__(self, name, script):
        super().__init__(name)
        self.script = list(script)
        self.i = 0
        self.ticks = 0

    def _tick(self, bb):
        self.ticks += 1
        s = self.script[min(self.i, len(self.script) - 1)]
        self.i += 1
        return s

    def reset(self):
        self.i = 0


S, F, R = Status.SUCCESS, Status.FAILURE, Status.RUNNING


def tick_until_resolved(node, bb=None, max_ticks=200):
    bb = bb or Blackboard()
    for _ in range(max_ticks):
        status = node.tick(bb)
        if status != Status.RUNNING:
            return status
    raise AssertionError("node never resolved")


def test_sequence_all_success():
    seq = Sequence("seq", [Stub("a", [S]), Stub("b", [S]), Stub("c", [S])])
    assert seq.tick(Blackboard()) == S


def test_sequence_failure_short_circuits():
    c = Stub("c", [S])
    seq = Sequence("seq", [Stub("a", [S]), Stub("b", [F]), c])
    assert seq.tick(Blackboard()) == F
    assert c.ticks == 0


def test_fallback_success_short_circuits():
    b = Stub("b", [S])
    c = Stub("c", [S])
    fb = Fallback("fb", [Stub("a", [F]), b, c])
    assert fb.tick(Blackboard()) == S
    assert b.ticks == 1 and c.ticks == 0


def test_sequence_memory_does_not_retick_elder():
    a = Stub("a", [S])
    b = Stub("b", [R, S])
    seq = Sequence("seq", [a, b])
    bb = Blackboard()
    assert seq.tick(bb) == R
    assert seq.tick(bb) == S
    assert a.ticks == 1  # NOT re-ticked while b was running


def test_reactive_fallback_reevaluates_from_first():
    a = Stub("a", [F, F, S])
    idle = Stub("idle", [R])
    fb = ReactiveFallback("fb", [a, idle])
    bb = Blackboard()
    assert fb.tick(bb) == R
    assert fb.tick(bb) == R
    assert fb.tick(bb) == S
    assert a.ticks == 3  # polled every tick


def test_action_without_body_raises():
    with pytest.raises(TreeError):
        Action("empty").tick(Blackboard())


def test_retry_decorator():
    child = AttemptStub("c", [F, F, S])
    node = Retry("retry", child, n=3)
    assert tick_until_resolved(node) == S
    child2 = AttemptStub("c2", [F, F, F])
    node2 = Retry("retry2", child2, n=3)
    assert tick_until_resolved(node2) == F
    assert child2.attempt == 3


# ---------------------------------------------------------------------------
# Fallback subtree (n attempts per round, m recovery rounds)


def subtree_oracle(outcomes, n, m, with_recovery=True):
    """Tick-trace oracle, independent of the tree implementation: walk the
    scripted attempt outcomes through the n-inner/m-outer rule and return
    (result, attempts, recoveries)."""
    if not with_recovery:
        m = 1
    attempts = 0
    recoveries = 0
    i = 0
    for _ in range(m):
        for _ in range(n):
            outcome = outcomes[min(i, len(outcomes) - 1)]
            i += 1
            attempts += 1
            if outcome:
                return True, attempts, recoveries
        if with_recovery:
            recoveries += 1
    return False, attempts, recoveries


@pytest.mark.parametrize("n,m", [(1, 1), (2, 2), (3, 2)])
def test_fallback_subtree_exhaustion_counts(n, m):
    action = Stub("act", [F])
    recovery = Stub("rec", [S])
    node = build_fallback_subtree(action, recovery=recovery, n=n, m=m)
    events = []

    class World:
        tick = 0

        def emit(self, kind, **data):
            events.append({"kind": kind, **data})

    bb = Blackboard(world=World())
    status = tick_until_resolved(node, bb)
    expected, exp_attempts, exp_recov = subtree_oracle([False] * 100, n, m)
    assert (status == S) == expected
    fails = [e for e in events if e.get("status") == "attempt-failed"]
    recs = [e for e in events if e.get("status") == "recovery"]
    final = [e for e in events if e.get("status") == "failure"]
    assert len(fails) == exp_attempts == n * m
    assert len(recs) == exp_recov == m
    assert final and final[0]["attempts"] == n * m and final[0]["recoveries"] == m
    assert recovery.ticks == m


class AttemptStub(Action):
    """One scripted outcome per activation; reset() starts a new attempt
    without rewinding the script (attempts are world-state driven)."""

    def __init__(self, name, outcomes):
        super().__init__(name)
        self.outcomes = list(outcomes)
        self.attempt = 0

    def _tick(self, bb):
        out = self.outcomes[min(self.attempt, len(self.outcomes) - 1)]
        self.attempt += 1
        return out


@pytest.mark.parametrize(
    "succeed_at,n,m", [(1, 2, 2), (3, 2, 2), (2, 3, 2), (4, 2, 2), (6, 3, 2)]
)
def test_fallback_subtree_success_counts(succeed_at, n, m):
    script = [F] * (succeed_at - 1) + [S]
    action = AttemptStub("act", script)
    recovery = Stub("rec", [S])
    node = build_fallback_subtree(action, recovery=recovery, n=n, m=m)
    events = []

    class World:
        tick = 0

        def emit(self, kind, **data):
            events.append({"kind": kind, **data})

    status = tick_until_resolved(node, Blackboard(world=World()))
    outcomes = [False] * (succeed_at - 1) + [True]
    expected, exp_attempts, exp_recov = subtree_oracle(outcomes, n, m)
    assert (status == S) == expected
    done = [e for e in events if e.get("status") in ("success", "failure")][-1]
    assert done["attempts"] == exp_attempts
    assert done["recoveries"] == exp_recov


def test_fallback_subtree_without_recovery_single_round():
    action = Stub("act", [F])
    node = build_fallback_subtree(action, recovery=None, n=3, m=5)
    status = tick_until_resolved(node)
    assert status == F
    assert action.ticks == 3  # m collapses to 1 without a recovery


def test_fallback_subtree_post_condition_gates_success():
    action = Stub("act", [S, S, S])
    flags = {"ok": False}

    def post(bb):
        return flags["ok"]

    recovery = Stub("rec", [S])
    node = build_fallback_subtree(action, post_condition=post, recovery=recovery, n=2, m=2)
    bb = Blackboard()
    # First round fails on the post-condition despite action success.
    assert node.tick(bb) == R
    flags["ok"] = True
    assert tick_until_resolved(node, bb) == S


def test_fallback_subtree_running_action_passes_through():
    action = Stub("act", [R, R, S])
    node = build_fallback_subtree(action, n=1, m=1)
    bb = Blackboard()
    assert node.tick(bb) == R
    assert node.tick(bb) == R
    assert node.tick(bb) == S
