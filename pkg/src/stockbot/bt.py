"""Behavior-tree engine: Sequence / Fallback / Condition / Action plus the
retry decorators, with memory semantics (Running children resume without
re-ticking earlier siblings) and the n-inner / m-outer fallback subtree
used to wrap every failable leaf.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class Status(enum.Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    RUNNING = "running"


class TreeError(Exception):
    pass


class Blackboard:
    """Shared data channel between nodes.

    Key ownership: each key is written by exactly one node type —
    "job" (task selection), "detection"/"field"/"suction_pose" (scene
    leaves), "reach_traj"/"executed" (planning leaves), "grasp" (grasp
    leaf), "nav_goal" (navigation leaves). The world reference and the
    event log are shared read-mostly infrastructure.
    """

    def __init__(self, world=None, services=None):
        self.world = world
        self.services = services
        self.data: dict = {}
        self.active_path: list = []
        self._path_stack: list = []

    def get(self, key, default=None):
        return self.data.get(key, default)

    def set(self, key, value):
        self.data[key] = value

    def pop(self, key, default=None):
        return self.data.pop(key, default)

    def emit(self, kind: str, **payload):
        if self.world is not None:
            self.world.emit(kind, **payload)


class Node:
    def __init__(self, name: str):
        self.name = name

    def tick(self, bb: Blackboard) -> Status:
        bb._path_stack.append(self.name)
        try:
            status = self._tick(bb)
            if status == Status.RUNNING:
                bb.active_path = list(bb._path_stack)
            return status
        finally:
            bb._path_stack.pop()

    def _tick(self, bb: Blackboard) -> Status:
        raise NotImplementedError

    def reset(self):
        pass


class Condition(Node):
    def __init__(self, name: str, fn):
        super().__init__(name)
        self.fn = fn

    def _tick(self, bb):
        return Status.SUCCESS if self.fn(bb) else Status.FAILURE


class Action(Node):
    """Leaf executing a callable returning a Status each tick."""

    def __init__(self, name: str, fn=None):
        super().__init__(name)
        self.fn = fn

    def _tick(self, bb):
        if self.fn is None:
            raise TreeError(f"action {self.name} has no body")
        return self.fn(bb)


class Composite(Node):
    def __init__(self, name: str, children):
        super().__init__(name)
        for child in children:
            if not isinstance(child, Node):
                raise TreeError(f"{name}: child {child!r} is not a node")
        self.children = list(children)
        self._idx = 0

    def reset(self):
        self._idx = 0
        for child in self.children:
            child.reset()


class Sequence(Composite):
    """Memory sequence: fail/running short-circuits, success requires all;
    a Running child resumes next tick without re-ticking its elders."""

    def _tick(self, bb):
        while self._idx < len(self.children):
            status = self.children[self._idx].tick(bb)
            if status == Status.RUNNING:
                return Status.RUNNING
            if status == Status.FAILURE:
                self.reset()
                return Status.FAILURE
            self._idx += 1
        self.reset()
        return Status.SUCCESS


class Fallback(Composite):
    """Memory fallback: success short-circuits, failure requires all."""

    def _tick(self, bb):
        while self._idx < len(self.children):
            status = self.children[self._idx].tick(bb)
            if status == Status.RUNNING:
                return Status.RUNNING
            if status == Status.SUCCESS:
                self.reset()
                return Status.SUCCESS
            self._idx += 1
        self.reset()
        return Status.FAILURE


class ReactiveFallback(Composite):
    """Fallback re-evaluated from the first child every tick; earlier
    children regain control whenever they stop failing (the task-selection
    root needs this so queued jobs are polled while idle runs)."""

    def _tick(self, bb):
        for child in self.children:
            status = child.tick(bb)
            if status != Status.FAILURE:
                return status
        return Status.FAILURE


class Inverter(Node):
    def __init__(self, name: str, child: Node):
        super().__init__(name)
        self.child = child

    def _tick(self, bb):
        status = self.child.tick(bb)
        if status == Status.SUCCESS:
            return Status.FAILURE
        if status == Status.FAILURE:
            return Status.SUCCESS
        return Status.RUNNING

    def reset(self):
        self.child.reset()


class Retry(Node):
    """Re-tick a failing child up to n times (one attempt per tick round)."""

    def __init__(self, name: str, child: Node, n: int):
        super().__init__(name)
        if n < 1:
            raise TreeError("retry count must be >= 1")
        self.child = child
        self.n = n
        self._attempts = 0

    def _tick(self, bb):
        status = self.child.tick(bb)
        if status == Status.FAILURE:
            self._attempts += 1
            if self._attempts < self.n:
                self.child.reset()
                return Status.RUNNING
            self.reset()
            return Status.FAILURE
        if status == Status.SUCCESS:
            self.reset()
        return status

    def reset(self):
        self._attempts = 0
        self.child.reset()


class Repeat(Node):
    """Tick the child forever (or n rounds), yielding Running between."""

    def __init__(self, name: str, child: Node, n: int | None = None):
        super().__init__(name)
        self.child = child
        self.n = n
        self._done = 0

    def _tick(self, bb):
        status = self.child.tick(bb)
        if status == Status.RUNNING:
            return Status.RUNNING
        self._done += 1
        self.child.reset()
        if self.n is not None and self._done >= self.n:
            self.reset()
            return status
        return Status.RUNNING

    def reset(self):
        self._done = 0
        self.child.reset()


class FallbackSubtree(Node):
    """Attempt-with-recovery wrapper: try the action (checking its
    post-condition) up to n times per round; after a failed round run the
    recovery and start another round, up to m rounds. Total action
    attempts <= n * m, recoveries <= m, Failure only after exhaustion.

    Without a recovery the wrapper degrades to plain n-attempt retry.
    """

    def __init__(self, name: str, action: Node, post_condition=None, recovery: Node | None = None,
                 n: int = 1, m: int = 1):
        super().__init__(name)
        if n < 1 or m < 1:
            raise TreeError("n and m must be >= 1")
        self.action = action
        self.post_condition = post_condition
        self.recovery = recovery
        self.n = n
        self.m = 1 if recovery is None else m
        self._attempts_in_round = 0
        self._recoveries = 0
        self._in_recovery = False
        self.total_attempts = 0

    def reset(self):
        self._attempts_in_round = 0
        self._recoveries = 0
        self._in_recovery = False
        self.total_attempts = 0
        self.action.reset()
        if self.recovery is not None:
            self.recovery.reset()

    def _tick(self, bb):
        if self._in_recovery:
            status = self.recovery.tick(bb)
            if status == Status.RUNNING:
                return Status.RUNNING
            # Recovery outcome does not gate the next round.
            self._in_recovery = False
            self._attempts_in_round = 0
            if self._recoveries >= self.m:
                result = Status.FAILURE
                bb.emit("bt", node=self.name, status="failure",
                        attempts=self.total_attempts, recoveries=self._recoveries)
                self.reset()
                return result
            return Status.RUNNING

        status = self.action.tick(bb)
        if status == Status.RUNNING:
            return Status.RUNNING
        if status == Status.SUCCESS and self.post_condition is not None:
            if not self.post_condition(bb):
                status = Status.FAILURE
        self.total_attempts += 1
        if status == Status.SUCCESS:
            bb.emit("bt", node=self.name, status="success",
                    attempts=self.total_attempts, recoveries=self._recoveries)
            self.reset()
            return Status.SUCCESS

        self._attempts_in_round += 1
        bb.emit("bt", node=self.name, status="attempt-failed",
                attempt=self.total_attempts, error=bb.pop("last_error", ""))
        self.action.reset()
        if self._attempts_in_round < self.n:
            return Status.RUNNING
        # Round exhausted: run recovery (if any), even before the final
        # failure — the recovery count bookkeeping matches m exactly.
        if self.recovery is not None:
            self._recoveries += 1
            bb.emit("bt", node=self.name, status="recovery", recovery=self._recoveries)
            self._in_recovery = True
            return Status.RUNNING
        result = Status.FAILURE
        bb.emit("bt", node=self.name, status="failure",
                attempts=self.total_attempts, recoveries=self._recoveries)
        self.reset()
        return result


def build_fallback_subtree(action: Node, post_condition=None, recovery: Node | None = None,
                           n: int = 1, m: int = 1, name: str | None = None) -> FallbackSubtree:
    return FallbackSubtree(name or f"fallback[{action.name}]", action, post_condition, recovery, n, m)
