"""Domain types for callbacks, groups, nodes and the callback DAG.

Also hosts the static checks that decide whether a system can be run with
one dedicated thread per callback: scheduling attribute bounds, group size,
and the non-reentrancy condition (minimum inter-arrival time must exceed the
declared worst-case execution time).
"""
from __future__ import annotations

import enum
import heapq
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Union

MS = 1_000_000


class ModelError(Exception):
    """Base class for malformed system descriptions."""


class DescriptionError(ModelError):
    """The description references something that does not exist."""


class CycleError(ModelError):
    def __init__(self, cycle: list[str]):
        self.cycle = cycle
        super().__init__("callback graph has a cycle: " + " -> ".join(cycle + cycle[:1]))


class DanglingTopicError(ModelError):
    def __init__(self, callback_id: str, topic: str):
        self.callback_id = callback_id
        self.topic = topic
        super().__init__(f"subscription {callback_id} listens on {topic!r} but nothing publishes it")


class DanglingTopicWarning(UserWarning):
    pass


class Policy(str, enum.Enum):
    DEADLINE = "deadline"
    FIFO_RT = "fifo_rt"
    FAIR = "fair"


@dataclass(frozen=True)
class SchedAttr:
    policy: Policy
    runtime_ns: int = 0
    deadline_ns: int = 0
    period_ns: int = 0
    priority: int = 0
    nice: int = 0
    affinity: frozenset[int] = frozenset()

    @classmethod
    def deadline(cls, runtime_ns: int, deadline_ns: int, period_ns: int, affinity=()) -> "SchedAttr":
        return cls(Policy.DEADLINE, runtime_ns=runtime_ns, deadline_ns=deadline_ns,
                   period_ns=period_ns, affinity=frozenset(affinity))

    @classmethod
    def fifo(cls, priority: int, affinity=()) -> "SchedAttr":
        return cls(Policy.FIFO_RT, priority=priority, affinity=frozenset(affinity))

    @classmethod
    def fair(cls, nice: int = 0, affinity=()) -> "SchedAttr":
        return cls(Policy.FAIR, nice=nice, affinity=frozenset(affinity))

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"policy": self.policy.value}
        if self.policy is Policy.DEADLINE:
            d.update(runtime_ns=self.runtime_ns, deadline_ns=self.deadline_ns, period_ns=self.period_ns)
        elif self.policy is Policy.FIFO_RT:
            d["priority"] = self.priority
        else:
            d["nice"] = self.nice
        d["affinity"] = sorted(self.affinity)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SchedAttr":
        try:
            policy = Policy(d["policy"])
        except (KeyError, ValueError) as exc:
            raise DescriptionError(f"bad scheduling policy in {d!r}") from exc
        return cls(
            policy,
            runtime_ns=int(d.get("runtime_ns", 0)),
            deadline_ns=int(d.get("deadline_ns", 0)),
            period_ns=int(d.get("period_ns", 0)),
            priority=int(d.get("priority", 0)),
            nice=int(d.get("nice", 0)),
            affinity=frozenset(int(c) for c in d.get("affinity", ())),
        )


@dataclass(frozen=True)
class Violation:
    field: str
    message: str

    def __str__(self) -> str:
        return self.message


def validate_sched_attr(attr: SchedAttr, core_count: Optional[int] = None) -> list[Violation]:
    """Return every bound the attribute breaks; an empty list means OK.

    ``core_count`` is only known once an enforcement target has been probed;
    affinity indices are checked against it when given.
    """
    out: list[Violation] = []
    if attr.policy is Policy.DEADLINE:
        if attr.runtime_ns <= 0:
            out.append(Violation("runtime_ns", "runtime_ns must be > 0"))
        if attr.runtime_ns > attr.deadline_ns:
            out.append(Violation("runtime_ns", "runtime_ns > deadline_ns"))
        if attr.deadline_ns > attr.period_ns:
            out.append(Violation("deadline_ns", "deadline_ns > period_ns"))
    elif attr.policy is Policy.FIFO_RT:
        if attr.priority < 1:
            out.append(Violation("priority", "priority below 1"))
        elif attr.priority > 99:
            out.append(Violation("priority", "priority above 99"))
    elif attr.policy is Policy.FAIR:
        if attr.nice < -20:
            out.append(Violation("nice", "nice below -20"))
        elif attr.nice > 19:
            out.append(Violation("nice", "nice above 19"))
    for core in sorted(attr.affinity):
        if core < 0:
            out.append(Violation("affinity", f"affinity core {core} is negative"))
        elif core_count is not None and core >= core_count:
            out.append(Violation("affinity", f"affinity core {core} >= core count {core_count}"))
    return out


@dataclass(frozen=True)
class Timer:
    period_ns: int
    # First expiry is start + offset_ns + period_ns.
    offset_ns: int = 0


@dataclass(frozen=True)
class Subscription:
    topic: str


@dataclass(frozen=True)
class BusyWork:
    """Benchmark handler: spin for ``duration_ns`` then publish ``payload_bytes``."""

    duration_ns: int = 0
    payload_bytes: int = 8


# A user handler receives the delivered message (None for timers) and may
# return a payload to publish on the callback's declared topics.
Handler = Union[BusyWork, Callable[[Any], Optional[bytes]]]


@dataclass
class CallbackSpec:
    id: str
    kind: Union[Timer, Subscription]
    group: str
    handler: Handler = field(default_factory=BusyWork)
    sched: Optional[SchedAttr] = None
    wcet_hint_ns: Optional[int] = None

    @property
    def is_timer(self) -> bool:
        return isinstance(self.kind, Timer)


@dataclass
class CallbackGroup:
    id: str
    members: list[str] = field(default_factory=list)
    mutually_exclusive: bool = True


@dataclass
class NodeSpec:
    id: str
    callbacks: list[CallbackSpec] = field(default_factory=list)
    # (callback id, topic name) pairs
    publications: list[tuple[str, str]] = field(default_factory=list)

    def topics_published_by(self, callback_id: str) -> list[str]:
        return [t for c, t in self.publications if c == callback_id]


@dataclass
class CallbackGraph:
    vertices: list[str]
    edges: list[tuple[str, str]]
    topo_order: list[str]
    callbacks: dict[str, CallbackSpec] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def predecessors(self, v: str) -> list[str]:
        return [a for a, b in self.edges if b == v]

    def topo_index(self) -> dict[str, int]:
        return {v: i for i, v in enumerate(self.topo_order)}


def iter_callbacks(nodes: Iterable[NodeSpec]) -> Iterable[CallbackSpec]:
    for node in nodes:
        yield from node.callbacks


def groups_of(nodes: Iterable[NodeSpec]) -> dict[str, CallbackGroup]:
    """Group membership as implied by each callback's ``group`` field, in registration order."""
    groups: dict[str, CallbackGroup] = {}
    for cb in iter_callbacks(nodes):
        groups.setdefault(cb.group, CallbackGroup(cb.group)).members.append(cb.id)
    return groups


def build_graph(nodes: list[NodeSpec], strict_topics: bool = False) -> CallbackGraph:
    """Infer publisher -> subscriber edges from topic relations and order them.

    Raises CycleError on cyclic input. A subscription nobody publishes is a
    warning unless ``strict_topics`` is set.
    """
    node_ids: set[str] = set()
    callbacks: dict[str, CallbackSpec] = {}
    for node in nodes:
        if node.id in node_ids:
            raise DescriptionError(f"duplicate node id {node.id!r}")
        node_ids.add(node.id)
        for cb in node.callbacks:
            if cb.id in callbacks:
                raise DescriptionError(f"duplicate callback id {cb.id!r}")
            if isinstance(cb.kind, Timer) and cb.kind.period_ns <= 0:
                raise DescriptionError(f"timer {cb.id!r} period must be > 0")
            callbacks[cb.id] = cb
        for cb_id, _ in node.publications:
            if cb_id not in {c.id for c in node.callbacks}:
                raise DescriptionError(f"node {node.id!r} publication names unknown callback {cb_id!r}")

    publishers: dict[str, list[str]] = {}
    for node in nodes:
        for cb_id, topic in node.publications:
            publishers.setdefault(topic, []).append(cb_id)

    vertices = list(callbacks)
    edges: list[tuple[str, str]] = []
    seen: set[tuple[str, str]] = set()
    notes: list[str] = []
    for cb in callbacks.values():
        if not isinstance(cb.kind, Subscription):
            continue
        pubs = publishers.get(cb.kind.topic, [])
        if not pubs:
            err = DanglingTopicError(cb.id, cb.kind.topic)
            if strict_topics:
                raise err
            warnings.warn(str(err), DanglingTopicWarning, stacklevel=2)
            notes.append(str(err))
        for p in pubs:
            if (p, cb.id) not in seen:
                seen.add((p, cb.id))
                edges.append((p, cb.id))

    order = _topo_sort(vertices, edges)
    return CallbackGraph(vertices, edges, order, callbacks, notes)


def _topo_sort(vertices: list[str], edges: list[tuple[str, str]]) -> list[str]:
    # Kahn's algorithm; ties broken by registration index so output is stable.
    index = {v: i for i, v in enumerate(vertices)}
    succ: dict[str, list[str]] = {v: [] for v in vertices}
    indeg = {v: 0 for v in vertices}
    for a, b in edges:
        succ[a].append(b)
        indeg[b] += 1
    heap = [(index[v], v) for v in vertices if indeg[v] == 0]
    heapq.heapify(heap)
    order: list[str] = []
    while heap:
        _, v = heapq.heappop(heap)
        order.append(v)
        for w in succ[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(heap, (index[w], w))
    if len(order) != len(vertices):
        raise CycleError(_find_cycle(vertices, succ))
    return order


def _find_cycle(vertices: list[str], succ: dict[str, list[str]]) -> list[str]:
    color = {v: 0 for v in vertices}
    stack: list[str] = []

    def visit(v: str) -> Optional[list[str]]:
        color[v] = 1
        stack.append(v)
        for w in succ[v]:
            if color[w] == 1:
                return stack[stack.index(w):]
            if color[w] == 0:
                found = visit(w)
                if found:
                    return found
        color[v] = 2
        stack.pop()
        return None

    for v in vertices:
        if color[v] == 0:
            found = visit(v)
            if found:
                return list(found)
    return []


@dataclass(frozen=True)
class ConstraintViolation:
    kind: str  # "group-size" or "reentrancy"
    subject: str
    message: str

    def __str__(self) -> str:
        return self.message


def min_inter_arrival(graph: CallbackGraph) -> dict[str, Optional[int]]:
    """Minimum inter-arrival time per callback.

    Timers use their period; every other callback inherits the smallest
    period among its upstream timers. None when no timer feeds the callback.
    """
    out: dict[str, Optional[int]] = {}
    for v in graph.topo_order:
        cb = graph.callbacks.get(v)
        if cb is not None and isinstance(cb.kind, Timer):
            out[v] = cb.kind.period_ns
            continue
        upstream = [out[p] for p in graph.predecessors(v) if out.get(p) is not None]
        out[v] = min(upstream) if upstream else None
    return out


def validate_isolation_constraints(nodes: list[NodeSpec], graph: CallbackGraph) -> list[ConstraintViolation]:
    report: list[ConstraintViolation] = []
    for g in groups_of(nodes).values():
        if len(g.members) > 1:
            report.append(ConstraintViolation(
                "group-size", g.id, f"group {g.id} has {len(g.members)} members"))
    arrival = min_inter_arrival(graph)
    for cb in iter_callbacks(nodes):
        gap = arrival.get(cb.id)
        if cb.wcet_hint_ns is None or gap is None:
            continue
        if cb.wcet_hint_ns >= gap:
            report.append(ConstraintViolation(
                "reentrancy", cb.id,
                f"callback {cb.id}: possible reentrancy/overrun "
                f"(wcet_hint {cb.wcet_hint_ns} ns >= min inter-arrival {gap} ns)"))
    return report


# --- JSON system description -------------------------------------------------

def _callback_from_dict(d: dict[str, Any]) -> CallbackSpec:
    try:
        kind_name = d["kind"]
        if kind_name == "timer":
            kind: Union[Timer, Subscription] = Timer(int(d["period_ns"]), int(d.get("offset_ns", 0)))
        elif kind_name == "subscription":
            kind = Subscription(str(d["topic"]))
        else:
            raise DescriptionError(f"callback {d.get('id')!r}: unknown kind {kind_name!r}")
        handler = d.get("handler", {})
        return CallbackSpec(
            id=str(d["id"]),
            kind=kind,
            group=str(d["group"]),
            handler=BusyWork(int(handler.get("busywork_ns", 0)), int(handler.get("payload_bytes", 8))),
            sched=SchedAttr.from_dict(d["sched"]) if d.get("sched") else None,
            wcet_hint_ns=int(d["wcet_hint_ns"]) if d.get("wcet_hint_ns") is not None else None,
        )
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise DescriptionError(f"malformed callback entry {d!r}: {exc}") from exc


def _callback_to_dict(cb: CallbackSpec) -> dict[str, Any]:
    d: dict[str, Any] = {"id": cb.id, "group": cb.group}
    if isinstance(cb.kind, Timer):
        d.update(kind="timer", period_ns=cb.kind.period_ns)
        if cb.kind.offset_ns:
            d["offset_ns"] = cb.kind.offset_ns
    else:
        d.update(kind="subscription", topic=cb.kind.topic)
    if isinstance(cb.handler, BusyWork):
        d["handler"] = {"busywork_ns": cb.handler.duration_ns, "payload_bytes": cb.handler.payload_bytes}
    if cb.sched is not None:
        d["sched"] = cb.sched.to_dict()
    if cb.wcet_hint_ns is not None:
        d["wcet_hint_ns"] = cb.wcet_hint_ns
    return d


def system_from_dict(doc: Any) -> list[NodeSpec]:
    """Parse a system description (keys ``nodes``, ``topics``, ``groups``).

    Every subscription and publication topic must be declared in ``topics``
    and every callback group in ``groups``. A group entry may list its
    ``members``; if present it has to agree with the callbacks' ``group``
    fields.
    """
    if not isinstance(doc, dict):
        raise DescriptionError("system description must be a JSON object")
    for key in ("nodes", "topics", "groups"):
        if key not in doc:
            raise DescriptionError(f"missing top-level key {key!r}")
    topics = {str(t) for t in doc["topics"]}
    declared_groups: dict[str, Optional[list[str]]] = {}
    for g in doc["groups"]:
        if isinstance(g, str):
            declared_groups[g] = None
        else:
            try:
                declared_groups[str(g["id"])] = [str(m) for m in g["members"]] if "members" in g else None
            except (KeyError, TypeError) as exc:
                raise DescriptionError(f"malformed group entry {g!r}") from exc

    nodes: list[NodeSpec] = []
    for nd in doc["nodes"]:
        try:
            node = NodeSpec(
                id=str(nd["id"]),
                callbacks=[_callback_from_dict(c) for c in nd.get("callbacks", [])],
                publications=[(str(p["callback"]), str(p["topic"])) for p in nd.get("publications", [])],
            )
        except (KeyError, TypeError) as exc:
            raise DescriptionError(f"malformed node entry: {exc}") from exc
        for cb in node.callbacks:
            if cb.group not in declared_groups:
                raise DescriptionError(f"callback {cb.id!r} references undeclared group {cb.group!r}")
            if isinstance(cb.kind, Subscription) and cb.kind.topic not in topics:
                raise DescriptionError(f"callback {cb.id!r} subscribes to undeclared topic {cb.kind.topic!r}")
        for cb_id, topic in node.publications:
            if topic not in topics:
                raise DescriptionError(f"node {node.id!r} publishes undeclared topic {topic!r}")
        nodes.append(node)

    actual = groups_of(nodes)
    for gid, members in declared_groups.items():
        if members is not None and sorted(members) != sorted(actual.get(gid, CallbackGroup(gid)).members):
            raise DescriptionError(f"group {gid!r} members {members} disagree with callback assignments")
    return nodes


def system_to_dict(nodes: list[NodeSpec]) -> dict[str, Any]:
    topics: list[str] = []
    for node in nodes:
        for cb in node.callbacks:
            if isinstance(cb.kind, Subscription) and cb.kind.topic not in topics:
                topics.append(cb.kind.topic)
        for _, t in node.publications:
            if t not in topics:
                topics.append(t)
    return {
        "topics": topics,
        "groups": [{"id": g.id, "members": g.members} for g in groups_of(nodes).values()],
        "nodes": [
            {
                "id": n.id,
                "callbacks": [_callback_to_dict(c) for c in n.callbacks],
                "publications": [{"callback": c, "topic": t} for c, t in n.publications],
            }
            for n in nodes
        ],
    }


def load_system(path: Union[str, Path]) -> list[NodeSpec]:
    """Read a JSON system description. OSError and DescriptionError propagate."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DescriptionError(f"{path}: invalid JSON: {exc}") from exc
    return system_from_dict(doc)


def benchmark_pair(n: int, period_ns: int = 10 * MS, *, payload_bytes: int = 8, busywork_ns: int = 0,
                   staggered: bool = True, sched: Optional[dict[str, SchedAttr]] = None) -> list[NodeSpec]:
    """The publisher/subscriber node pair used by the overhead experiments.

    ``n`` timers on the publisher each feed their own topic, consumed by one
    subscription each on the subscriber node; every callback sits in its own
    group. With ``staggered`` the timer phases are spread evenly over one
    period, mirroring timers created one after another.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    sched = sched or {}
    pub = NodeSpec("publisher")
    sub = NodeSpec("subscriber")
    for i in range(n):
        topic = f"/topic_{i}"
        t_id, s_id = f"timer_{i}", f"sub_{i}"
        offset = (i * period_ns) // n if staggered else 0
        pub.callbacks.append(CallbackSpec(t_id, Timer(period_ns, offset), f"g_{t_id}",
                                          BusyWork(busywork_ns, payload_bytes), sched.get(t_id)))
        pub.publications.append((t_id, topic))
        sub.callbacks.append(CallbackSpec(s_id, Subscription(topic), f"g_{s_id}",
                                          BusyWork(busywork_ns, payload_bytes), sched.get(s_id)))
    return [pub, sub]
