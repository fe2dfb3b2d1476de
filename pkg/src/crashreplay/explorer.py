"""UI transition graph exploration and app-knowledge synthesis.

When replay gets stuck on a page, the explorer systematically triggers each
interactable element of that page (recursively to a configured depth),
recording every (state, action, resulting state) edge.  A language model
then summarizes what each element leads to and what each discovered screen
does; those tables re-ground the replay prompts.
"""

from __future__ import annotations

import json
import random
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .device import (
    Device,
    NoMatchError,
    UiState,
    encode_state_text,
    feature_for_element,
    interactable_elements,
    resolve_feature,
)
from .gateway import ActionCommand, GatewayError, LlmGateway, load_template

#: Text typed into editable fields while probing; the value is arbitrary.
EXPLORE_FILL_TEXT = "test"


class ExplorerError(Exception):
    pass


class ElementAbsent(ExplorerError):
    pass


@dataclass(frozen=True)
class UtgEdge:
    from_state: str
    action: ActionCommand
    to_state: str


@dataclass
class UtgGraph:
    """Directed graph of screen fingerprints connected by executed actions."""

    origin: str
    nodes: dict[str, UiState]
    edges: list[UtgEdge]
    truncated: bool = False
    actions_used: int = 0

    def out_edges(self, state_id: str) -> list[UtgEdge]:
        return [e for e in self.edges if e.from_state == state_id]

    def validate(self) -> None:
        if self.origin not in self.nodes:
            raise ExplorerError("origin missing from nodes")
        seen_actions: set[tuple[str, str]] = set()
        for edge in self.edges:
            if edge.from_state not in self.nodes or edge.to_state not in self.nodes:
                raise ExplorerError(f"edge {edge} has an endpoint outside the node set")
            key = (edge.from_state, json.dumps(edge.action.to_dict(), sort_keys=True))
            if key in seen_actions:
                raise ExplorerError(f"parallel edges from {edge.from_state} share action {edge.action}")
            seen_actions.add(key)

    def bfs_order(self) -> list[str]:
        """Node ids in breadth-first order from the origin, ties by state id."""
        order = [self.origin]
        seen = {self.origin}
        queue = deque([self.origin])
        while queue:
            current = queue.popleft()
            neighbours = sorted({e.to_state for e in self.out_edges(current)} - seen)
            for n in neighbours:
                seen.add(n)
                order.append(n)
                queue.append(n)
        return order

    def bfs_parents(self) -> dict[str, tuple[str, ActionCommand] | None]:
        """Parent pointers of the BFS tree; used to reconstruct paths from the origin."""
        parents: dict[str, tuple[str, ActionCommand] | None] = {self.origin: None}
        queue = deque([self.origin])
        while queue:
            current = queue.popleft()
            for edge in self.out_edges(current):
                if edge.to_state not in parents:
                    parents[edge.to_state] = (current, edge.action)
                    queue.append(edge.to_state)
        return parents

    def path_from_origin(self, state_id: str) -> tuple[list[str], list[str]]:
        """(state ids, clicked features) along the BFS path origin -> state."""
        parents = self.bfs_parents()
        if state_id not in parents:
            raise ExplorerError(f"state {state_id} not reachable from origin")
        states: list[str] = [state_id]
        features: list[str] = []
        current = state_id
        while parents[current] is not None:
            parent, action = parents[current]  # type: ignore[misc]
            features.append(action.feature or action.action)
            states.append(parent)
            current = parent
        states.reverse()
        features.reverse()
        return states, features

    def to_dict(self) -> dict:
        return {
            "origin": self.origin,
            "nodes": {sid: state.to_dict() for sid, state in self.nodes.items()},
            "edges": [
                {"from": e.from_state, "action": e.action.to_dict(), "to": e.to_state}
                for e in self.edges
            ],
            "truncated": self.truncated,
            "actions_used": self.actions_used,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "UtgGraph":
        from .gateway import parse_action_sequence

        edges = []
        for entry in raw["edges"]:
            (action,) = parse_action_sequence(json.dumps([entry["action"]]))
            edges.append(UtgEdge(entry["from"], action, entry["to"]))
        graph = cls(
            origin=raw["origin"],
            nodes={sid: UiState.from_dict(body) for sid, body in raw["nodes"].items()},
            edges=edges,
            truncated=bool(raw.get("truncated", False)),
            actions_used=int(raw.get("actions_used", 0)),
        )
        graph.validate()
        return graph


class _BudgetDone(Exception):
    pass


def _probe_commands(state: UiState) -> list[ActionCommand]:
    """Probe commands for a screen: one per interactable element and verb."""
    probes: list[ActionCommand] = []
    seen: set[tuple] = set()
    for element in interactable_elements(state):
        feature = feature_for_element(element)
        if feature is None:
            continue
        candidates = []
        if element.clickable:
            candidates.append(ActionCommand(action="click", feature=feature))
        if element.long_clickable:
            candidates.append(ActionCommand(action="long_click", feature=feature))
        if element.editable:
            candidates.append(
                ActionCommand(action="set_text", feature=feature, input_text=EXPLORE_FILL_TEXT)
            )
        if element.scrollable:
            candidates.append(ActionCommand(action="scroll", direction="down"))
        for cmd in candidates:
            key = (cmd.action, cmd.feature, cmd.direction)
            if key not in seen:
                seen.add(key)
                probes.append(cmd)
    return probes


def explore(
    device: Device,
    depth: int = 1,
    action_budget: int = 60,
    origin_path: tuple[ActionCommand, ...] = (),
    shuffle_seed: int | None = None,
) -> UtgGraph:
    """Build the transition graph around the device's current screen.

    ``origin_path`` is the recorded command path from app start to the
    current screen; the explorer restores with restart + that path before
    each probe that left the page.  Never issues more than ``action_budget``
    device commands; a graph cut short by the budget is flagged truncated.

    Probing is systematic (element position order) so runs are reproducible;
    ``shuffle_seed`` switches to a seeded random probe order instead.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if action_budget < 1:
        raise ValueError("action_budget must be >= 1")
    rng = random.Random(shuffle_seed) if shuffle_seed is not None else None

    origin = device.capture_state()
    graph = UtgGraph(origin=origin.state_id, nodes={origin.state_id: origin}, edges=[])
    used = 0
    current_id: str | None = origin.state_id

    def spend_one() -> None:
        nonlocal used
        if used + 1 > action_budget:
            raise _BudgetDone
        used += 1

    def restore_to(rel_path: tuple[ActionCommand, ...]) -> None:
        """restart + origin path + relative path; leaves current_id updated."""
        nonlocal current_id
        spend_one()
        device.restart_app()
        for cmd in tuple(origin_path) + rel_path:
            spend_one()
            status = device.execute(cmd)
            if not status.ok or status.crash:
                current_id = None
                raise ExplorerError(f"restore path failed at {cmd.to_dict()}")
        current_id = None  # recomputed by the caller when needed

    frontier: list[tuple[str, tuple[ActionCommand, ...]]] = [(origin.state_id, ())]
    probed: set[str] = set()
    try:
        for level in range(depth):
            next_frontier: list[tuple[str, tuple[ActionCommand, ...]]] = []
            for state_id, rel_path in frontier:
                if state_id in probed:
                    continue
                probed.add(state_id)
                state = graph.nodes[state_id]
                probes = _probe_commands(state)
                if rng is not None:
                    rng.shuffle(probes)
                for probe in probes:
                    if current_id != state_id:
                        restore_to(rel_path)
                        current_id = state_id
                    spend_one()
                    status = device.execute(probe)
                    if status.crash:
                        current_id = None
                        continue
                    if not status.ok:
                        current_id = state_id
                        continue
                    dest = status.new_state
                    current_id = dest.state_id
                    graph.nodes.setdefault(dest.state_id, dest)
                    edge = UtgEdge(state_id, probe, dest.state_id)
                    if edge not in graph.edges:
                        graph.edges.append(edge)
                    if level + 1 < depth and dest.state_id not in probed:
                        next_frontier.append((dest.state_id, rel_path + (probe,)))
            frontier = next_frontier
        if current_id != origin.state_id:
            restore_to(())
            current_id = origin.state_id
    except _BudgetDone:
        graph.truncated = True
    except ExplorerError:
        graph.truncated = True
    graph.actions_used = used
    return graph


def _nodes_containing(graph: UtgGraph, feature: str) -> list[str]:
    hits = []
    for state_id, state in graph.nodes.items():
        try:
            resolve_feature(state, feature)
        except NoMatchError:
            continue
        hits.append(state_id)
    return hits


def bfs_distances(graph: UtgGraph) -> dict[str, int]:
    distances = {graph.origin: 0}
    queue = deque([graph.origin])
    while queue:
        current = queue.popleft()
        for edge in graph.out_edges(current):
            if edge.to_state not in distances:
                distances[edge.to_state] = distances[current] + 1
                queue.append(edge.to_state)
    return distances


def closest_state_for_element(graph: UtgGraph, element_feature: str) -> str:
    """The state containing the element at minimal BFS distance from the origin.

    Ties break by smallest state id.
    """
    hits = _nodes_containing(graph, element_feature)
    if not hits:
        raise ElementAbsent(f"element {element_feature!r} appears in no node")
    distances = bfs_distances(graph)
    reachable = [h for h in hits if h in distances]
    if not reachable:
        raise ElementAbsent(f"element {element_feature!r} appears only in unreachable nodes")
    return min(reachable, key=lambda sid: (distances[sid], sid))


@dataclass
class FunctionalityEntry:
    """What one origin-page element accomplishes, with the path to get there."""

    element: str
    synthesized_functionality: str | None
    ui_states: tuple[str, ...]
    ui_elements: tuple[str, ...]
    available: bool = True

    def to_dict(self) -> dict:
        return {
            "element": self.element,
            "synthesized_functionality": self.synthesized_functionality,
            "ui_states": list(self.ui_states),
            "ui_elements": list(self.ui_elements),
            "available": self.available,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "FunctionalityEntry":
        return cls(
            element=raw["element"],
            synthesized_functionality=raw.get("synthesized_functionality"),
            ui_states=tuple(raw.get("ui_states", [])),
            ui_elements=tuple(raw.get("ui_elements", [])),
            available=bool(raw.get("available", True)),
        )


@dataclass
class FunctionalityTable:
    origin: str
    entries: tuple[FunctionalityEntry, ...]

    def to_dict(self) -> dict:
        return {"origin": self.origin, "entries": [e.to_dict() for e in self.entries]}

    @classmethod
    def from_dict(cls, raw: dict) -> "FunctionalityTable":
        return cls(raw["origin"], tuple(FunctionalityEntry.from_dict(e) for e in raw["entries"]))


@dataclass
class UiFunctionTable:
    """Per-screen descriptions, keyed by state id, in BFS order from the origin."""

    descriptions: dict[str, str | None] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"descriptions": self.descriptions}

    @classmethod
    def from_dict(cls, raw: dict) -> "UiFunctionTable":
        return cls(descriptions=dict(raw.get("descriptions", {})))


def synthesize_functionality(
    graph: UtgGraph, gateway: LlmGateway, deadline: float | None = None
) -> FunctionalityTable:
    """Summarize, per interactable origin element, the screen it leads to.

    A gateway failure marks only that entry unavailable; the table is always
    returned with one entry per interactable element of the origin page.
    """
    if not graph.nodes:
        raise ExplorerError("graph is empty")
    template = load_template("functionality_summary.txt")
    origin_state = graph.nodes[graph.origin]
    entries: list[FunctionalityEntry] = []
    for element in interactable_elements(origin_state):
        feature = feature_for_element(element) or element.element_id
        try:
            source = closest_state_for_element(graph, feature)
        except ElementAbsent:
            source = graph.origin
        edge = next(
            (e for e in graph.out_edges(source) if e.action.feature == feature), None
        )
        if edge is None:
            entries.append(
                FunctionalityEntry(
                    element=feature,
                    synthesized_functionality="No screen change was observed for this element.",
                    ui_states=(graph.origin,),
                    ui_elements=(),
                )
            )
            continue
        path_states, path_features = graph.path_from_origin(source)
        ui_states = tuple(path_states + [edge.to_state])
        ui_elements = tuple(path_features + [feature])
        prompt = template.format(
            feature=feature,
            origin_activity=origin_state.activity_name,
            destination=encode_state_text(graph.nodes[edge.to_state]),
        )
        try:
            summary: str | None = gateway.complete(prompt, deadline).strip()
            available = True
        except GatewayError:
            summary = None
            available = False
        entries.append(
            FunctionalityEntry(
                element=feature,
                synthesized_functionality=summary,
                ui_states=ui_states,
                ui_elements=ui_elements,
                available=available,
            )
        )
    return FunctionalityTable(origin=graph.origin, entries=tuple(entries))


def synthesize_ui_functions(
    graph: UtgGraph, gateway: LlmGateway, deadline: float | None = None
) -> UiFunctionTable:
    """Ask the model to describe every screen of the graph, in BFS order."""
    if not graph.nodes:
        raise ExplorerError("graph is empty")
    template = load_template("state_summary.txt")
    table = UiFunctionTable()
    for state_id in graph.bfs_order():
        prompt = template.format(state=encode_state_text(graph.nodes[state_id]))
        try:
            table.descriptions[state_id] = gateway.complete(prompt, deadline).strip()
        except GatewayError:
            table.descriptions[state_id] = None
    return table


def save_knowledge(
    path: str | Path, graph: UtgGraph, functionality: FunctionalityTable, ui_functions: UiFunctionTable
) -> None:
    payload = {
        "graph": graph.to_dict(),
        "functionality": functionality.to_dict(),
        "ui_functions": ui_functions.to_dict(),
    }
    Path(path).write_text(json.dumps(payload, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


def load_knowledge(path: str | Path) -> tuple[UtgGraph, FunctionalityTable, UiFunctionTable]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return (
        UtgGraph.from_dict(payload["graph"]),
        FunctionalityTable.from_dict(payload["functionality"]),
        UiFunctionTable.from_dict(payload["ui_functions"]),
    )
