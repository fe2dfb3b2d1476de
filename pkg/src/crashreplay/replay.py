"""The replay feedback loop.

Turns a bug report plus its extracted steps into device actions: capture the
screen, prompt the model, execute what comes back, feed the outcome into the
next prompt.  When the loop detects it is stuck it explores the problem page
once and continues with knowledge-enriched prompts, until crash or budget
exhaustion.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .device import (
    AlreadyCrashed,
    CrashInfo,
    Device,
    DeviceUnavailable,
    ExecStatus,
    UiState,
    encode_state_text,
)
from .explorer import (
    FunctionalityTable,
    UiFunctionTable,
    UtgGraph,
    explore,
    load_knowledge,
    save_knowledge,
    synthesize_functionality,
    synthesize_ui_functions,
)
from .gateway import (
    ActionCommand,
    BudgetExceeded,
    GatewayError,
    LlmGateway,
    NoActionableOutput,
    load_template,
)
from .grammar import S2RScript, format_entity


class Outcome(str, Enum):
    REPRODUCED = "reproduced"
    BUDGET_EXHAUSTED = "budget_exhausted"
    NO_ACTIONABLE_OUTPUT = "no_actionable_output"
    DEVICE_FAILURE = "device_failure"


class StuckReason(str, Enum):
    NO_MATCH_REPEATED = "no_match_repeated"
    STATE_REVISITED = "state_revisited_without_progress"
    LLM_NO_ACTIONABLE = "llm_no_actionable_output"


@dataclass(frozen=True)
class StuckSignal:
    reason: StuckReason
    state: str


@dataclass(frozen=True)
class StuckConfig:
    """Thresholds for the stuck heuristics; all configuration-exposed."""

    no_match_threshold: int = 2
    revisit_threshold: int = 3
    no_actionable_threshold: int = 2


@dataclass
class HistoryRecord:
    """One executed command, or one iteration that produced no command."""

    state_id: str
    command: ActionCommand | None
    status: ExecStatus | None
    no_actionable: bool = False


@dataclass
class Knowledge:
    graph: UtgGraph
    functionality: FunctionalityTable
    ui_functions: UiFunctionTable


@dataclass
class ReplaySession:
    """The loop's memory: inputs, append-only history, attached knowledge."""

    report: str
    script: S2RScript
    budget: float
    started_at: float
    history: list[HistoryRecord] = field(default_factory=list)
    knowledge: Knowledge | None = None
    explored_states: set[str] = field(default_factory=set)


@dataclass
class ReplayResult:
    outcome: Outcome
    crash: CrashInfo | None
    elapsed: float
    llm_time: float
    steps_executed: int
    iterations: int
    trace: tuple[HistoryRecord, ...]
    trace_records: tuple[dict, ...]

    def summary_dict(self) -> dict:
        """Deterministic summary (wall-clock timing deliberately excluded)."""
        return {
            "outcome": self.outcome.value,
            "crash": self.crash.to_dict() if self.crash else None,
            "steps_executed": self.steps_executed,
            "iterations": self.iterations,
            "llm_time_s": round(self.llm_time, 6),
            "trace_sha256": hashlib.sha256(self.trace_text().encode("utf-8")).hexdigest(),
        }

    def trace_text(self) -> str:
        """The run log: one JSON record per loop iteration, reproducible byte-for-byte."""
        return "".join(json.dumps(rec, ensure_ascii=False) + "\n" for rec in self.trace_records)


def detect_stuck(history: list[HistoryRecord], config: StuckConfig = StuckConfig()) -> StuckSignal | None:
    """Decide whether the loop is stuck, from the session history alone.

    Signals when (a) the same (state, feature) resolution failure repeats,
    (b) the current state keeps being revisited with nothing new discovered
    since the previous visit, or (c) the model produced no actionable output
    on the same state more than once.
    """
    if not history:
        return None

    # (a) repeated failure to resolve the same feature on the same state
    miss_counts: dict[tuple[str, str], int] = {}
    for rec in history:
        if rec.status is not None and rec.status.no_match_feature:
            key = (rec.state_id, rec.status.no_match_feature)
            miss_counts[key] = miss_counts.get(key, 0) + 1
            if miss_counts[key] >= config.no_match_threshold:
                return StuckSignal(StuckReason.NO_MATCH_REPEATED, rec.state_id)

    # (b) current state re-entered with no new state discovered in between;
    # consecutive duplicates collapse (standing still is not a revisit)
    sequence: list[str] = []
    for rec in history:
        if rec.command is None or rec.status is None:
            continue
        for sid in ((rec.state_id,) if not sequence else ()) + (rec.status.new_state.state_id,):
            if not sequence or sequence[-1] != sid:
                sequence.append(sid)
    if sequence:
        current = sequence[-1]
        visits = [i for i, sid in enumerate(sequence) if sid == current]
        if len(visits) >= config.revisit_threshold:
            previous_visit = visits[-2]
            first_seen: dict[str, int] = {}
            for i, sid in enumerate(sequence):
                first_seen.setdefault(sid, i)
            if not any(first > previous_visit for first in first_seen.values()):
                return StuckSignal(StuckReason.STATE_REVISITED, current)

    # (c) no actionable output twice on the same state
    no_action_counts: dict[str, int] = {}
    for rec in history:
        if rec.no_actionable:
            no_action_counts[rec.state_id] = no_action_counts.get(rec.state_id, 0) + 1
            if no_action_counts[rec.state_id] >= config.no_actionable_threshold:
                return StuckSignal(StuckReason.LLM_NO_ACTIONABLE, rec.state_id)
    return None


def render_feedback(status: ExecStatus, previous_state_id: str | None = None) -> str:
    """One-paragraph execution feedback appended to the next prompt."""
    if status.crash:
        return ""
    command_note = f" ({status.detail})" if status.detail else ""
    if status.ok:
        text = (
            f"The action executed successfully{command_note}. "
            f"The current screen is {status.new_state.activity_name}."
        )
        if previous_state_id is not None:
            changed = status.new_state.state_id != previous_state_id
            text += " The screen changed." if changed else " The screen did not change."
        return text
    return f"The action failed: {status.detail}. The screen did not change."


def _render_knowledge(knowledge: Knowledge) -> str:
    graph = knowledge.graph
    origin_activity = graph.nodes[graph.origin].activity_name

    def describe(state_id: str) -> str:
        state = graph.nodes.get(state_id)
        return state.activity_name if state is not None else state_id

    lines = [f"Functionality of the elements on the {origin_activity} screen:"]
    for entry in knowledge.functionality.entries:
        if not entry.available:
            summary = "(summary unavailable)"
        else:
            summary = entry.synthesized_functionality or "(no summary)"
        if len(entry.ui_states) > 1:
            path = " > ".join(describe(sid) for sid in entry.ui_states)
            via = ", ".join(f"[{f}]" for f in entry.ui_elements)
            lines.append(f'- "{entry.element}": {summary} Path: {path} via {via}.')
        else:
            lines.append(f'- "{entry.element}": {summary}')
    lines.append("Screen functions:")
    for state_id, description in knowledge.ui_functions.descriptions.items():
        lines.append(f"- {describe(state_id)}: {description or '(description unavailable)'}")
    return "\n".join(lines)


def build_replay_prompt(
    report: str,
    script: S2RScript,
    encoded_ui: str,
    knowledge: Knowledge | None = None,
    feedback: str | None = None,
) -> str:
    """Assemble the action prompt: instructions, report, steps, screen,
    and (once exploration has run) the synthesized app knowledge."""
    sections = [load_template("replay_instructions.txt").strip(), "## Bug report", report.strip()]
    sections.append("## Steps to reproduce (extracted)")
    if script.steps:
        sections.append(
            "\n".join(f"{i}. {format_entity(s.entity)}" for i, s in enumerate(script.steps, start=1))
        )
    else:
        sections.append("(none extracted)")
    sections.append("## Current screen")
    sections.append(encoded_ui)
    if knowledge is not None:
        sections.append("## Learned app knowledge")
        sections.append(_render_knowledge(knowledge))
    if feedback:
        sections.append(f"Previous action feedback: {feedback}")
    return "\n\n".join(sections) + "\n"


def _status_dict(status: ExecStatus) -> dict:
    return {
        "ok": status.ok,
        "detail": status.detail,
        "new_state": status.new_state.state_id,
        "crash": status.crash.to_dict() if status.crash else None,
    }


def run(
    report: str,
    script: S2RScript,
    device: Device,
    gateway: LlmGateway,
    budget: float,
    *,
    explore_enabled: bool = True,
    explore_depth: int = 1,
    explore_action_budget: int = 40,
    max_iterations: int | None = None,
    stuck_config: StuckConfig = StuckConfig(),
    utg_cache_dir: str | Path | None = None,
) -> ReplayResult:
    """Drive the device until the crash is reproduced or a budget runs out.

    The wall-clock budget is checked before every gateway call and every
    device command; ``max_iterations`` optionally caps loop iterations so a
    run that cannot succeed ends deterministically.
    """
    session = ReplaySession(report=report, script=script, budget=budget, started_at=time.monotonic())
    deadline = session.started_at + budget
    llm_base = gateway.total_llm_time

    trace_records: list[dict] = []
    consecutive_no_actionable = 0
    steps_executed = 0
    path_from_start: list[ActionCommand] = []
    feedback: str | None = None
    outcome: Outcome | None = None
    crash: CrashInfo | None = None
    iteration = 0

    def result() -> ReplayResult:
        assert outcome is not None
        return ReplayResult(
            outcome=outcome,
            crash=crash,
            elapsed=time.monotonic() - session.started_at,
            llm_time=gateway.total_llm_time - llm_base,
            steps_executed=steps_executed,
            iterations=iteration,
            trace=tuple(session.history),
            trace_records=tuple(trace_records),
        )

    def maybe_explore(signal: StuckSignal, state: UiState) -> UiState:
        """Explore the stuck page once, attach knowledge, restore the device."""
        session.explored_states.add(signal.state)
        cache_path = None
        if utg_cache_dir is not None:
            Path(utg_cache_dir).mkdir(parents=True, exist_ok=True)
            cache_path = Path(utg_cache_dir) / f"{device.app_id}__{signal.state}.json"
        if cache_path is not None and cache_path.exists():
            graph, functionality, ui_functions = load_knowledge(cache_path)
        else:
            graph = explore(
                device,
                depth=explore_depth,
                action_budget=explore_action_budget,
                origin_path=tuple(path_from_start),
            )
            functionality = synthesize_functionality(graph, gateway, deadline)
            ui_functions = synthesize_ui_functions(graph, gateway, deadline)
            if cache_path is not None:
                save_knowledge(cache_path, graph, functionality, ui_functions)
        session.knowledge = Knowledge(graph, functionality, ui_functions)
        return device.capture_state()

    try:
        state = device.capture_state()
    except DeviceUnavailable:
        outcome = Outcome.DEVICE_FAILURE
        return result()

    while True:
        if time.monotonic() >= deadline or (max_iterations is not None and iteration >= max_iterations):
            outcome = Outcome.BUDGET_EXHAUSTED
            return result()
        iteration += 1
        prompt = build_replay_prompt(report, script, encode_state_text(state), session.knowledge, feedback)
        record: dict = {
            "iteration": iteration,
            "state": state.state_id,
            "activity": state.activity_name,
            "prompt_sha256": hashlib.sha256(prompt.encode("utf-8")).hexdigest(),
            "responses": [],
            "commands": [],
            "statuses": [],
            "no_actionable": False,
            "stuck": None,
            "explored": False,
        }
        trace_records.append(record)

        exchanges_before = len(gateway.exchanges)
        commands: list[ActionCommand] | None
        try:
            commands = gateway.request_actions(prompt, deadline=deadline)
        except BudgetExceeded:
            outcome = Outcome.BUDGET_EXHAUSTED
            return result()
        except (NoActionableOutput, GatewayError):
            commands = None
        record["responses"] = [ex.raw_response for ex in gateway.exchanges[exchanges_before:]]
        record["llm_latency_s"] = round(
            sum(ex.latency for ex in gateway.exchanges[exchanges_before:]), 6
        )

        if not commands:
            record["no_actionable"] = True
            session.history.append(HistoryRecord(state.state_id, None, None, no_actionable=True))
            consecutive_no_actionable += 1
            signal = detect_stuck(session.history, stuck_config)
            if signal is not None:
                record["stuck"] = signal.reason.value
                if explore_enabled and signal.state not in session.explored_states:
                    try:
                        state = maybe_explore(signal, state)
                    except DeviceUnavailable:
                        outcome = Outcome.DEVICE_FAILURE
                        return result()
                    record["explored"] = True
                    consecutive_no_actionable = 0
                    feedback = None
                    continue
            if consecutive_no_actionable >= 2:
                outcome = Outcome.NO_ACTIONABLE_OUTPUT
                return result()
            feedback = "Your previous reply contained no executable JSON action array."
            continue

        consecutive_no_actionable = 0
        record["commands"] = [cmd.to_dict() for cmd in commands]
        feedback_parts: list[str] = []
        for index, cmd in enumerate(commands):
            if time.monotonic() >= deadline:
                outcome = Outcome.BUDGET_EXHAUSTED
                return result()
            previous_id = state.state_id
            try:
                status = device.execute(cmd)
            except DeviceUnavailable:
                outcome = Outcome.DEVICE_FAILURE
                return result()
            except AlreadyCrashed:
                break
            steps_executed += 1
            session.history.append(HistoryRecord(previous_id, cmd, status))
            record["statuses"].append(_status_dict(status))
            state = status.new_state
            if cmd.action == "restart":
                path_from_start = []
            elif status.ok and state.state_id != previous_id:
                path_from_start.append(cmd)
            if status.crash is not None:
                crash = status.crash
                outcome = Outcome.REPRODUCED
                return result()
            feedback_parts.append(render_feedback(status, previous_id))
            if not status.ok:
                remaining = len(commands) - index - 1
                if remaining:
                    feedback_parts.append(f"The remaining {remaining} queued actions were discarded.")
                break
        feedback = " ".join(feedback_parts)

        signal = detect_stuck(session.history, stuck_config)
        if signal is not None:
            record["stuck"] = signal.reason.value
            if explore_enabled and signal.state not in session.explored_states:
                try:
                    state = maybe_explore(signal, state)
                except DeviceUnavailable:
                    outcome = Outcome.DEVICE_FAILURE
                    return result()
                record["explored"] = True
                feedback = None
