"""Step-to-reproduce action grammar and its canonical bracket notation.

A reproduction step is an action primitive plus optional arguments, written
as bracket groups: ``[Input] [server URL] [xxyyzz]``.  This module owns the
action vocabulary, formatting/parsing of that notation, the prompt used to
ask a language model for steps, and the parsing of its reply.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum


class GrammarError(Exception):
    """Base error for grammar-level failures."""


class InvariantViolation(GrammarError):
    """An entity does not satisfy the shape required by its action."""


class NoEntitiesFound(GrammarError):
    """A model response contained no parseable step lines."""


class ActionType(str, Enum):
    TAP = "tap"
    INPUT = "input"
    SCROLL = "scroll"
    SWIPE = "swipe"
    ROTATE = "rotate"
    DELETE = "delete"
    DOUBLE_TAP = "double_tap"
    LONG_TAP = "long_tap"
    RESTART = "restart"
    BACK = "back"


#: The seven core actions; the rest are extensions used during replay.
STANDARD_ACTIONS = frozenset(
    {
        ActionType.TAP,
        ActionType.INPUT,
        ActionType.SCROLL,
        ActionType.ROTATE,
        ActionType.DELETE,
        ActionType.DOUBLE_TAP,
        ActionType.LONG_TAP,
    }
)
EXTENDED_ACTIONS = frozenset({ActionType.SWIPE, ActionType.RESTART, ActionType.BACK})


class Direction(str, Enum):
    UP = "up"
    DOWN = "down"
    LEFT = "left"
    RIGHT = "right"
    LANDSCAPE = "landscape"
    PORTRAIT = "portrait"


SCROLL_DIRECTIONS = frozenset({Direction.UP, Direction.DOWN, Direction.LEFT, Direction.RIGHT})
ROTATE_DIRECTIONS = frozenset({Direction.LANDSCAPE, Direction.PORTRAIT})

#: Actions whose first bracket argument is a target component.
COMPONENT_ACTIONS = frozenset(
    {ActionType.TAP, ActionType.DOUBLE_TAP, ActionType.LONG_TAP, ActionType.INPUT, ActionType.DELETE}
)

_ACTION_DISPLAY = {
    ActionType.TAP: "Tap",
    ActionType.INPUT: "Input",
    ActionType.SCROLL: "Scroll",
    ActionType.SWIPE: "Swipe",
    ActionType.ROTATE: "Rotate",
    ActionType.DELETE: "Delete",
    ActionType.DOUBLE_TAP: "Double-tap",
    ActionType.LONG_TAP: "Long-tap",
    ActionType.RESTART: "Restart",
    ActionType.BACK: "Back",
}

# Accepts "Long Tap", "long-tap", "LONG_TAP", ... for every action name.
_ACTION_LOOKUP = {name.value.replace("_", " "): name for name in ActionType}

AVAILABLE_ACTIONS_TEXT = (
    "[tap(click), input(set_text), scroll, swipe, rotate, delete, "
    "double tap(click), long tap(click), restart, back]. "
    "Generate input when none is given."
)

ACTION_PRIMITIVES_TEXT = (
    "[Tap] [Component], [Scroll] [Direction], [Input] [Component] [Value], "
    "[Rotate] [Direction], [Delete] [Component] [Value], "
    "[Double-tap] [Component], [Long-tap] [Component]. "
    "The actions you identify should be in the available actions."
)


@dataclass(frozen=True)
class S2REntity:
    """One structured reproduction step.

    ``generate_on_replay`` marks an input step whose value was not stated in
    the report; the replay loop asks the model to invent one.
    """

    action: ActionType
    component: str | None = None
    value: str | None = None
    direction: Direction | None = None
    generate_on_replay: bool = False

    def validate(self) -> None:
        a = self.action
        if a in COMPONENT_ACTIONS and not self.component:
            raise InvariantViolation(f"{a.value} requires a component")
        if a == ActionType.INPUT and self.value is None and not self.generate_on_replay:
            raise InvariantViolation("input requires a value unless generate_on_replay is set")
        if a in (ActionType.SCROLL, ActionType.SWIPE):
            if self.direction is None or self.direction not in SCROLL_DIRECTIONS:
                raise InvariantViolation(f"{a.value} requires a direction in up/down/left/right")
            if self.component is not None or self.value is not None:
                raise InvariantViolation(f"{a.value} carries only a direction")
        if a == ActionType.ROTATE:
            if self.direction is not None and self.direction not in ROTATE_DIRECTIONS:
                raise InvariantViolation("rotate direction must be landscape or portrait")
            if self.component is not None or self.value is not None:
                raise InvariantViolation("rotate carries at most a direction")
        if a in (ActionType.RESTART, ActionType.BACK):
            if self.component is not None or self.value is not None or self.direction is not None:
                raise InvariantViolation(f"{a.value} carries no arguments")
        if a in (ActionType.TAP, ActionType.DOUBLE_TAP, ActionType.LONG_TAP) and self.value is not None:
            raise InvariantViolation(f"{a.value} carries no value")

    def to_label(self) -> dict:
        """Serialize to the corpus label schema (absent fields omitted)."""
        out: dict = {"action": self.action.value}
        if self.component is not None:
            out["component"] = self.component
        if self.value is not None:
            out["value"] = self.value
        if self.direction is not None:
            out["direction"] = self.direction.value
        return out

    @classmethod
    def from_label(cls, raw: dict) -> "S2REntity":
        try:
            action = ActionType(str(raw["action"]).lower())
        except (KeyError, ValueError) as exc:
            raise InvariantViolation(f"bad label action: {raw!r}") from exc
        direction = None
        if raw.get("direction") is not None:
            try:
                direction = Direction(str(raw["direction"]).lower())
            except ValueError as exc:
                raise InvariantViolation(f"bad label direction: {raw!r}") from exc
        value = raw.get("value")
        entity = cls(
            action=action,
            component=raw.get("component"),
            value=value,
            direction=direction,
            generate_on_replay=action == ActionType.INPUT and value is None,
        )
        entity.validate()
        return entity


def format_entity(entity: S2REntity) -> str:
    """Render an entity in canonical bracket notation, e.g. ``[Tap] [search]``."""
    entity.validate()
    parts = [_ACTION_DISPLAY[entity.action]]
    if entity.component is not None:
        parts.append(entity.component)
    if entity.value is not None:
        parts.append(entity.value)
    if entity.direction is not None:
        parts.append(entity.direction.value.capitalize())
    return " ".join(f"[{p}]" for p in parts)


@dataclass(frozen=True)
class ParseIssue:
    line_no: int
    line: str
    reason: str


@dataclass
class ParsedEntities:
    entities: list[S2REntity]
    issues: list[ParseIssue]


_BRACKET_GROUP = re.compile(r"\[([^\[\]]*)\]")
_LINE_NUMBERING = re.compile(r"^\s*\d+[.)]\s*")


def _parse_direction(text: str, allowed: frozenset) -> Direction:
    try:
        d = Direction(text.strip().lower())
    except ValueError:
        raise ValueError(f"unknown direction {text!r}")
    if d not in allowed:
        raise ValueError(f"direction {text!r} not valid here")
    return d


def _entity_from_groups(groups: list[str]) -> S2REntity:
    action_text = groups[0].strip().lower().replace("-", " ").replace("_", " ")
    action_text = " ".join(action_text.split())
    action = _ACTION_LOOKUP.get(action_text)
    if action is None:
        raise ValueError(f"unknown action {groups[0]!r}")
    args = [g.strip() for g in groups[1:]]
    if any(not a for a in args):
        raise ValueError("empty bracket argument")

    if action in (ActionType.TAP, ActionType.DOUBLE_TAP, ActionType.LONG_TAP):
        if len(args) != 1:
            raise ValueError(f"{action.value} takes exactly one component")
        return S2REntity(action, component=args[0])
    if action == ActionType.INPUT:
        if len(args) == 1:
            return S2REntity(action, component=args[0], generate_on_replay=True)
        if len(args) == 2:
            return S2REntity(action, component=args[0], value=args[1])
        raise ValueError("input takes a component and an optional value")
    if action == ActionType.DELETE:
        if len(args) == 1:
            return S2REntity(action, component=args[0])
        if len(args) == 2:
            return S2REntity(action, component=args[0], value=args[1])
        raise ValueError("delete takes a component and an optional value")
    if action in (ActionType.SCROLL, ActionType.SWIPE):
        if len(args) != 1:
            raise ValueError(f"{action.value} takes exactly one direction")
        return S2REntity(action, direction=_parse_direction(args[0], SCROLL_DIRECTIONS))
    if action == ActionType.ROTATE:
        if len(args) == 0:
            return S2REntity(action)
        if len(args) == 1:
            return S2REntity(action, direction=_parse_direction(args[0], ROTATE_DIRECTIONS))
        raise ValueError("rotate takes at most one direction")
    # restart / back
    if args:
        raise ValueError(f"{action.value} takes no arguments")
    return S2REntity(action)


def parse_entity_notation(text: str) -> ParsedEntities:
    """Parse bracket-notation lines into entities.

    Lines may be numbered or not; action names are matched case-insensitively
    and tolerate space/hyphen/underscore variants ("Long Tap", "long-tap").
    Unparseable lines are reported as issues, never silently dropped.
    """
    entities: list[S2REntity] = []
    issues: list[ParseIssue] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        body = _LINE_NUMBERING.sub("", line)
        groups = _BRACKET_GROUP.findall(body)
        if not groups:
            issues.append(ParseIssue(line_no, raw, "no bracket groups"))
            continue
        try:
            entity = _entity_from_groups(groups)
            entity.validate()
        except (ValueError, InvariantViolation) as exc:
            issues.append(ParseIssue(line_no, raw, str(exc)))
            continue
        entities.append(entity)
    return ParsedEntities(entities, issues)


@dataclass(frozen=True)
class ScriptStep:
    """An entity plus the 1-based report sentence it was extracted from."""

    entity: S2REntity
    sentence_index: int | None = None


@dataclass
class S2RScript:
    """Ordered reproduction steps extracted from one bug report."""

    steps: tuple[ScriptStep, ...]
    source_report: str = ""
    parse_issues: tuple[ParseIssue, ...] = field(default=(), compare=False)

    def to_dict(self) -> dict:
        steps = []
        for step in self.steps:
            entry = step.entity.to_label()
            entry["sentence_index"] = step.sentence_index
            steps.append(entry)
        return {"source_report": self.source_report, "steps": steps}

    @classmethod
    def from_dict(cls, raw: dict) -> "S2RScript":
        steps = tuple(
            ScriptStep(S2REntity.from_label(entry), entry.get("sentence_index"))
            for entry in raw.get("steps", [])
        )
        return cls(steps=steps, source_report=raw.get("source_report", ""))


def build_extraction_prompt(
    report_sentences: list[str],
    hits: list[tuple[str, list[S2REntity]]],
) -> str:
    """Assemble the step-extraction prompt.

    Sections appear in a fixed order: available actions, action primitives,
    retrieved examples (omitted when there are none), then the numbered
    sentences of the current report.  Identical inputs produce identical
    bytes.
    """
    if not report_sentences:
        raise ValueError("at least one report sentence is required")
    lines = [
        f"Available actions: {AVAILABLE_ACTIONS_TEXT}",
        f"Action primitives: {ACTION_PRIMITIVES_TEXT}",
    ]
    if hits:
        lines.append("Here are some examples for S2R entity extraction.")
        for sentence, labels in hits:
            noun = "entity is" if len(labels) == 1 else "entities are"
            lines.append(f'The sentence is "{sentence}", the extracted S2R {noun}:')
            for i, entity in enumerate(labels, start=1):
                terminal = "." if i == len(labels) else ""
                lines.append(f"{i}. {format_entity(entity)}{terminal}")
    lines.append("Here are the sentences in current bug report:")
    for i, sentence in enumerate(report_sentences, start=1):
        lines.append(f"{i}. {sentence}")
    return "\n".join(lines) + "\n"


_SENTENCE_HEADER = re.compile(r"^\s*sentence\s+(\d+)\s*:?\s*$", re.IGNORECASE)


def parse_extraction_response(text: str, source_report: str = "") -> S2RScript:
    """Turn a model reply into a script.

    Prose lines without a bracket group are discarded.  Optional
    ``Sentence <n>:`` headers assign the following steps to that report
    sentence.  Raises :class:`NoEntitiesFound` when nothing parses.
    """
    steps: list[ScriptStep] = []
    issues: list[ParseIssue] = []
    current_sentence: int | None = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        header = _SENTENCE_HEADER.match(line)
        if header:
            current_sentence = int(header.group(1))
            continue
        if "[" not in line or "]" not in line:
            continue
        parsed = parse_entity_notation(line)
        for issue in parsed.issues:
            issues.append(ParseIssue(line_no, raw, issue.reason))
        for entity in parsed.entities:
            steps.append(ScriptStep(entity, current_sentence))
    if not steps:
        raise NoEntitiesFound("response contained no parseable steps")
    return S2RScript(steps=tuple(steps), source_report=source_report, parse_issues=tuple(issues))
