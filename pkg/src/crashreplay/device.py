"""Device abstraction: screens as data, feature resolution, execution.

A device yields :class:`UiState` snapshots, executes
:class:`~crashreplay.gateway.ActionCommand` verbs, and reports crashes.
Concrete backends are the in-process app simulator and the debug-bridge
driver for real hardware.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

from .gateway import ActionCommand


class DeviceError(Exception):
    pass


class DeviceUnavailable(DeviceError):
    pass


class AlreadyCrashed(DeviceError):
    """A command was issued to a session frozen by a crash."""


class NoMatchError(DeviceError):
    """No element matched a feature; carries the tier-by-tier miss report."""

    def __init__(self, feature: str, misses: list[str]):
        self.feature = feature
        self.misses = misses
        super().__init__(f"no element matched feature {feature!r} ({'; '.join(misses)})")


class Bounds(NamedTuple):
    left: int
    top: int
    right: int
    bottom: int

    def center(self) -> tuple[int, int]:
        return (self.left + self.right) // 2, (self.top + self.bottom) // 2

    def well_formed(self) -> bool:
        return 0 <= self.left <= self.right and 0 <= self.top <= self.bottom


@dataclass(frozen=True)
class UiElement:
    element_id: str
    class_name: str
    text: str | None = None
    content_desc: str | None = None
    resource_id: str | None = None
    bounds: Bounds = Bounds(0, 0, 0, 0)
    clickable: bool = False
    long_clickable: bool = False
    editable: bool = False
    scrollable: bool = False
    children: tuple["UiElement", ...] = ()

    @property
    def interactable(self) -> bool:
        return self.clickable or self.long_clickable or self.editable or self.scrollable

    def iter_tree(self) -> Iterator["UiElement"]:
        yield self
        for child in self.children:
            yield from child.iter_tree()

    def to_dict(self) -> dict:
        out: dict = {"id": self.element_id, "class": self.class_name, "bounds": list(self.bounds)}
        for key, value in (
            ("text", self.text),
            ("content_desc", self.content_desc),
            ("resource_id", self.resource_id),
        ):
            if value is not None:
                out[key] = value
        for flag in ("clickable", "long_clickable", "editable", "scrollable"):
            if getattr(self, flag):
                out[flag] = True
        if self.children:
            out["children"] = [c.to_dict() for c in self.children]
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "UiElement":
        return cls(
            element_id=raw["id"],
            class_name=raw["class"],
            text=raw.get("text"),
            content_desc=raw.get("content_desc"),
            resource_id=raw.get("resource_id"),
            bounds=Bounds(*raw.get("bounds", (0, 0, 0, 0))),
            clickable=bool(raw.get("clickable", False)),
            long_clickable=bool(raw.get("long_clickable", False)),
            editable=bool(raw.get("editable", False)),
            scrollable=bool(raw.get("scrollable", False)),
            children=tuple(cls.from_dict(c) for c in raw.get("children", [])),
        )


def _sort_key(element: UiElement):
    return (
        element.bounds.top,
        element.bounds.left,
        element.class_name,
        element.text or "",
        element.content_desc or "",
        element.resource_id or "",
    )


def _skeleton(element: UiElement) -> list:
    children = sorted(element.children, key=_sort_key)
    return [
        element.class_name,
        element.text or "",
        element.content_desc or "",
        element.resource_id or "",
        [_skeleton(c) for c in children],
    ]


@dataclass
class UiState:
    """A screen snapshot; ``state_id`` fingerprints its visible content.

    Siblings are canonicalized by position before hashing, so the fingerprint
    does not depend on observation order.  Bounds themselves are not hashed.
    """

    activity_name: str
    root: UiElement
    _state_id: str | None = field(default=None, repr=False, compare=False)

    @property
    def state_id(self) -> str:
        if self._state_id is None:
            blob = json.dumps([self.activity_name, _skeleton(self.root)], separators=(",", ":"))
            self._state_id = hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
        return self._state_id

    def all_elements(self) -> list[UiElement]:
        return list(self.root.iter_tree())

    def to_dict(self) -> dict:
        return {"activity": self.activity_name, "root": self.root.to_dict()}

    @classmethod
    def from_dict(cls, raw: dict) -> "UiState":
        return cls(activity_name=raw["activity"], root=UiElement.from_dict(raw["root"]))


@dataclass(frozen=True)
class CrashInfo:
    exception_type: str
    message: str
    raised_in_activity: str

    def to_dict(self) -> dict:
        return {
            "exception_type": self.exception_type,
            "message": self.message,
            "raised_in_activity": self.raised_in_activity,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "CrashInfo":
        return cls(raw["exception_type"], raw.get("message", ""), raw.get("raised_in_activity", ""))


@dataclass
class ExecStatus:
    ok: bool
    detail: str
    new_state: UiState
    crash: CrashInfo | None = None
    no_match_feature: str | None = None


def _canonical_walk(element: UiElement, depth: int) -> Iterator[tuple[UiElement, int]]:
    for child in sorted(element.children, key=_sort_key):
        yield child, depth
        yield from _canonical_walk(child, depth + 1)


def encode_state_text(state: UiState) -> str:
    """Render a screen as a deterministic indented outline.

    One line per element below the root container: index, widget class
    short-name, any text / description / resource id, and interaction flags.
    The indices are stable, so the model can refer back to elements.
    """
    lines = [f"Screen: {state.activity_name}"]
    for index, (element, depth) in enumerate(_canonical_walk(state.root, 0)):
        parts = [f"[{index}] {element.class_name.rsplit('.', 1)[-1]}"]
        if element.text is not None:
            parts.append(f'text="{element.text}"')
        if element.content_desc is not None:
            parts.append(f'desc="{element.content_desc}"')
        if element.resource_id is not None:
            parts.append(f"id={element.resource_id.rsplit('/', 1)[-1]}")
        if element.clickable:
            parts.append("clickable")
        if element.long_clickable:
            parts.append("long-clickable")
        if element.editable:
            parts.append("editable")
        if element.scrollable:
            parts.append("scrollable")
        lines.append("  " * depth + " ".join(parts))
    return "\n".join(lines)


def interactable_elements(state: UiState) -> list[UiElement]:
    """Interactable elements of a screen in canonical (top, left) order."""
    found = [e for e, _ in _canonical_walk(state.root, 0) if e.interactable]
    return found


def feature_for_element(element: UiElement) -> str | None:
    """The feature string a model (or the explorer) would use to address an element."""
    if element.text:
        return element.text
    if element.content_desc:
        return element.content_desc
    if element.resource_id:
        return element.resource_id.rsplit("/", 1)[-1]
    return None


def resolve_feature(state: UiState, feature: str) -> UiElement:
    """Resolve a feature string to one element via a fixed matching cascade.

    Tiers, first non-empty wins: exact text, exact content description,
    resource-id suffix, case-insensitive text, case-insensitive substring of
    text or description.  Ties break topmost-then-leftmost.  Raises
    :class:`NoMatchError` carrying the per-tier miss report.
    """
    if not feature:
        raise ValueError("feature must be nonempty")
    elements = state.all_elements()
    folded = feature.lower()

    tiers: list[tuple[str, list[UiElement]]] = [
        ("exact text", [e for e in elements if e.text == feature]),
        ("exact description", [e for e in elements if e.content_desc == feature]),
        (
            "resource id suffix",
            [
                e
                for e in elements
                if e.resource_id is not None
                and (e.resource_id == feature or e.resource_id.endswith("/" + feature))
            ],
        ),
        ("case-insensitive text", [e for e in elements if (e.text or "").lower() == folded]),
        (
            "substring of text or description",
            [
                e
                for e in elements
                if folded in (e.text or "").lower() or folded in (e.content_desc or "").lower()
            ],
        ),
    ]
    misses = []
    for name, candidates in tiers:
        if candidates:
            candidates.sort(key=lambda e: (e.bounds.top, e.bounds.left, e.element_id))
            return candidates[0]
        misses.append(f"no {name} match")
    raise NoMatchError(feature, misses)


class Device:
    """A device session owned by exactly one replay or exploration loop."""

    @property
    def app_id(self) -> str:
        raise NotImplementedError

    def capture_state(self) -> UiState:
        raise NotImplementedError

    def execute(self, cmd: ActionCommand) -> ExecStatus:
        raise NotImplementedError

    def restart_app(self) -> UiState:
        raise NotImplementedError
