from __future__ import annotations

import json

import pytest

from crashreplay.cli import fixtures_path
from crashreplay.device import AlreadyCrashed
from crashreplay.gateway import ActionCommand
from crashreplay.simulator import (
    SimSession,
    SimulatorDevice,
    SpecInvalid,
    declared_reachable_states,
    load_spec,
)

APPS = fixtures_path() / "apps"


def write_spec(tmp_path, body: dict):
    path = tmp_path / "app.json"
    path.write_text(json.dumps(body), encoding="utf-8")
    return path


MINIMAL = {
    "app_id": "t.app",
    "initial_state": "a",
    "states": {
        "a": {
            "activity": "AActivity",
            "elements": [
                {"id": "go", "class": "Button", "text": "GO", "bounds": [0, 0, 100, 100], "clickable": True},
                {"id": "field", "class": "EditText", "text": "hello", "bounds": [0, 200, 100, 300], "editable": True},
            ],
        },
        "b": {
            "activity": "BActivity",
            "elements": [
                {"id": "back_btn", "class": "Button", "text": "BACK", "bounds": [0, 0, 100, 100], "clickable": True}
            ],
        },
    },
    "transitions": [
        {"from": "a", "verb": "click", "feature": "go", "to": "b"},
        {"from": "b", "verb": "back", "to": "a"},
    ],
    "crash_rules": [
        {
            "state": "a",
            "verb": "set_text",
            "feature": "field",
            "required_text": "boom",
            "crash": {"exception_type": "java.lang.IllegalStateException", "message": "boom"},
        }
    ],
}


# -- loading / validation -------------------------------------------------------


def test_url_crash_fixture_loads_with_four_states():
    spec = load_spec(APPS / "url_crash.json")
    assert len(spec.states) == 4
    assert spec.initial_state == "settings"


def test_bundled_fixtures_fully_reachable():
    for name in ("url_crash.json", "hidden_about.json", "checkout.json"):
        spec = load_spec(APPS / name)
        assert declared_reachable_states(spec) == set(spec.states), name


def test_transition_to_missing_state_reported(tmp_path):
    body = json.loads(json.dumps(MINIMAL))
    body["transitions"].append({"from": "a", "verb": "back", "to": "nowhere"})
    with pytest.raises(SpecInvalid) as excinfo:
        load_spec(write_spec(tmp_path, body))
    assert any("nowhere" in v for v in excinfo.value.violations)


def test_empty_states_map_is_invalid(tmp_path):
    with pytest.raises(SpecInvalid) as excinfo:
        load_spec(write_spec(tmp_path, {"app_id": "x", "initial_state": "a", "states": {}}))
    assert any("initial_state" in v for v in excinfo.value.violations)


def test_ambiguous_trigger_feature_reported(tmp_path):
    body = json.loads(json.dumps(MINIMAL))
    body["states"]["a"]["elements"].append(
        {
            "id": "go2",
            "class": "Button",
            "resource_id": "t.app:id/go",
            "bounds": [0, 400, 100, 500],
            "clickable": True,
        }
    )
    with pytest.raises(SpecInvalid) as excinfo:
        load_spec(write_spec(tmp_path, body))
    assert any("ambiguous" in v for v in excinfo.value.violations)


def test_all_violations_collected(tmp_path):
    body = {
        "app_id": "x",
        "initial_state": "missing",
        "states": {"a": {"activity": "A", "elements": [{"id": "e", "class": "B", "bounds": [5, 5, 1, 1]}]}},
        "transitions": [{"from": "a", "verb": "click", "feature": "nope", "to": "gone"}],
    }
    with pytest.raises(SpecInvalid) as excinfo:
        load_spec(write_spec(tmp_path, body))
    assert len(excinfo.value.violations) >= 3


# -- stepping ----------------------------------------------------------------------


def test_transition_moves_to_target(tmp_path):
    session = SimSession(load_spec(write_spec(tmp_path, MINIMAL)))
    status = session.step(ActionCommand(action="click", feature="GO"))
    assert status.ok and session.current == "b"
    assert status.new_state.activity_name == "BActivity"


def test_back_without_transition_is_noop(tmp_path):
    session = SimSession(load_spec(write_spec(tmp_path, MINIMAL)))
    before = session.build_state().state_id
    status = session.step(ActionCommand(action="back"))
    assert not status.ok
    assert session.current == "a"
    assert status.new_state.state_id == before


def test_set_text_updates_field_without_transition(tmp_path):
    session = SimSession(load_spec(write_spec(tmp_path, MINIMAL)))
    status = session.step(ActionCommand(action="set_text", feature="hello", input_text="typed"))
    assert status.ok and session.current == "a"
    state = session.build_state()
    field = next(e for e in state.all_elements() if e.element_id == "field")
    assert field.text == "typed"


def test_set_text_crash_rule_fires_on_trigger_value(tmp_path):
    session = SimSession(load_spec(write_spec(tmp_path, MINIMAL)))
    status = session.step(ActionCommand(action="set_text", feature="hello", input_text="boom"))
    assert status.crash is not None
    assert status.crash.exception_type == "java.lang.IllegalStateException"


def test_crash_freezes_session(tmp_path):
    session = SimSession(load_spec(write_spec(tmp_path, MINIMAL)))
    session.step(ActionCommand(action="set_text", feature="hello", input_text="boom"))
    with pytest.raises(AlreadyCrashed):
        session.step(ActionCommand(action="click", feature="GO"))


def test_crash_trigger_is_last_logged_action(tmp_path):
    session = SimSession(load_spec(write_spec(tmp_path, MINIMAL)))
    session.step(ActionCommand(action="click", feature="GO"))
    session.step(ActionCommand(action="back"))
    session.step(ActionCommand(action="set_text", feature="hello", input_text="boom"))
    assert session.action_log[-1].input_text == "boom"


def test_unmatched_click_keeps_state(tmp_path):
    body = json.loads(json.dumps(MINIMAL))
    body["states"]["a"]["elements"].append(
        {"id": "dead", "class": "Button", "text": "NOTHING", "bounds": [0, 600, 100, 700], "clickable": True}
    )
    session = SimSession(load_spec(write_spec(tmp_path, body)))
    status = session.step(ActionCommand(action="click", feature="NOTHING"))
    assert not status.ok and session.current == "a"


def test_table_sequence_triggers_url_crash(url_crash_device):
    device = url_crash_device
    s1 = device.execute(
        ActionCommand(action="set_text", feature="https://librenews.io/api", input_text="xxyyzz")
    )
    assert s1.ok and s1.crash is None
    s2 = device.execute(ActionCommand(action="click", feature="OK"))
    assert s2.ok and s2.new_state.activity_name == "MainFlashActivity"
    s3 = device.execute(ActionCommand(action="click", feature="REFRESH"))
    assert s3.crash is not None
    assert s3.crash.exception_type == "java.lang.IllegalArgumentException"


def test_refresh_with_good_url_does_not_crash(url_crash_device):
    device = url_crash_device
    device.execute(ActionCommand(action="click", feature="OK"))
    status = device.execute(ActionCommand(action="click", feature="REFRESH"))
    assert status.ok and status.crash is None
    assert status.new_state.activity_name == "MainFlashActivity"


def test_restart_returns_to_initial_and_clears_fields(url_crash_device):
    device = url_crash_device
    initial_id = device.capture_state().state_id
    device.execute(ActionCommand(action="set_text", feature="https://librenews.io/api", input_text="xxyyzz"))
    device.execute(ActionCommand(action="click", feature="OK"))
    assert device.restart_app().state_id == initial_id
    assert device.restart_app().state_id == initial_id


def test_identical_command_sequences_are_deterministic(tmp_path):
    commands = [
        ActionCommand(action="click", feature="GO"),
        ActionCommand(action="back"),
        ActionCommand(action="set_text", feature="hello", input_text="x"),
        ActionCommand(action="click", feature="GO"),
    ]

    def trace():
        session = SimSession(load_spec(write_spec(tmp_path, MINIMAL)))
        out = []
        for cmd in commands:
            status = session.step(cmd)
            out.append((status.ok, status.new_state.state_id, status.crash))
        return out, [c.to_dict() for c in session.action_log]

    assert trace() == trace()


def test_device_wrapper_exposes_app_id(checkout_device):
    assert checkout_device.app_id == "org.example.shop"


def test_checkout_quantity_crash(checkout_device):
    status = checkout_device.execute(
        ActionCommand(action="set_text", feature="Quantity", input_text="-1")
    )
    assert status.crash is not None
    assert status.crash.exception_type == "java.lang.NumberFormatException"
