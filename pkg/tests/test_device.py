from __future__ import annotations

import xml.etree.ElementTree as ET

import pytest

from crashreplay.adb_bridge import AdbDevice, parse_crash_from_logcat, parse_hierarchy_xml
from crashreplay.device import (
    Bounds,
    NoMatchError,
    UiElement,
    UiState,
    encode_state_text,
    feature_for_element,
    interactable_elements,
    resolve_feature,
)
from crashreplay.gateway import ActionCommand
from conftest import data_path


def button(eid, text=None, desc=None, rid=None, bounds=(0, 0, 100, 100), **flags):
    return UiElement(
        element_id=eid,
        class_name="android.widget.Button",
        text=text,
        content_desc=desc,
        resource_id=rid,
        bounds=Bounds(*bounds),
        **flags,
    )


def screen(*children, activity="MainActivity"):
    root = UiElement(
        element_id="root", class_name="FrameLayout", bounds=Bounds(0, 0, 1080, 1920), children=children
    )
    return UiState(activity_name=activity, root=root)


# -- fingerprints ---------------------------------------------------------------


def test_fingerprint_stable_for_identical_screens():
    a = screen(button("b1", text="OK"), button("b2", text="CANCEL", bounds=(0, 200, 100, 300)))
    b = screen(button("b1", text="OK"), button("b2", text="CANCEL", bounds=(0, 200, 100, 300)))
    assert a.state_id == b.state_id


def test_fingerprint_invariant_under_sibling_permutation():
    first = button("b1", text="OK", bounds=(0, 0, 100, 100))
    second = button("b2", text="CANCEL", bounds=(0, 200, 100, 300))
    assert screen(first, second).state_id == screen(second, first).state_id


def test_fingerprint_changes_with_text():
    a = screen(button("b1", text="OK"))
    b = screen(button("b1", text="OK!"))
    assert a.state_id != b.state_id


def test_fingerprint_changes_with_activity():
    a = screen(button("b1", text="OK"), activity="A")
    b = screen(button("b1", text="OK"), activity="B")
    assert a.state_id != b.state_id


def test_state_serialization_round_trip():
    state = screen(button("b1", text="OK", desc="confirm", rid="app:id/ok", clickable=True))
    again = UiState.from_dict(state.to_dict())
    assert again.state_id == state.state_id
    assert again.root == state.root


# -- encoding ---------------------------------------------------------------------


def test_encode_contains_text_and_flags():
    state = screen(button("b1", text="GO TO LIBRENEWS", clickable=True))
    encoded = encode_state_text(state)
    lines = encoded.splitlines()
    assert lines[0] == "Screen: MainActivity"
    assert lines[1] == '[0] Button text="GO TO LIBRENEWS" clickable'


def test_encode_empty_root_is_header_only():
    state = screen()
    assert encode_state_text(state) == "Screen: MainActivity"


def test_encode_matches_golden(hidden_about_device):
    hidden_about_device.session.current = "tools"
    encoded = encode_state_text(hidden_about_device.capture_state())
    assert encoded == data_path("golden_tools_screen.txt").read_text(encoding="utf-8")


def test_encode_indents_children():
    child = button("c", text="inner", bounds=(10, 10, 50, 50))
    parent = UiElement(
        element_id="p",
        class_name="LinearLayout",
        bounds=Bounds(0, 0, 100, 100),
        children=(child,),
    )
    encoded = encode_state_text(screen(parent))
    assert "\n[0] LinearLayout\n  [1] Button" in encoded


# -- resolution ---------------------------------------------------------------------


def cascade_screen():
    return screen(
        button("refresh", text="REFRESH", bounds=(0, 0, 100, 100), clickable=True),
        button("info", desc="About the app", bounds=(0, 200, 100, 300), clickable=True),
        button("save", rid="org.app:id/save_button", bounds=(0, 400, 100, 500), clickable=True),
        button("hint", text="tap refresh twice", bounds=(0, 600, 100, 700)),
    )


def test_resolve_tier1_exact_text():
    assert resolve_feature(cascade_screen(), "REFRESH").element_id == "refresh"


def test_resolve_tier2_exact_description():
    assert resolve_feature(cascade_screen(), "About the app").element_id == "info"


def test_resolve_tier3_resource_id_suffix():
    assert resolve_feature(cascade_screen(), "save_button").element_id == "save"


def test_resolve_tier4_case_insensitive_text():
    assert resolve_feature(cascade_screen(), "refresh").element_id == "refresh"


def test_resolve_tier5_substring():
    assert resolve_feature(cascade_screen(), "about the").element_id == "info"


def test_resolve_tie_breaks_topmost_then_leftmost():
    state = screen(
        button("low", text="OK", bounds=(0, 500, 100, 600)),
        button("high", text="OK", bounds=(0, 100, 100, 200)),
        button("right", text="OK", bounds=(500, 100, 600, 200)),
    )
    assert resolve_feature(state, "OK").element_id == "high"


def test_resolve_no_match_reports_all_tiers():
    with pytest.raises(NoMatchError) as excinfo:
        resolve_feature(cascade_screen(), "Nonexistent")
    assert len(excinfo.value.misses) == 5
    assert "no exact text match" in excinfo.value.misses[0]


def test_resolve_rejects_empty_feature():
    with pytest.raises(ValueError):
        resolve_feature(cascade_screen(), "")


def test_interactable_elements_order_and_filter():
    state = cascade_screen()
    names = [e.element_id for e in interactable_elements(state)]
    assert names == ["refresh", "info", "save"]


def test_feature_for_element_prefers_text():
    assert feature_for_element(button("b", text="OK", desc="confirm")) == "OK"
    assert feature_for_element(button("b", desc="confirm")) == "confirm"
    assert feature_for_element(button("b", rid="app:id/go")) == "go"
    assert feature_for_element(button("b")) is None


# -- debug-bridge backend -------------------------------------------------------------


def test_hierarchy_parse_element_count_matches_xml():
    xml_text = data_path("hierarchy_dump.xml").read_text(encoding="utf-8")
    root = parse_hierarchy_xml(xml_text)
    parsed_count = sum(1 for _ in root.iter_tree())
    xml_count = len(ET.fromstring(xml_text).findall(".//node"))
    assert parsed_count == xml_count == 9


def test_hierarchy_parse_attributes():
    root = parse_hierarchy_xml(data_path("hierarchy_dump.xml").read_text(encoding="utf-8"))
    elements = list(root.iter_tree())
    refresh = next(e for e in elements if e.text == "REFRESH")
    assert refresh.clickable and not refresh.editable
    assert refresh.resource_id == "io.github.librenews:id/refresh"
    assert refresh.bounds == Bounds(42, 1737, 519, 1857)
    url_field = next(e for e in elements if e.content_desc == "Server URL")
    assert url_field.editable and url_field.long_clickable


def test_logcat_crash_parse():
    log = """E/AndroidRuntime(12345): FATAL EXCEPTION: main
E/AndroidRuntime(12345): Process: io.github.librenews, PID: 12345
E/AndroidRuntime(12345): java.lang.IllegalArgumentException: Expected URL scheme 'http' or 'https'
E/AndroidRuntime(12345):     at okhttp3.HttpUrl.get(HttpUrl.java:917)"""
    crash = parse_crash_from_logcat(log)
    assert crash is not None
    assert crash.exception_type == "java.lang.IllegalArgumentException"
    assert "Expected URL scheme" in crash.message
    assert crash.raised_in_activity == "io.github.librenews"


def test_logcat_without_crash():
    assert parse_crash_from_logcat("W/foo(1): nothing to see\nE/bar(2): minor error") is None


class FakeRunner:
    """Scripted adb runner: records every command, answers from a table."""

    def __init__(self, dump_xml: str):
        self.calls: list[list[str]] = []
        self.dump_xml = dump_xml

    def __call__(self, args, timeout):
        self.calls.append(list(args))
        joined = " ".join(args)
        if "exec-out" in joined and "cat" in joined:
            return self.dump_xml
        if "dumpsys activity" in joined:
            return "mResumedActivity: ActivityRecord{x u0 io.github.librenews/.MainFlashActivity t1}"
        if "logcat" in joined:
            return ""
        if "wm size" in joined:
            return "Physical size: 1080x1920"
        return ""


@pytest.fixture
def fake_adb():
    runner = FakeRunner(data_path("hierarchy_dump.xml").read_text(encoding="utf-8"))
    device = AdbDevice("emulator-5554", "io.github.librenews", ".MainFlashActivity", runner=runner)
    return device, runner


def test_adb_restart_issues_force_stop_then_launch(fake_adb):
    device, runner = fake_adb
    device.restart_app()
    shell_calls = [" ".join(c) for c in runner.calls]
    stop = next(i for i, c in enumerate(shell_calls) if "am force-stop io.github.librenews" in c)
    start = next(i for i, c in enumerate(shell_calls) if "am start -n" in c)
    assert stop < start


def test_adb_click_taps_element_center(fake_adb):
    device, runner = fake_adb
    status = device.execute(ActionCommand(action="click", feature="REFRESH"))
    assert status.ok
    tap = next(c for c in runner.calls if "tap" in c)
    # REFRESH bounds [42,1737][519,1857] -> center (280, 1797)
    assert tap[-2:] == ["280", "1797"]


def test_adb_set_text_taps_then_types(fake_adb):
    device, runner = fake_adb
    device.execute(ActionCommand(action="set_text", feature="Server URL", input_text="a b"))
    typed = next(c for c in runner.calls if "text" in c and c[-1] != "tap")
    assert typed[-1] == "a%sb"


def test_adb_no_match_leaves_state(fake_adb):
    device, runner = fake_adb
    status = device.execute(ActionCommand(action="click", feature="Nonexistent"))
    assert not status.ok
    assert status.no_match_feature == "Nonexistent"
    assert not any("input" in c for c in runner.calls if "tap" in c)


def test_adb_swipe_uses_screen_fraction(fake_adb):
    device, runner = fake_adb
    device.execute(ActionCommand(action="scroll", direction="down"))
    swipe = next(c for c in runner.calls if "swipe" in c)
    # 60% drag centred on (540, 960): y from 1536 to 384
    assert swipe[-5:] == ["540", "1536", "540", "384", "300"]


def test_adb_rotate_sets_user_rotation(fake_adb):
    device, runner = fake_adb
    device.execute(ActionCommand(action="rotate", direction="landscape"))
    joined = [" ".join(c) for c in runner.calls]
    assert any("settings put system accelerometer_rotation 0" in c for c in joined)
    assert any("settings put system user_rotation 1" in c for c in joined)
