import random

import pytest

from src.geometry import Box, PointXY
from src.response_parser import (
    FAILURE_STAGES,
    STAGE_MISSING_RETHINK,
    STAGE_MISSING_THINK,
    GroundingEntry,
    InvalidResponse,
    StructuredResponse,
    parse_response,
    render_response,
)

PAYLOAD = '[{"bbox_2d":[0,0,9,9],"point_2d":[4,4],"affordance":"openable"}]'


def tagged(think="t", rethink="r", answer=PAYLOAD):
    return f"<think>{think}</think>\n<rethink>{rethink}</rethink>\n<answer>{answer}</answer>"


def test_golden_render():
    response = StructuredResponse(
        think_text="t",
        rethink_text="r",
        answer_entries=(GroundingEntry(Box(0, 0, 9, 9), PointXY(4, 4), "openable"),),
    )
    assert render_response(response) == tagged()


def test_parse_valid():
    report = parse_response(tagged(think="  the door has a handle \n"))
    assert report.format_ok
    assert report.failure_stage == "ok"
    assert report.response.think_text == "the door has a handle"
    entry = report.response.answer_entries[0]
    assert entry.bbox == Box(0, 0, 9, 9)
    assert entry.point == PointXY(4, 4)
    assert entry.affordance_label == "openable"


def test_whitespace_between_blocks_allowed():
    text = f"  <think>t</think>\n\n<rethink>r</rethink> <answer> {PAYLOAD} </answer>\n"
    assert parse_response(text).format_ok


@pytest.mark.parametrize("text, stage", [
    ("", "missing_think"),
    ("no tags at all", "missing_think"),
    (tagged(think="   "), "missing_think"),
    (f"<think>a</think><think>b</think><rethink>r</rethink><answer>{PAYLOAD}</answer>", "missing_think"),
    (f"</think>t<think><rethink>r</rethink><answer>{PAYLOAD}</answer>", "missing_think"),
    (f"<think>t</think><answer>{PAYLOAD}</answer>", "missing_rethink"),
    ("<think>t</think><rethink>r</rethink>", "missing_answer"),
    (tagged(answer=" "), "missing_answer"),
    (f"<rethink>r</rethink><think>t</think><answer>{PAYLOAD}</answer>", "tag_order"),
    (f"<think>t</think><answer>{PAYLOAD}</answer><rethink>r</rethink>", "tag_order"),
    ("Sure! " + tagged(), "tag_order"),
    (tagged() + " done", "tag_order"),
    (tagged(answer="not json"), "payload_syntax"),
    (tagged(answer="[]"), "payload_syntax"),
    (tagged(answer='{"bbox_2d":[0,0,9,9],"point_2d":[4,4],"affordance":"openable"}'), "payload_syntax"),
    (tagged(answer='[{"bbox_2d":[0,0,9,9],"point_2d":[4,4]}]'), "payload_syntax"),
    (tagged(answer='[{"bbox_2d":[0,0,9,9],"point_2d":[4,4],"affordance":"openable","score":1}]'), "payload_syntax"),
    (tagged(answer='[{"bbox_2d":[0,0,9],"point_2d":[4,4],"affordance":"openable"}]'), "payload_syntax"),
    (tagged(answer='[{"bbox_2d":[0.5,0,9,9],"point_2d":[4,4],"affordance":"openable"}]'), "payload_syntax"),
    (tagged(answer='[{"bbox_2d":[true,0,9,9],"point_2d":[4,4],"affordance":"openable"}]'), "payload_syntax"),
    (tagged(answer='[{"bbox_2d":[0,0,9,9],"point_2d":[4,4],"affordance":7}]'), "payload_syntax"),
    (tagged(answer='[{"bbox_2d":[9,0,0,9],"point_2d":[4,4],"affordance":"openable"}]'), "payload_semantics"),
    (tagged(answer='[{"bbox_2d":[-1,0,9,9],"point_2d":[4,4],"affordance":"openable"}]'), "payload_semantics"),
    (tagged(answer='[{"bbox_2d":[0,0,9,9],"point_2d":[4,-4],"affordance":"openable"}]'), "payload_semantics"),
    (tagged(answer='[{"bbox_2d":[0,0,9,9],"point_2d":[4,4],"affordance":"Openable"}]'), "payload_semantics"),
    (tagged(answer='[{"bbox_2d":[0,0,9,9],"point_2d":[4,4],"affordance":"open able"}]'), "payload_semantics"),
])
def test_failure_stages(text, stage):
    report = parse_response(text)
    assert not report.format_ok
    assert report.response is None
    assert report.failure_stage == stage


def test_non_string_input():
    assert parse_response(None).failure_stage == STAGE_MISSING_THINK


def test_passed_stages():
    report = parse_response(f"<think>t</think><answer>{PAYLOAD}</answer>")
    assert report.passed(STAGE_MISSING_THINK)
    assert not report.passed(STAGE_MISSING_RETHINK)
    assert parse_response(tagged()).passed(FAILURE_STAGES[-2])


class TestStructuredResponse:
    entry = GroundingEntry(Box(0, 0, 1, 1), PointXY(1, 1), "graspable")

    @pytest.mark.parametrize("think, rethink", [
        ("", "r"),
        ("t", "   "),
        (" t", "r"),
        ("t <answer>", "r"),
    ])
    def test_invalid_text(self, think, rethink):
        with pytest.raises(InvalidResponse):
            StructuredResponse(think, rethink, (self.entry,))

    def test_requires_entries(self):
        with pytest.raises(InvalidResponse):
            StructuredResponse("t", "r", ())

    def test_invalid_label(self):
        with pytest.raises(InvalidResponse):
            GroundingEntry(Box(0, 0, 1, 1), PointXY(0, 0), "Grasp")


def _random_response(rng):
    entries = []
    for _ in range(rng.randint(1, 4)):
        x1, y1 = rng.randint(0, 50), rng.randint(0, 50)
        box = Box(x1, y1, x1 + rng.randint(0, 20), y1 + rng.randint(0, 20))
        label = rng.choice(["openable", "graspable", "pour_able", "sittable"])
        entries.append(GroundingEntry(box, PointXY(rng.randint(0, 70), rng.randint(0, 70)), label))
    words = ["handle", "lid", "the", "cup", "{", "]", '"quoted"', "été", "<b>"]
    think = " ".join(rng.choice(words) for _ in range(rng.randint(1, 6)))
    rethink = " ".join(rng.choice(words) for _ in range(rng.randint(1, 6)))
    return StructuredResponse(think, rethink, tuple(entries))


def test_render_parse_round_trip():
    rng = random.Random(11)
    for _ in range(500):
        response = _random_response(rng)
        report = parse_response(render_response(response))
        assert report.format_ok, report.detail
        assert report.response == response
        assert report.response.same_content(response)


def _mutate(text, rng):
    ops = rng.randint(1, 3)
    for _ in range(ops):
        choice = rng.random()
        if choice < 0.3 and text:
            i = rng.randrange(len(text))
            j = min(len(text), i + rng.randint(1, 12))
            text = text[:i] + text[j:]
        elif choice < 0.5:
            tag = rng.choice(["<think>", "</think>", "<rethink>", "</rethink>", "<answer>", "</answer>"])
            text = text.replace(tag, "", 1) if rng.random() < 0.5 else text + tag
        elif choice < 0.7:
            parts = text.split("\n")
            rng.shuffle(parts)
            text = "\n".join(parts)
        elif choice < 0.85:
            i = rng.randrange(len(text) + 1)
            text = text[:i] + rng.choice(['"', "[", "}", "-1", "1e400", "null", ",", "\x00", "nan"]) + text[i:]
        else:
            text = text.replace("[", "{", 1)
    return text


def test_fuzzed_inputs_never_raise():
    rng = random.Random(5)
    stages = set()
    for _ in range(100000):
        text = _mutate(render_response(_random_response(rng)), rng)
        report = parse_response(text)
        assert report.failure_stage in FAILURE_STAGES
        assert report.format_ok == (report.failure_stage == "ok")
        stages.add(report.failure_stage)
    assert len(stages) >= 5
