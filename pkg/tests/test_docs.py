"""The interface docs are normative; these keep them in step with the code."""

import re
from dataclasses import fields
from pathlib import Path

import pytest

from edgekv.bench.report import SAMPLE_COLUMNS, SUMMARY_COLUMNS
from edgekv.config import ServiceConfig
from edgekv.core import Version
from edgekv.errors import ERROR_CODES
from edgekv.plog import encode_record
from edgekv.wire import SCHEMAS, FrameType, encode_bytes

DOCS = Path(__file__).resolve().parent.parent / "docs"


def doc(name):
    return (DOCS / name).read_text()


def code_blocks(text):
    return re.findall(r"```\n(.*?)```", text, re.S)


def hex_blocks(text):
    return [bytes.fromhex(b) for b in code_blocks(text) if re.fullmatch(r"[0-9a-f\s]+", b)]


def test_wire_frame_tables_match_schemas():
    text = doc("wire.md")
    rows = re.findall(r"^\| (0x[0-9a-f]{2}) \| (\w+)\s*\| (.*?)\|", text, re.M)
    assert {int(c, 16) for c, _, _ in rows} == {int(t) for t in FrameType}
    for code, name, body in rows:
        ft = FrameType(int(code, 16))
        assert ft.name == name
        documented = re.findall(r"(\w+):([A-Za-z*]+)", body)
        assert documented == SCHEMAS[ft], ft.name


def test_wire_hex_examples():
    put, error, hb = hex_blocks(doc("wire.md"))
    assert put == encode_bytes(FrameType.PUT, 7, 1000, "/v/a", b"hi")
    assert error == encode_bytes(FrameType.ERROR, 7, 3, "/v/a")
    assert hb == encode_bytes(FrameType.HEARTBEAT, 0, 2, 1, [], [(0, 5, 5)])


def test_log_record_example():
    (rec,) = hex_blocks(doc("log_format.md"))
    assert rec == b"".join(encode_record(b"/p/a", b"hi", Version(0, 1, 1000), -1))


def test_error_table_lists_every_code():
    rows = re.findall(r"^\| (\d+)\s*\| `(\w+)`", doc("errors.md"), re.M)
    assert {int(c): n for c, n in rows} == {c: cls.__name__ for c, cls in ERROR_CODES.items()}


def test_config_defaults_match():
    text = doc("config.md")
    rows = dict(re.findall(r"^\| `(\w+)`\s*\|[^|]*\|\s*([^|]+?)\s*\|", text, re.M))
    cfg = ServiceConfig.from_dict({"node_id": 1, "nodes": [{"id": 1, "port": 1}]})
    for f in fields(ServiceConfig):
        if f.name in ("node_id", "nodes"):
            continue
        raw = rows[f.name].strip("`")
        expect = getattr(cfg, f.name)
        if f.name == "pools":
            assert raw == "[]" and expect == []
            continue
        value = {"null": None, "true": True, "false": False, "[]": []}.get(raw, raw)
        if isinstance(value, str):
            value = value.strip('"')
            value = int(value) if value.isdigit() else value
        assert value == expect, f.name


@pytest.mark.parametrize("columns, section", [(SAMPLE_COLUMNS, "## Samples"), (SUMMARY_COLUMNS, "## Summary")])
def test_bench_csv_columns_documented(columns, section):
    text = doc("bench_csv.md")
    part = text.split(section, 1)[1].split("\n## ", 1)[0]
    named = set(re.findall(r"`(\w+)`", part))
    components = set(re.findall(r"^\| `(\w+_us)`", text, re.M))
    missing = [c for c in columns if c not in named and c not in components]
    assert not missing
