import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wvmux.core import PhotonHit
from wvmux.events import (
    HEADER,
    EventFormatError,
    EventTable,
    atomic_write,
    meta_path,
    read_events,
    read_keyvalue,
    write_events,
    write_keyvalue,
)

hits = st.lists(
    st.builds(
        PhotonHit,
        shot_id=st.integers(0, 10**9),
        arm=st.sampled_from(["w", "r"]),
        basis_index=st.integers(0, 3),
        port=st.sampled_from([1, -1]),
        ix=st.integers(0, 39),
        iy=st.integers(0, 35),
        storage_time=st.floats(0, 1e3, allow_nan=False, allow_infinity=False),
    ),
    max_size=40,
)


@settings(max_examples=40, deadline=None)
@given(hits)
def test_roundtrip_is_lossless(tmp_path_factory, hs):
    path = tmp_path_factory.mktemp("ev") / "run.csv"
    table = EventTable.from_hits(hs).sorted()
    write_events(path, table)
    back = read_events(path, 40, 36)
    assert back.equals(table)
    assert back.to_hits() == table.to_hits()


def test_gzip_roundtrip_and_stable_bytes(tmp_path):
    table = EventTable([0, 0, 3], [0, 1, 1], [0, 0, 1], [1, -1, 1], [1, 2, 3], [4, 5, 6], [0.3, 0.3, 20.0])
    a, b = tmp_path / "a.csv.gz", tmp_path / "b.csv.gz"
    write_events(a, table)
    write_events(b, table)
    assert a.read_bytes() == b.read_bytes()
    assert read_events(a).equals(table)


def test_empty_table_writes_header_only(tmp_path):
    p = tmp_path / "e.csv"
    write_events(p, EventTable.empty())
    assert p.read_text() == HEADER + "\n"
    assert len(read_events(p)) == 0


@pytest.mark.parametrize(
    "body, line, fragment",
    [
        ("0,w,0,+,1,1,0.0\n0,x,0,+,1,1,0.0\n", 3, "arm"),
        ("0,w,0,*,1,1,0.0\n", 2, "port"),
        ("0,w,0,+,1,1,-1\n", 2, "t_us"),
        ("0,w,0,+,a,1,0\n", 2, "ix"),
        ("1,w,0,+,1,1,0\n0,w,0,+,1,1,0\n", 3, "sorted"),
        ("0,r,0,+,1,1,0\n0,w,0,+,1,1,0\n", 3, "sorted"),
        ("0,w,0,+,99,1,0\n", 2, "outside"),
    ],
)
def test_schema_violations_report_first_line(tmp_path, body, line, fragment):
    p = tmp_path / "bad.csv"
    p.write_text(HEADER + "\n" + body)
    with pytest.raises(EventFormatError) as exc:
        read_events(p, 40, 36)
    assert exc.value.line == line
    assert fragment in str(exc.value)


def test_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("shot,arm\n")
    with pytest.raises(EventFormatError) as exc:
        read_events(p)
    assert exc.value.line == 1


def test_meta_path_and_keyvalue(tmp_path):
    assert meta_path(tmp_path / "run.csv.gz") == tmp_path / "run.meta"
    assert meta_path(tmp_path / "run.csv") == tmp_path / "run.meta"
    p = tmp_path / "x.meta"
    write_keyvalue(p, {"seed": 1, "config.sim.times": "0.3, 20.0"})
    assert read_keyvalue(p) == {"seed": "1", "config.sim.times": "0.3, 20.0"}


def test_atomic_write_removes_partial_output(tmp_path):
    target = tmp_path / "out.csv"

    def failing(tmp):
        tmp.write_text("partial")
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        atomic_write(target, failing)
    assert list(tmp_path.iterdir()) == []


def test_sorted_orders_by_shot_then_arm():
    t = EventTable([2, 1, 1], [0, 1, 0], [0, 0, 0], [1, 1, 1], [0, 0, 0], [0, 0, 0], [0, 0, 0])
    s = t.sorted()
    assert s.shot.tolist() == [1, 1, 2] and s.arm.tolist() == [0, 1, 0]
    assert np.all(np.diff(s.shot * 2 + s.arm) >= 0)
