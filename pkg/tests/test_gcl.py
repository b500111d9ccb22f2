import pytest
from hypothesis import given, settings, strategies as st

from tsnsched.gcl import (GateControlList, GateEvent, GateOverlapError, GclBudgetError, GclError, be_gaps,
                          export_gcl, load_gcl, parse_port, port_name, total_length)


def test_insert_keeps_order_and_counts():
    g = GateControlList("BR1->BR2", 10_000, 8)
    g.insert(GateEvent(5000, 5400, 3)).insert(GateEvent(100, 500, 3))
    assert [e.open for e in g] == [100, 5000]
    assert g.length == 2


def test_back_to_back_windows_are_legal():
    g = GateControlList("p->q", 1000, 8)
    g.insert(GateEvent(100, 400, 3))
    g.insert(GateEvent(400, 800, 2))
    assert len(g) == 2


def test_overlap_rejected_and_list_unchanged():
    g = GateControlList("p->q", 1000, 8, [GateEvent(100, 400, 3)])
    with pytest.raises(GateOverlapError):
        g.insert(GateEvent(399, 500, 2))
    assert len(g) == 1


def test_budget():
    g = GateControlList("p->q", 1000, 1, [GateEvent(0, 10, 3)])
    with pytest.raises(GclBudgetError):
        g.insert(GateEvent(20, 30, 3))


@pytest.mark.parametrize("ev", [GateEvent(-1, 10, 3), GateEvent(990, 1001, 3), GateEvent(50, 50, 3)])
def test_out_of_range_events(ev):
    with pytest.raises(GclError):
        GateControlList("p->q", 1000).insert(ev)


def test_be_gaps():
    evs = [GateEvent(100, 200, 3), GateEvent(200, 300, 2), GateEvent(500, 600, 3)]
    assert be_gaps(evs, 1000) == [(0, 100), (300, 500), (600, 1000)]
    assert be_gaps([], 1000) == [(0, 1000)]
    assert be_gaps([GateEvent(0, 1000, 3)], 1000) == []


def test_csv_round_trip():
    g1 = GateControlList("BR1->BR2", 4000, 8, [GateEvent(10, 60, 3, 0), GateEvent(2010, 2060, 3, 1)])
    g2 = GateControlList("BR2->LR1", 4000, 8, [GateEvent(500, 900, 2, 0)])
    text = export_gcl({g.port: g for g in (g1, g2)})
    assert text.splitlines()[0] == "port,queue,phase,open_ns,close_ns"
    back = load_gcl(text, 4000, 8)
    assert [e.open for e in back["BR1->BR2"]] == [10, 2010]
    assert export_gcl(back) == text
    assert total_length(back) == 2


def test_load_gcl_reports_line():
    with pytest.raises(GclError, match="line 3"):
        load_gcl("port,queue,phase,open_ns,close_ns\na->b,3,0,0,10\na->b,x,0,20,30\n", 100)


def test_port_names():
    assert port_name(("BR1", "BR2")) == "BR1->BR2"
    assert parse_port("BR1->BR2") == ("BR1", "BR2")
    with pytest.raises(GclError):
        parse_port("BR1")


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 990), st.integers(1, 60)), max_size=40))
def test_random_inserts_stay_disjoint(ops):
    """Accepted events are pairwise disjoint and rejections match a brute-force check."""
    g = GateControlList("p->q", 1000, 128)
    accepted = []
    for start, length in ops:
        ev = GateEvent(start, min(start + length, 1000), 3)
        clash = any(ev.open < a.close and a.open < ev.close for a in accepted)
        if clash:
            with pytest.raises(GateOverlapError):
                g.insert(ev)
        else:
            g.insert(ev)
            accepted.append(ev)
    evs = list(g)
    for i, a in enumerate(evs):
        for b in evs[i + 1:]:
            assert a.close <= b.open or b.close <= a.open
