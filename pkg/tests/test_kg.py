import itertools

import pytest
from hypothesis import given, settings, strategies as st

from adaptloop.kg import (KgEdge, KgError, KgNode, KgStore, TableConflictError,
                          TruthTable, WILDCARD, expand_row, printer_demo_graph)


def _store_two_nodes(cause_alpha=("X", "Y"), e1=("a", "b"), e2=("p", "q")):
    kg = KgStore()
    kg.upsert_node(KgNode("cause", "Cause", list(cause_alpha)))
    kg.upsert_node(KgNode("e1", "Effect 1", list(e1)))
    kg.upsert_node(KgNode("e2", "Effect 2", list(e2)))
    return kg


def test_node_validation():
    with pytest.raises(KgError):
        KgNode("", "x", ["a"]).validate()
    with pytest.raises(KgError):
        KgNode("n", "x", []).validate()
    with pytest.raises(KgError):
        KgNode("n", "x", ["a", "a"]).validate()


def test_edge_rejects_self_loop_and_unknown_endpoints():
    kg = _store_two_nodes()
    with pytest.raises(KgError):
        kg.upsert_edge(KgEdge("loop", "cause", "cause"))
    with pytest.raises(KgError):
        kg.upsert_edge(KgEdge("dangling", "cause", "ghost"))
    kg.upsert_edge(KgEdge("ok", "cause", "e1"))


def test_wildcard_overlap_is_a_conflict():
    kg = _store_two_nodes()
    table = TruthTable(
        table_id="t", cause_node="cause", effect_nodes=["e1", "e2"],
        rows=[((WILDCARD, "p"), "X"),
              (("b", WILDCARD), "Y")])  # both cover ("b","p")
    conflicts = kg.validate_table(table)
    assert conflicts
    with pytest.raises(TableConflictError):
        kg.put_truth_table(table)


def test_duplicate_rows_same_cause_are_fine():
    kg = _store_two_nodes()
    kg.put_truth_table(TruthTable(
        table_id="t", cause_node="cause", effect_nodes=["e1", "e2"],
        rows=[((WILDCARD, "p"), "X"), (("b", WILDCARD), "X")]))


@pytest.mark.parametrize("rows,fragment", [
    ([(("a",), "X")], "arity"),
    ([(("a", "zzz"), "X")], "alphabet"),
    ([(("a", "p"), "nope")], "alphabet"),
])
def test_symbol_and_arity_conflicts(rows, fragment):
    kg = _store_two_nodes()
    conflicts = kg.validate_table(TruthTable(
        table_id="t", cause_node="cause", effect_nodes=["e1", "e2"],
        rows=rows))
    assert any(fragment in c for c in conflicts)


def _oracle_is_function(rows, effect_alphas):
    """Exhaustively expand every row; conflict iff a tuple maps twice."""
    seen = {}
    for tup, cause in rows:
        choices = [alpha if s == WILDCARD else [s]
                   for s, alpha in zip(tup, effect_alphas)]
        for combo in itertools.product(*choices):
            if seen.setdefault(combo, cause) != cause:
                return False
    return True


@settings(max_examples=200, deadline=None)
@given(data=st.data())
def test_validate_table_matches_exhaustive_expansion(data):
    n_effects = data.draw(st.integers(1, 3))
    alphas = [data.draw(st.lists(st.sampled_from(["a", "b", "c", "d"]),
                                 min_size=1, max_size=3, unique=True))
              for _ in range(n_effects)]
    kg = KgStore()
    kg.upsert_node(KgNode("cause", "Cause", ["X", "Y", "Z"]))
    names = []
    for i, alpha in enumerate(alphas):
        name = f"e{i}"
        kg.upsert_node(KgNode(name, name, alpha))
        names.append(name)
    rows = data.draw(st.lists(
        st.tuples(
            st.tuples(*[st.sampled_from(list(a) + [WILDCARD])
                        for a in alphas]),
            st.sampled_from(["X", "Y", "Z"])),
        min_size=1, max_size=5))
    table = TruthTable(table_id="t", cause_node="cause",
                       effect_nodes=names, rows=rows)
    conflicts = kg.validate_table(table)
    assert (not conflicts) == _oracle_is_function(rows, alphas)


def test_expand_row_covers_full_product():
    alphas = [["a", "b"], ["p", "q", "r"]]
    assert set(expand_row((WILDCARD, WILDCARD), alphas)) == set(
        itertools.product(*alphas))
    assert expand_row(("a", "p"), alphas) == [("a", "p")]


def test_export_import_isomorphism(tmp_path):
    kg = _store_two_nodes()
    kg.upsert_edge(KgEdge("c->1", "cause", "e1"))
    kg.put_truth_table(TruthTable(
        table_id="t", cause_node="cause", effect_nodes=["e1"],
        rows=[(("a",), "X"), (("b",), "Y")], max_wait_ns=7))

    other = KgStore()
    other.import_json(kg.export_json())
    assert other.export_json() == kg.export_json()

    # and via the on-disk path
    path = tmp_path / "kg.json"
    kg.save(path)
    reloaded = KgStore(persist_path=path)
    assert reloaded.export_json() == kg.export_json()


def test_causal_pair_listing_and_lookup():
    kg = _store_two_nodes()
    kg.put_truth_table(TruthTable(
        table_id="t1", cause_node="cause", effect_nodes=["e1"],
        rows=[(("a",), "X")]))
    kg.put_truth_table(TruthTable(
        table_id="t2", cause_node="cause", effect_nodes=["e1", "e2"],
        rows=[(("a", "p"), "X")]))
    pairs = kg.list_causal_pairs()
    assert ("cause", ("e1",), "t1") in pairs
    assert ("cause", ("e1", "e2"), "t2") in pairs
    assert kg.get_truth_table("cause", ["e1", "e2"]).table_id == "t2"
    with pytest.raises(KgError):
        kg.get_truth_table("cause", ["e2"])


def test_demo_graph_is_well_formed():
    kg = KgStore()
    kg.import_json(printer_demo_graph())
    table = kg.get_table("printer_power")
    assert not kg.validate_table(table)
