from __future__ import annotations

import random
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chartattrib.backends import ScriptedMock, scripted_mock
from chartattrib.captioning import CaptionSet, cell_fallback, col_fallback, row_fallback
from chartattrib.core import CellRef, Claim, DataTable
from chartattrib.gateway import Gateway, StructuredOutputExhausted
from chartattrib.retrieval import (
    PrefilterResult,
    Ranking,
    RelevanceJudgment,
    apply_permutation,
    candidate_cells,
    prefilter,
    rerank,
    retrieve_citation_cells,
)

from .conftest import mock_gateway

CLAIM = Claim(0, "A was 20 in 2021")


def captions_for(table: DataTable) -> CaptionSet:
    return CaptionSet(
        tuple(row_fallback(table, r) for r in range(table.n_rows)),
        tuple(col_fallback(table, c) for c in range(table.n_cols)),
        tuple(tuple(cell_fallback(table, CellRef(r, c)) for c in range(table.n_cols)) for r in range(table.n_rows)),
    )


def score_script(rows: dict[str, float], cols: dict[str, float]) -> list:
    return [(("TASK: score-row", f'Target row: "{h}"\n'), {"score": s}) for h, s in rows.items()] + [
        (("TASK: score-column", f'Target column: "{h}"\n'), {"score": s}) for h, s in cols.items()
    ]


# -- prefilter --------------------------------------------------------------------------


def test_prefilter_thresholding():
    t = DataTable.from_rows(["2020"], {"A": [1], "B": [2]})
    gw = mock_gateway(score_script({"A": 0.9, "B": 0.2}, {"2020": 0.5}), parallelism=3)
    pref = prefilter(t, captions_for(t), CLAIM, gw, threshold=0.3)
    assert pref.retained_rows == {0} and pref.retained_cols == {0}
    assert [(j.target, j.index, j.score) for j in pref.judgments] == [("row", 0, 0.9), ("row", 1, 0.2), ("col", 0, 0.5)]


def test_prefilter_all_below_threshold(table_2x2):
    gw = mock_gateway(score_script({"A": 0.1, "B": 0.1}, {"2020": 0.1, "2021": 0.0}))
    pref = prefilter(table_2x2, captions_for(table_2x2), CLAIM, gw, threshold=0.5)
    assert pref.retained_rows == frozenset() and pref.retained_cols == frozenset()


def test_prefilter_clamps_scores(table_2x2):
    gw = mock_gateway(score_script({"A": 1.7, "B": -0.4}, {"2020": 0.0, "2021": 0.0}))
    pref = prefilter(table_2x2, captions_for(table_2x2), CLAIM, gw, threshold=1.0)
    assert pref.judgments[0].score == 1.0 and pref.judgments[1].score == 0.0
    assert pref.retained_rows == {0}


def test_prefilter_rejects_bad_threshold(table_2x2):
    with pytest.raises(ValueError):
        prefilter(table_2x2, captions_for(table_2x2), CLAIM, mock_gateway([]), threshold=1.5)


def test_judgment_validation():
    with pytest.raises(ValueError):
        RelevanceJudgment("cell", 0, 0.5)
    with pytest.raises(ValueError):
        RelevanceJudgment("row", 0, 1.5)


def _judgments(scores: list[float]) -> list[RelevanceJudgment]:
    return [RelevanceJudgment("row" if i % 2 else "col", i // 2, s) for i, s in enumerate(scores)]


@settings(max_examples=300, deadline=None)
@given(
    st.lists(st.floats(0, 1), min_size=1, max_size=12),
    st.floats(0, 1),
    st.floats(0, 1),
)
def test_threshold_monotonicity(scores, a, b):
    t1, t2 = sorted((a, b))
    j = _judgments(scores)
    low, high = PrefilterResult.from_judgments(j, t1), PrefilterResult.from_judgments(j, t2)
    assert high.retained_rows <= low.retained_rows
    assert high.retained_cols <= low.retained_cols


# -- candidates ------------------------------------------------------------------------


def _pref(rows, cols) -> PrefilterResult:
    return PrefilterResult(frozenset(rows), frozenset(cols), (), 0.5)


def test_candidates_cartesian_product():
    t = DataTable(("a", "b"), ("x", "y", "z"), ((1, 2), (3, 4), (5, 6)))
    assert candidate_cells(_pref({0, 2}, {1}), t) == [CellRef(0, 1), CellRef(2, 1)]


def test_candidates_empty_falls_back_to_full_table(table_2x2):
    assert candidate_cells(_pref(set(), set()), table_2x2) == table_2x2.refs()


def test_candidates_one_empty_side(table_2x2):
    assert candidate_cells(_pref({0}, set()), table_2x2) == [CellRef(0, 0), CellRef(0, 1)]


# -- re-ranking ---------------------------------------------------------------------------


THREE = [CellRef(0, 0), CellRef(0, 1), CellRef(1, 0)]


def test_rerank_applies_permutation(table_2x2):
    gw = mock_gateway([("TASK: rank-cells", {"ranking": [2, 1, 3]})])
    assert rerank(THREE, captions_for(table_2x2), CLAIM, gw, top_k=2).ordered == [CellRef(0, 1), CellRef(0, 0)]


def test_rerank_repairs_duplicates_and_out_of_range(table_2x2):
    gw = mock_gateway([("TASK: rank-cells", {"ranking": [2, 2, 9]})])
    assert rerank(THREE, captions_for(table_2x2), CLAIM, gw, top_k=3).ordered == [CellRef(0, 1), CellRef(0, 0), CellRef(1, 0)]


def test_rerank_accepts_bracket_text_and_bare_list(table_2x2):
    caps = captions_for(table_2x2)
    gw = mock_gateway([("TASK: rank-cells", "[3] > [1] > [2]"), ("TASK: rank-cells", "[1, 3, 2]")])
    assert rerank(THREE, caps, CLAIM, gw, top_k=3).ordered == [CellRef(1, 0), CellRef(0, 0), CellRef(0, 1)]
    assert rerank(THREE, caps, CLAIM, gw, top_k=3).ordered == [CellRef(0, 0), CellRef(1, 0), CellRef(0, 1)]


def test_rerank_single_candidate_makes_no_call(table_2x2):
    gw = mock_gateway([])
    assert rerank([CellRef(1, 1)], captions_for(table_2x2), CLAIM, gw).ordered == [CellRef(1, 1)]
    assert gw.backend_calls == 0


def test_rerank_exhausted(table_2x2):
    gw = mock_gateway([("TASK: rank-cells", "no idea")], repeat=True)
    with pytest.raises(StructuredOutputExhausted):
        rerank(THREE, captions_for(table_2x2), CLAIM, gw)


def test_apply_permutation():
    assert apply_permutation([3, 3, 0, 1], 4) == [2, 0, 1, 3]


def test_ranking_rejects_duplicates():
    with pytest.raises(ValueError):
        Ranking([CellRef(0, 0), CellRef(0, 0)])


class ScoringBackend(ScriptedMock):
    """Ranks each window by a hidden per-cell score, as an ideal listwise ranker would."""

    _line = re.compile(r"^\[(\d+)\] cell \[(\d+), (\d+)\]", re.M)

    def __init__(self, scores: dict[CellRef, float]):
        super().__init__([])
        self.scores = scores
        self.window_sizes: list[int] = []

    def generate(self, prompt):
        listing = [(int(i), CellRef(int(r), int(c))) for i, r, c in self._line.findall(prompt.render())]
        self.window_sizes.append(len(listing))
        ranked = sorted(listing, key=lambda item: -self.scores[item[1]])
        return str([i for i, _ in ranked])


def test_sliding_windows_surface_true_top_ten():
    rng = random.Random(4)
    table = DataTable(tuple(f"c{c}" for c in range(9)), tuple(f"r{r}" for r in range(5)), ((0,) * 9,) * 5)
    cells = table.refs()
    scores = {c: rng.random() for c in cells}
    backend = ScoringBackend(scores)
    ranking = rerank(cells, captions_for(table), CLAIM, Gateway(backend, parallelism=1), top_k=10)
    assert ranking.ordered == sorted(cells, key=lambda c: -scores[c])[:10]
    # 45 candidates, back to front; the last window is clipped at the list head
    assert [(w["start"], w["end"]) for w in ranking.windows] == [(25, 45), (15, 35), (5, 25), (0, 15)]
    assert backend.window_sizes == [20, 20, 20, 15]


# -- composed retrieval ---------------------------------------------------------------------


def test_oracle_scores_return_target_cell(table_2x2):
    script = score_script({"A": 1.0, "B": 0.0}, {"2020": 0.0, "2021": 1.0})
    gw = mock_gateway(script)
    found = retrieve_citation_cells(table_2x2, captions_for(table_2x2), CLAIM, gw)
    assert found.cells == [CellRef(0, 1)]
    assert found.candidates == [CellRef(0, 1)]


def test_threshold_zero_keeps_full_table(table_2x2):
    script = score_script({"A": 0.0, "B": 0.0}, {"2020": 0.0, "2021": 0.0})
    gw = mock_gateway(script + [("TASK: rank-cells", {"ranking": [2, 1, 3, 4]})])
    found = retrieve_citation_cells(table_2x2, captions_for(table_2x2), CLAIM, gw, threshold=0.0, top_k=1)
    assert found.candidates == table_2x2.refs()
    assert found.cells == [CellRef(0, 1)]


def test_threshold_one_falls_back_and_still_ranks(table_2x2):
    script = score_script({"A": 0.99, "B": 0.5}, {"2020": 0.9, "2021": 0.8})
    backend = scripted_mock(script + [("TASK: rank-cells", {"ranking": [4]})])
    found = retrieve_citation_cells(table_2x2, captions_for(table_2x2), CLAIM, Gateway(backend), threshold=1.0, top_k=2)
    assert found.candidates == table_2x2.refs()
    assert found.cells == [CellRef(1, 1), CellRef(0, 0)]
    assert sum("TASK: rank-cells" in c for c in backend.calls) == 1


def test_trace_is_json_ready(table_2x2):
    gw = mock_gateway(score_script({"A": 1.0, "B": 0.0}, {"2020": 0.0, "2021": 1.0}))
    trace = retrieve_citation_cells(table_2x2, captions_for(table_2x2), CLAIM, gw).trace(CLAIM)
    assert trace["retained_rows"] == [0] and trace["final"] == [[0, 1]]
