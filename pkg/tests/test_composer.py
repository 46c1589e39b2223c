"""Composition transformations: golden renders, window algebra, budgets."""

import random

import pytest
from hypothesis import given, settings, strategies as st

import golden_fixtures as golden
from agentsearch.composer import (
    CompositionConfig,
    MissingGlobalQuestion,
    MissingObservation,
    MissingReasoning,
    NotSearchTurn,
    compose,
    fill,
    load_template,
    render_retrieval_prompt,
)
from agentsearch.model import (
    Answer,
    RetrievalResult,
    Search,
    Transformation,
    Turn,
    Visit,
)
from agentsearch.retrieval import WhitespaceTokenizer

T = Transformation


def search_turn(i, reasoning, query, snippets=()):
    results = tuple(RetrievalResult(doc_id=f"d{i}{j}", score=1.0 / (j + 1), snippet=s)
                    for j, s in enumerate(snippets))
    return Turn(index=i, reasoning=reasoning, action=Search(query), observation=results)


def cfg(transformation, **kw):
    return CompositionConfig(transformation=transformation, **kw)


def render(history, config):
    return render_retrieval_prompt(compose(history, config))


class TestFill:
    def test_known_placeholders(self):
        assert fill("a {x} b {y}", x="1", y="2") == "a 1 b 2"

    def test_unknown_placeholders_pass_through(self):
        assert fill("{x} {unknown}", x="1") == "1 {unknown}"

    def test_literal_braces_survive(self):
        assert fill("{\n{x}\n}", x="v") == "{\nv\n}"

    def test_values_are_not_rescanned(self):
        assert fill("{x}", x="{y}") == "{y}"


class TestGoldenRenders:
    def test_current_reasoning_matches_pinned_bytes(self):
        history = [search_turn(1, "R", "Q")]
        assert render(history, cfg(T.CURRENT_REASONING)) == golden.MAIN_REASONING_QUERY

    def test_none_matches_pinned_bytes(self):
        history = [search_turn(1, "R", "Q")]
        assert render(history, cfg(T.NONE)) == golden.NONE_QUERY_ONLY

    def test_global_question_matches_pinned_bytes(self):
        history = [search_turn(1, "R", "Q")]
        out = render(history, cfg(T.GLOBAL_QUESTION, global_question="G"))
        assert out == golden.GLOBAL_QUESTION

    def test_prior_queries_three_turns(self):
        history = [search_turn(1, "r1", "q1"), search_turn(2, "r2", "q2"),
                   search_turn(3, "r3", "q3")]
        assert render(history, cfg(T.PRIOR_QUERIES)) == golden.PRIOR_QUERIES_3_TURNS

    def test_queries_reasonings_two_turns(self):
        history = [search_turn(1, "r1", "q1"), search_turn(2, "r2", "q2")]
        out = render(history, cfg(T.PRIOR_QUERIES_REASONINGS))
        assert out == golden.QUERIES_REASONINGS_2_TURNS

    def test_docs_variant_two_turns(self):
        history = [search_turn(1, "r1", "q1", snippets=("snippet one", "snippet two")),
                   search_turn(2, "r2", "q2")]
        out = render(history, cfg(T.PRIOR_QUERIES_REASONINGS_DOCS))
        assert out == golden.ALL_WITH_DOCS_2_TURNS


class TestComposeContracts:
    def test_none_body_is_raw_query(self):
        composed = compose([search_turn(1, "r", "backroom studio early 2010s euphoric")],
                           cfg(T.NONE))
        assert composed.body == "backroom studio early 2010s euphoric"

    def test_requires_search_turn(self):
        answer = Turn(index=1, reasoning="r", action=Answer("a"))
        with pytest.raises(NotSearchTurn):
            compose([answer], cfg(T.NONE))
        with pytest.raises(NotSearchTurn):
            compose([], cfg(T.NONE))

    def test_missing_reasoning(self):
        with pytest.raises(MissingReasoning):
            compose([search_turn(1, "", "q")], cfg(T.CURRENT_REASONING))

    def test_missing_global_question(self):
        with pytest.raises(MissingGlobalQuestion):
            compose([search_turn(1, "r", "q")], cfg(T.GLOBAL_QUESTION))

    def test_docs_variant_needs_observations(self):
        pending = Turn(index=1, reasoning="r1", action=Search("q1"))  # no observation
        history = [pending, search_turn(2, "r2", "q2")]
        with pytest.raises(MissingObservation):
            compose(history, cfg(T.PRIOR_QUERIES_REASONINGS_DOCS))

    def test_compose_is_pure(self):
        history = [search_turn(1, "r1", "q1"), search_turn(2, "r2", "q2")]
        config = cfg(T.PRIOR_QUERIES_REASONINGS)
        assert compose(history, config) == compose(history, config)

    def test_visit_turns_are_skipped_in_history(self):
        visit = Turn(index=2, reasoning="open it", action=Visit("d1"), observation="text")
        history = [search_turn(1, "r1", "q1"), visit,
                   Turn(index=3, reasoning="r3", action=Search("q3"),
                        observation=())]
        out = compose(history, cfg(T.PRIOR_QUERIES))
        assert "Turn 1: q1" in out.body
        assert "Turn 2" not in out.body


def random_history(rng: random.Random, turns: int):
    history = []
    for i in range(1, turns + 1):
        reasoning = f"reasoning {rng.randint(0, 10 ** 6)} about topic {i}"
        query = f"query {rng.randint(0, 10 ** 6)} part {i}"
        history.append(search_turn(i, reasoning, query,
                                   snippets=tuple(f"snip {i}-{j}" for j in range(2))))
    return history


class TestWindowAlgebra:
    def test_window_one_equals_current_reasoning_everywhere(self):
        rng = random.Random(0)
        for _ in range(50):
            history = random_history(rng, rng.randint(1, 8))
            assert (render(history, cfg(T.WINDOW_K, window_k=1))
                    == render(history, cfg(T.CURRENT_REASONING)))

    def test_window_at_least_t_equals_full_reasonings(self):
        rng = random.Random(1)
        for _ in range(50):
            t = rng.randint(1, 8)
            history = random_history(rng, t)
            k = rng.choice([t, t + 1, t + 5, "all"])
            assert (render(history, cfg(T.WINDOW_K, window_k=k))
                    == render(history, cfg(T.PRIOR_QUERIES_REASONINGS)))

    def test_turn_one_any_window_equals_current_reasoning(self):
        history = random_history(random.Random(2), 1)
        out = render(history, cfg(T.WINDOW_K, window_k=5))
        assert out == render(history, cfg(T.CURRENT_REASONING))

    def test_window_renumbers_from_one(self):
        history = random_history(random.Random(3), 5)
        composed = compose(history, cfg(T.WINDOW_K, window_k=3))
        assert "Turn 1: reasoning" in composed.body
        assert "Turn 3" not in composed.body  # only two prior turns in the window
        assert history[2].reasoning in composed.body  # global turn 3 relabeled as 1


class TestDocsBudget:
    def test_never_exceeds_budget_and_keeps_query(self):
        rng = random.Random(4)
        for _ in range(30):
            history = random_history(rng, rng.randint(1, 6))
            budget = rng.randint(30, 120)
            composed = compose(history, cfg(T.PRIOR_QUERIES_REASONINGS_DOCS,
                                            history_token_budget=budget))
            assert WhitespaceTokenizer().count(composed.body) <= budget
            assert history[-1].action.query in composed.body

    def test_drops_whole_oldest_turns_first(self):
        history = [search_turn(1, "old reasoning", "old query", snippets=("x " * 50,)),
                   search_turn(2, "new reasoning", "new query", snippets=("y",)),
                   search_turn(3, "now", "current")]
        composed = compose(history, cfg(T.PRIOR_QUERIES_REASONINGS_DOCS,
                                        history_token_budget=30))
        assert "old query" not in composed.body
        assert "new query" in composed.body
        assert composed.body.count("Turn 1:") == 1  # survivor renumbered

    def test_minimal_body_when_budget_tiny(self):
        history = [search_turn(1, "r", "q", snippets=("s",)), search_turn(2, "r2", "long current query")]
        composed = compose(history, cfg(T.PRIOR_QUERIES_REASONINGS_DOCS,
                                        history_token_budget=1))
        assert "long current query" in composed.body
        assert "Turn 1" not in composed.body


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=1, max_value=7), st.integers(min_value=1, max_value=9),
       st.randoms(use_true_random=False))
def test_window_algebra_property(t, k, rng):
    history = random_history(rng, t)
    window = render(history, cfg(T.WINDOW_K, window_k=k))
    if k == 1:
        assert window == render(history, cfg(T.CURRENT_REASONING))
    if k >= t:
        assert window == render(history, cfg(T.PRIOR_QUERIES_REASONINGS))


class TestTemplateResources:
    def test_all_templates_parse(self):
        for name in ("retrieval_none", "retrieval_current_reasoning",
                     "retrieval_global_question", "retrieval_prior_queries",
                     "retrieval_prior_queries_reasonings",
                     "retrieval_prior_queries_reasonings_docs",
                     "oracle_rerank", "listwise_rerank", "atomic_clues",
                     "atomic_clues_assignment", "noise_step1", "noise_step2",
                     "judge_default"):
            sections = load_template(name)
            assert sections, name
