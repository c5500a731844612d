import threading
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from abstain_decode.backend import (
    BackendCapabilities,
    Rule,
    TableLM,
    Vocabulary,
    load_table_lm,
    table_lm_from_dict,
    table_lm_to_dict,
)
from abstain_decode.dist import softmax
from abstain_decode.engine import Decoder, Strategy, StrategyConfig
from abstain_decode.errors import CapacityError, InvalidArgumentError, ShapeError, TokenizationError
from abstain_decode.judge import EvalInstance
from abstain_decode.prompts import RenderedPrompt, TemplateKind, render

from conftest import random_table_world


def prompt(text: str, kind: TemplateKind = TemplateKind.CONTEXTUAL) -> RenderedPrompt:
    return RenderedPrompt(text, kind)


class TestVocabulary:
    vocab = Vocabulary(["</s>", "un", "known", " ", "unknown!", "k"], 0)

    def test_empty(self):
        assert self.vocab.tokenize("") == []

    def test_longest_match(self):
        v = Vocabulary(["un", "known"], 0 if False else 1)
        assert Vocabulary(["</s>", "un", "known"], 0).tokenize("unknown") == [1, 2]
        assert v.tokenize("un") == [0]

    def test_greedy_prefers_longer(self):
        assert self.vocab.tokenize("unknown! un") == [4, 3, 1]

    def test_oov_reports_span(self):
        with pytest.raises(TokenizationError) as err:
            self.vocab.tokenize("un??known")
        assert (err.value.start, err.value.end) == (2, 4)
        assert "'??'" in str(err.value)

    @given(st.lists(st.sampled_from([1, 2, 3, 4, 5]), max_size=30))
    def test_round_trip(self, ids):
        text = self.vocab.detokenize(ids)
        assert self.vocab.detokenize(self.vocab.tokenize(text)) == text

    def test_invalid(self):
        with pytest.raises(InvalidArgumentError):
            Vocabulary(["a", "a"], 0)
        with pytest.raises(InvalidArgumentError):
            Vocabulary(["a"], 3)


class TestTableLM:
    def test_default_rule(self):
        lm = TableLM(Vocabulary(["</s>", "x"], 0), [0, 0])
        np.testing.assert_array_equal(lm.logits(prompt("anything")), [0, 0])

    def test_rule_lookup_and_priority(self):
        vocab = Vocabulary(["</s>", "a", "b"], 0)
        lm = TableLM(vocab, [0, 0, 0], [
            Rule(np.array([5.0, 0, 0]), None, ("Q1-prefix",)),
            Rule(np.array([0, 9.0, 0]), None, ("Q1",)),
        ])
        np.testing.assert_array_equal(lm.logits(prompt("... Q1-prefix ...")), [5, 0, 0])
        np.testing.assert_array_equal(lm.logits(prompt("... Q1 ...")), [0, 9, 0])

    def test_kind_and_suffix_keys(self):
        vocab = Vocabulary(["</s>", "a"], 0)
        lm = TableLM(vocab, [0, 0], [
            Rule(np.array([1.0, 2.0]), TemplateKind.PARAMETRIC, (), "Answer:"),
        ])
        assert lm.logits(prompt("Answer:", TemplateKind.PARAMETRIC))[1] == 2.0
        assert lm.logits(prompt("Answer:", TemplateKind.CONTEXTUAL))[1] == 0.0
        assert lm.logits(prompt("Answer: a", TemplateKind.PARAMETRIC))[1] == 0.0

    def test_deterministic_and_isolated(self):
        lm = random_table_world(3)
        p = render(TemplateKind.CONTEXTUAL, context="c", question="q")
        a = lm.logits(p)
        a[:] = 99.0  # mutating a result must not leak into the table
        np.testing.assert_array_equal(lm.logits(p), lm.logits(p))
        assert not np.any(lm.logits(p) == 99.0)

    def test_wrong_length(self):
        with pytest.raises(ShapeError):
            TableLM(Vocabulary(["</s>", "a"], 0), [0, 0, 0])

    def test_capacity(self):
        lm = TableLM(Vocabulary(["</s>", "a"], 0), [0, 0], capabilities=BackendCapabilities(max_context_tokens=5))
        lm.logits(prompt("12345"))
        with pytest.raises(CapacityError):
            lm.logits(prompt("123456"))

    def test_world_file_round_trip(self, tmp_path):
        lm = random_table_world(11)
        path = tmp_path / "w.json"
        import json

        path.write_text(json.dumps(table_lm_to_dict(lm)))
        back = load_table_lm(path)
        for r1, r2 in zip(lm.rules, back.rules):
            np.testing.assert_array_equal(r1.logits, r2.logits)
            assert (r1.kind, r1.contains, r1.endswith) == (r2.kind, r2.contains, r2.endswith)
        np.testing.assert_array_equal(lm.default, back.default)

    def test_sparse_world_spec(self):
        lm = table_lm_from_dict({
            "tokens": ["</s>", " yes", " no"],
            "eos": "</s>",
            "default": {"fill": 0.0, "set": {"</s>": 3.0}},
            "rules": [{"kind": "parametric", "contains": "Q", "logits": {"fill": -1.0, "set": {" yes": 4.0}}}],
        })
        np.testing.assert_array_equal(lm.logits(prompt("Q", TemplateKind.PARAMETRIC)), [-1.0, 4.0, -1.0])
        np.testing.assert_array_equal(lm.logits(prompt("Q")), [3.0, 0.0, 0.0])


def gold_path_lm() -> TableLM:
    vocab = Vocabulary(["</s>", " Paris", " London"], 0)
    return TableLM(vocab, [30.0, 0, 0], [Rule(np.array([0, 30.0, 0]), None, (), "Answer:")])


class TestSampling:
    p = render(TemplateKind.PARAMETRIC, question="Capital of France?")

    def test_one_hot_gold_path(self):
        lm = gold_path_lm()
        for seed in range(20):
            assert lm.sample_sequence(self.p, 1.0, 8, seed) == " Paris"

    def test_greedy_limit(self):
        lm = random_table_world(5)
        greedy = lm.sample_sequence(self.p, 0.0, 8, seed=0)
        assert greedy == lm.sample_sequence(self.p, 0.0, 8, seed=123)
        # greedy equals argmax at every step
        text, ids = "", []
        for _ in range(8):
            tok = int(np.argmax(lm.logits(self.p.extend(text))))
            if tok == lm.eos_id:
                break
            ids.append(tok)
            text = lm.detokenize(ids)
        assert greedy == text

    def test_seeded_determinism(self):
        lm = random_table_world(5)
        assert lm.sample_sequence(self.p, 1.0, 8, 42) == lm.sample_sequence(self.p, 1.0, 8, 42)
        assert len({lm.sample_sequence(self.p, 1.0, 8, s) for s in range(30)}) > 1

    def test_max_tokens_bound(self):
        vocab = Vocabulary(["</s>", "a"], 0)
        lm = TableLM(vocab, [-50.0, 0.0])
        assert lm.sample_sequence(self.p, 1.0, 5, 0) == "aaaaa"
        with pytest.raises(InvalidArgumentError):
            lm.sample_sequence(self.p, 1.0, 0, 0)

    @pytest.mark.parametrize("temperature", [1.0, 2.5])
    def test_empirical_distribution_matches_softmax(self, temperature):
        vocab = Vocabulary(["</s>", "a", "b", "c", "d"], 0)
        logits = np.array([0.3, 1.0, -0.5, 0.0, 0.7])
        lm = TableLM(vocab, logits)
        counts = np.zeros(5)
        for seed in range(10_000):
            out = lm.sample_sequence(self.p, temperature, 1, seed)
            counts[vocab.tokenize(out)[0] if out else 0] += 1
        expected = softmax(logits, temperature) * counts.sum()
        assert chisquare(counts, expected).pvalue > 0.01


class OverlapDetector(TableLM):
    """Counts concurrently active logits calls."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.active = 0
        self.max_active = 0
        self._guard = threading.Lock()

    def logits(self, p):
        with self._guard:
            self.active += 1
            self.max_active = max(self.max_active, self.active)
        time.sleep(0.0005)
        try:
            return super().logits(p)
        finally:
            with self._guard:
                self.active -= 1


def _detector(concurrent_safe: bool) -> OverlapDetector:
    base = random_table_world(2)
    return OverlapDetector(base.vocab, base.default, base.rules, BackendCapabilities(concurrent_safe=concurrent_safe))


def test_non_concurrent_backend_is_never_overlapped():
    lm = _detector(concurrent_safe=False)
    instances = [EvalInstance(f"i{k}", f"q{k}", f"c{k}", ("g",), True) for k in range(16)]
    Decoder(lm, StrategyConfig(Strategy.CDA, max_tokens=4)).decode_all(instances, jobs=8)
    assert lm.max_active == 1


def test_concurrent_backend_gets_parallel_calls_and_same_results():
    lm = _detector(concurrent_safe=True)
    instances = [EvalInstance(f"i{k}", f"q{k}", f"c{k}", ("g",), True) for k in range(16)]
    dec = Decoder(lm, StrategyConfig(Strategy.CDA, max_tokens=4))
    parallel = dec.decode_all(instances, jobs=8)
    serial = dec.decode_all(instances, jobs=1)
    assert [p.tokens for p in parallel] == [p.tokens for p in serial]
    assert lm.max_active > 1
