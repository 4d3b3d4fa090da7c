import numpy as np
import pytest

from vcflow.content import frame_features, kmeans_fit
from vcflow.corpus import Corpus, build_corpus
from vcflow.evaluate import EvalError, EvalReport, content_match, conversion_pairs, fit_envelope_model, parse_steps, pearson


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval_corpus")
    build_corpus(20, 3, seed=1, out_dir=root)
    return Corpus.load(root)


@pytest.fixture(scope="module")
def kmeans(corpus):
    feats = np.concatenate([frame_features(corpus.waveform(e)) for e in corpus.split("train")[:30]])
    return kmeans_fit(feats, 16, seed=0)


class TestMetrics:
    def test_identity_content_match(self, corpus, kmeans):
        w = corpus.waveform(corpus.entries[0])
        assert content_match(w, w, kmeans) == 1.0

    def test_different_audio_lower_match(self, corpus, kmeans):
        a, b = corpus.waveform(corpus.entries[0]), corpus.waveform(corpus.entries[7])
        assert content_match(a, b, kmeans) < 1.0

    def test_pearson(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
        assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
        assert pearson([1, 1, 1], [1, 2, 3]) == 0.0
        assert pearson([1], [2]) == 0.0

    def test_envelope_classifies_ground_truth(self, corpus, kmeans):
        train = {s: [corpus.waveform(e) for e in es] for s, es in corpus.by_speaker("train").items()}
        env = fit_envelope_model(train, kmeans)
        test = corpus.by_speaker("test")
        env.set_centroids({s: [corpus.waveform(e) for e in es] for s, es in test.items()})
        hits = [env.classify(corpus.waveform(e)) == s for s, es in test.items() for e in es]
        assert np.mean(hits) >= 0.9

    def test_classify_without_centroids(self, corpus, kmeans):
        env = fit_envelope_model({"a": [corpus.waveform(corpus.entries[0])]}, kmeans)
        with pytest.raises(EvalError):
            env.classify(corpus.waveform(corpus.entries[0]))


class TestPairs:
    def test_cross_speaker_and_deterministic(self, corpus):
        pairs = conversion_pairs(corpus, 25, seed=4)
        assert pairs == conversion_pairs(corpus, 25, seed=4)
        test = set(corpus.speakers_in("test"))
        for src, pr in pairs:
            assert src.speaker != pr.speaker and {src.speaker, pr.speaker} <= test

    def test_empty_test_set(self, corpus):
        empty = Corpus(corpus.root, [e for e in corpus.entries if e.split != "test"], corpus.speakers)
        with pytest.raises(EvalError, match="empty test set"):
            conversion_pairs(empty, 5, 0)

    def test_single_test_speaker(self, corpus):
        one = corpus.speakers_in("test")[0]
        sub = Corpus(corpus.root, [e for e in corpus.entries if e.split != "test" or e.speaker == one], corpus.speakers)
        with pytest.raises(EvalError, match="two test speakers"):
            conversion_pairs(sub, 5, 0)


class TestReport:
    def test_fraction_bounds(self):
        with pytest.raises(EvalError):
            EvalReport(0.5, 1.2, 0.5, 0.5)
        with pytest.raises(EvalError):
            EvalReport(0.5, 0.5, -0.1, 0.5)
        with pytest.raises(EvalError):
            EvalReport(1.5, 0.5, 0.5, 0.5)

    def test_summary_and_tsv(self):
        rep = EvalReport(0.8123, 0.95, 0.9, 0.75, rows=[{"pair": 0, "x": 0.5}], sweep=[{"ode_steps": 2, "wall_clock_s": 0.1}])
        assert rep.summary_line() == "SUMMARY r=0.8123 content=0.9500 envelope=0.9000 usage=0.7500"
        lines = rep.to_tsv().splitlines()
        assert lines[0] == "pair\tx" and lines[1] == "0\t0.500000"
        assert lines[-1] == rep.summary_line()

    def test_parse_steps(self):
        assert parse_steps("2,5, 10,20") == [20, 10, 5, 2]
        with pytest.raises(EvalError):
            parse_steps("0,2")
        with pytest.raises(EvalError):
            parse_steps("")
