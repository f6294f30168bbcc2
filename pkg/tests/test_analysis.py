"""Gate tracing, rank statistics, score bins, and the report writer."""

import math

import numpy as np
import pytest
import scipy.stats

from gatefuse.analysis import (
    BIN_LABELS,
    CategorySummary,
    GateRecord,
    aggregate_by_bin,
    aggregate_by_category,
    analysis_report,
    kruskal_wallis,
    load_lexicon,
    load_tag_map,
    score_bins,
    spearman,
    trace_gates,
)
from gatefuse.config import ModelConfig
from gatefuse.data import WordTokenizer
from gatefuse.errors import DataFormatError, InvalidArgument
from gatefuse.model import DualStreamModel
from gatefuse.rng import RngPool


def _rec(surface, gate, position=1, token_id=5):
    return GateRecord(token_id=token_id, surface=surface, position=position,
                      per_layer=(gate,), gate_value=gate)


# ---------------------------------------------------------------- kruskal-wallis

def test_kw_interleaved_groups():
    h, p = kruskal_wallis([np.array([1.0, 3.0, 5.0]), np.array([2.0, 4.0, 6.0])])
    np.testing.assert_allclose(h, 3.0 / 7.0, rtol=1e-12)
    np.testing.assert_allclose(p, float(scipy.stats.chi2.sf(3.0 / 7.0, 1)), rtol=1e-12)


def test_kw_separated_groups():
    h, _ = kruskal_wallis([np.array([1.0, 2.0]), np.array([3.0, 4.0])])
    np.testing.assert_allclose(h, 2.4, rtol=1e-12)


def test_kw_matches_scipy_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = int(rng.integers(2, 4))
        groups = [rng.integers(0, 6, size=int(rng.integers(1, 7))).astype(float)
                  for _ in range(k)]
        pooled = np.concatenate(groups)
        if np.all(pooled == pooled[0]):
            continue
        h, p = kruskal_wallis(groups)
        want = scipy.stats.kruskal(*groups)
        np.testing.assert_allclose(h, want.statistic, rtol=1e-12)
        np.testing.assert_allclose(p, want.pvalue, rtol=1e-10)


def test_kw_invariant_under_monotone_transform():
    groups = [np.array([0.1, 0.5, 0.2]), np.array([0.9, 0.4])]
    h1, p1 = kruskal_wallis(groups)
    h2, p2 = kruskal_wallis([np.exp(g) for g in groups])
    assert h1 == h2 and p1 == p2


def test_kw_detects_separation():
    rng = np.random.default_rng(1)
    a = rng.uniform(0.0, 0.4, size=100)
    b = rng.uniform(0.6, 1.0, size=100)
    _, p = kruskal_wallis([a, b])
    assert p < 0.001


def test_kw_rejections():
    with pytest.raises(InvalidArgument):
        kruskal_wallis([np.array([1.0, 2.0])])
    with pytest.raises(InvalidArgument):
        kruskal_wallis([np.array([1.0]), np.array([])])
    with pytest.raises(InvalidArgument):
        kruskal_wallis([np.array([2.0, 2.0]), np.array([2.0])])


# ---------------------------------------------------------------- spearman

def test_spearman_known_value():
    rho, p = spearman(np.array([1, 2, 3, 4, 5]), np.array([2, 1, 4, 3, 5]))
    np.testing.assert_allclose(rho, 0.8, rtol=1e-12)
    assert 0.0 < p < 1.0


def test_spearman_perfect_monotone_p_zero():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    assert spearman(x, x ** 3) == (1.0, 0.0)
    assert spearman(x, -x) == (-1.0, 0.0)


def test_spearman_matches_scipy_with_ties():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(4, 12))
        x = rng.integers(0, 5, size=n).astype(float)
        y = rng.integers(0, 5, size=n).astype(float)
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        rho, p = spearman(x, y)
        want = scipy.stats.spearmanr(x, y)
        np.testing.assert_allclose(rho, want.statistic, rtol=1e-10, atol=1e-12)
        if abs(rho) < 1.0:
            np.testing.assert_allclose(p, want.pvalue, rtol=1e-8, atol=1e-12)


def test_spearman_rejections():
    with pytest.raises(InvalidArgument):
        spearman(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
    with pytest.raises(InvalidArgument):
        spearman(np.ones(5), np.arange(5.0))
    with pytest.raises(InvalidArgument):
        spearman(np.arange(4.0), np.arange(5.0))


# ---------------------------------------------------------------- bins

def test_score_bins_reference_cutpoints():
    # mean 438, population sd 120 -> boundaries at 318 / 438 / 558
    assignment, bounds = score_bins({"lo": 318.0, "hi": 558.0})
    assert bounds == (318.0, 438.0, 558.0)
    assert assignment == {"lo": "mid_low", "hi": "high"}  # boundary -> higher band


def test_score_bins_all_bands_and_boundary_rule():
    lex = {"a": -3.0, "b": -1.0, "c": -1.0, "d": 1.0, "e": 1.0, "f": 3.0}
    assignment, bounds = score_bins(lex)
    mu = 0.0
    sd = math.sqrt(22.0 / 6.0)
    np.testing.assert_allclose(bounds, (mu - sd, mu, mu + sd), rtol=1e-12)
    assert assignment["a"] == "low"
    assert assignment["b"] == "mid_low" and assignment["c"] == "mid_low"
    assert assignment["d"] == "mid_high"
    assert assignment["f"] == "high"
    # a score exactly on the middle boundary goes up, not down
    exact = score_bins({"x": 0.0, "y": 2.0})[0]
    assert exact == {"x": "mid_low", "y": "high"}


def test_score_bins_too_small():
    with pytest.raises(InvalidArgument):
        score_bins({"only": 1.0})


def test_aggregate_by_bin_orders_bands():
    lex = {"w1": -3.0, "w2": -1.0, "w3": 1.0, "w4": 3.0}
    records = [_rec("w1", 0.1), _rec("w2", 0.2), _rec("w3", 0.3), _rec("w4", 0.4),
               _rec("unknown", 0.9)]
    summaries, unmatched = aggregate_by_bin(records, lex)
    assert [s.label for s in summaries] == list(BIN_LABELS)
    assert unmatched == 1


# ---------------------------------------------------------------- aggregation

def test_aggregate_by_category_means_and_sd():
    tags = {"dog": "NOUN", "runs": "VERB"}
    records = [_rec("dog", 0.2), _rec("dog", 0.4), _rec("runs", 0.8),
               _rec("zzz", 0.5)]
    summaries, unmatched = aggregate_by_category(records, tags)
    assert unmatched == 1
    by_label = {s.label: s for s in summaries}
    np.testing.assert_allclose(by_label["NOUN"].mean, 0.3, rtol=1e-12)
    np.testing.assert_allclose(by_label["NOUN"].sd, 0.1, rtol=1e-12)
    assert by_label["NOUN"].n == 2
    assert by_label["VERB"].sd == 0.0 and by_label["VERB"].n == 1
    assert [s.label for s in summaries] == ["NOUN", "VERB"]  # sorted


def test_aggregate_casefold_switch():
    tags = {"the": "DET"}
    records = [_rec("The", 0.5)]
    with pytest.raises(InvalidArgument):
        aggregate_by_category(records, tags)  # exact match only
    summaries, unmatched = aggregate_by_category(records, tags, casefold=True)
    assert unmatched == 0 and summaries[0].n == 1


def test_aggregate_no_matches_raises():
    with pytest.raises(InvalidArgument):
        aggregate_by_category([_rec("x", 0.5)], {"y": "NOUN"})


# ---------------------------------------------------------------- loaders

def test_load_tag_map(tmp_path):
    p = tmp_path / "tags.csv"
    p.write_text("token,label\ndog,NOUN\nruns,VERB\n")
    assert load_tag_map(str(p)) == {"dog": "NOUN", "runs": "VERB"}
    dup = tmp_path / "dup.csv"
    dup.write_text("dog,NOUN\ndog,VERB\n")
    with pytest.raises(DataFormatError):
        load_tag_map(str(dup))
    with pytest.raises(DataFormatError):
        load_tag_map(str(tmp_path / "missing.csv"))
    empty = tmp_path / "empty.csv"
    empty.write_text("token,label\n")
    with pytest.raises(DataFormatError):
        load_tag_map(str(empty))
    wide = tmp_path / "wide.csv"
    wide.write_text("dog,NOUN,extra\n")
    with pytest.raises(DataFormatError):
        load_tag_map(str(wide))


def test_load_lexicon_columns(tmp_path):
    p = tmp_path / "lex.csv"
    p.write_text("word,conc,imag\ndog,4.5,4.8\nidea,1.5,1.2\n")
    cols = load_lexicon(str(p))
    assert set(cols) == {"conc", "imag"}
    assert cols["conc"] == {"dog": 4.5, "idea": 1.5}
    assert cols["imag"]["idea"] == 1.2

    for body in ("word,conc,conc\ndog,1,2\n",          # duplicate column
                 "word,conc\ndog,1\ndog,2\n",          # duplicate word
                 "word,conc\ndog,abc\n",               # non-numeric
                 "word,conc\ndog,inf\n",               # non-finite
                 "word,conc\ndog\n",                   # ragged row
                 "word,conc\n"):                       # no entries
        bad = tmp_path / "bad.csv"
        bad.write_text(body)
        with pytest.raises(DataFormatError):
            load_lexicon(str(bad))
    with pytest.raises(DataFormatError):
        load_lexicon(str(tmp_path / "nope.csv"))


# ---------------------------------------------------------------- tracing

_WORDS = ["red", "blue", "circle", "square", "sits"]


def _gate_model(seed=0, **kw):
    base = dict(d_model=8, hidden_dim=16, n_heads=2, n_decoder_layers=2,
                n_image_encoder_layers=1, vocab_size=3 + len(_WORDS),
                max_seq_len=8, dropout_rate=0.0, image_embedding_dim=4,
                image_encoder_kind="mlp", gate_variant="soft_feature")
    base.update(kw)
    return DualStreamModel(ModelConfig(**base), RngPool(seed))


def _capture_ids(tok, texts):
    return [tok.encode(t) for t in texts]


def test_trace_gates_one_record_per_content_token(f64):
    tok = WordTokenizer(_WORDS)
    model = _gate_model()
    texts = ["red circle sits", "blue square sits", "red square sits"]
    ids = _capture_ids(tok, texts)
    emb = np.random.default_rng(3).standard_normal((3, 4))
    records = trace_gates(model, ids, emb, tok)
    assert len(records) == 9  # three content words per caption, specials dropped
    assert [r.surface for r in records[:3]] == ["red", "circle", "sits"]
    assert [r.position for r in records[:3]] == [1, 2, 3]
    for r in records:
        assert len(r.per_layer) == 2
        assert all(0.0 <= v <= 1.0 for v in r.per_layer)
        np.testing.assert_allclose(r.gate_value, np.mean(r.per_layer), rtol=1e-12)


def test_trace_gates_batch_size_invariant(f64):
    tok = WordTokenizer(_WORDS)
    model = _gate_model(seed=5)
    texts = ["red circle sits"] * 5 + ["blue square sits"] * 2
    ids = _capture_ids(tok, texts)
    emb = np.random.default_rng(4).standard_normal((7, 4))
    a = trace_gates(model, ids, emb, tok, batch_size=3)
    b = trace_gates(model, ids, emb, tok, batch_size=32)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.surface == y.surface and x.position == y.position
        assert x.per_layer == y.per_layer and x.gate_value == y.gate_value


def test_trace_gates_requires_gate_and_matching_counts(f64):
    tok = WordTokenizer(_WORDS)
    ids = _capture_ids(tok, ["red circle sits"])
    with pytest.raises(InvalidArgument):
        trace_gates(_gate_model(), ids, np.zeros((2, 4)), tok)
    ungated = _gate_model(gate_variant="none")
    with pytest.raises(InvalidArgument):
        trace_gates(ungated, ids, np.zeros((1, 4)), tok)


# ---------------------------------------------------------------- report

def _report_inputs():
    rng = np.random.default_rng(6)
    tags = {"red": "ADJ", "blue": "ADJ", "circle": "NOUN", "square": "NOUN",
            "sits": "VERB"}
    lex = {"conc": {"red": 3.2, "blue": 3.1, "circle": 4.5, "square": 4.4,
                    "sits": 2.0}}
    records = []
    for i in range(40):
        surface = list(tags)[i % 5]
        records.append(_rec(surface, float(rng.uniform(0.2, 0.8)), position=i % 4))
    return records, tags, lex


def test_report_writes_tables_figures_and_stats(tmp_path):
    records, tags, lex = _report_inputs()
    out = tmp_path / "report"
    result = analysis_report(str(out), records, tags, lex,
                             manifest_hash="a" * 64)
    for name in ("gate_by_pos.csv", "gate_by_pos.png", "gate_by_conc.csv",
                 "gate_by_conc.png", "stats.txt"):
        assert (out / name).exists(), name
    lines = (out / "stats.txt").read_text().splitlines()
    assert lines[0] == f"manifest sha256 {'a' * 64}"
    assert any(line.startswith("pos kruskal_wallis H ") for line in lines)
    assert any(line.startswith("conc spearman rho ") for line in lines)
    import hashlib
    body = "\n".join(lines[:-1]) + "\n"
    assert lines[-1] == f"sha256 {hashlib.sha256(body.encode()).hexdigest()}"
    assert result["stats_sha256"] in lines[-1]
    assert "kruskal_wallis" in result and "spearman_conc" in result
    header = (out / "gate_by_pos.csv").read_text().splitlines()[0]
    assert header == "label,mean_gate,sd,n"


def test_report_is_byte_deterministic(tmp_path):
    records, tags, lex = _report_inputs()
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    analysis_report(str(out1), records, tags, lex, manifest_hash="b" * 64)
    analysis_report(str(out2), records, tags, lex, manifest_hash="b" * 64)
    for name in ("gate_by_pos.csv", "gate_by_pos.png", "gate_by_conc.csv",
                 "gate_by_conc.png", "stats.txt"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name


def test_report_csv_floats_round_trip(tmp_path):
    records, tags, lex = _report_inputs()
    out = tmp_path / "r"
    analysis_report(str(out), records, tags, lex)
    summaries, _ = aggregate_by_category(records, tags)
    rows = (out / "gate_by_pos.csv").read_text().splitlines()[1:]
    for s, row in zip(summaries, rows):
        label, mean, sd, n = row.split(",")
        assert label == s.label
        assert float(mean) == s.mean    # repr round-trips exactly
        assert float(sd) == s.sd
        assert int(n) == s.n


def test_report_requires_records(tmp_path):
    with pytest.raises(InvalidArgument):
        analysis_report(str(tmp_path / "x"), [], {"a": "X"}, {})
