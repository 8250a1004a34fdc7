"""Second-pass search, WER scoring, λ selection and report helpers."""

import numpy as np
import pytest

from experiment_config import DecodeConfig, ExperimentConfig
from modules.autodiff import ExampleKind, no_grad
from modules.decode_eval import (DecodeRecord, EvalReport, MatrixReport, SplitReport, WerResult, align_tokens,
                                 check_improvement, check_matrix_acceptance, decode_example, decode_split,
                                 matrix_rows, records_wer, run_experiment_matrix, second_pass_search,
                                 select_lambda, two_pass_decode, wer, win_loss_samples)
from modules.errors import DecodeError
from modules.rnnt import FirstPassResult, Hypothesis
from modules.toy_corpus import Example, build_corpus
from modules.verify import brute_force_best, random_example, run_beam_oracle

CFG = DecodeConfig(first_beam=2, second_beam=3, top_k=1, lambda_inference=0.5, lambda_grid=(0.5, 0.1, 1.0),
                   max_symbols_per_frame=2, max_output_length=3)


# ========================================
# WER
# ========================================

def test_alignment_prefers_substitution_on_ties():
    assert align_tokens([2, 3], [4, 3]) == [("sub", 2, 4), ("ok", 3, 3)]
    assert align_tokens([2], []) == [("del", 2, None)]
    assert align_tokens([], [5]) == [("ins", None, 5)]


def test_wer_counts_each_error_kind():
    result = wer([[2, 3, 4], [5, 6]], [[2, 4], [5, 7, 6, 8]])
    assert (result.substitutions, result.insertions, result.deletions) == (0, 2, 1)
    assert result.num_ref == 5 and result.num_utts == 2
    assert result.wer == pytest.approx(3 / 5)


def test_wer_can_exceed_one():
    assert wer([[2]], [[3, 4, 5]]).wer == pytest.approx(3.0)


@pytest.mark.parametrize("ref,hyp,expected", [
    ([2, 3, 4], [2, 3, 4], 0.0),
    ([2, 3, 4], [2, 5, 4], 1 / 3),
    ([2, 3], [], 1.0),
])
def test_wer_hand_computed(ref, hyp, expected):
    assert wer([ref], [hyp]).wer == pytest.approx(expected)


def edit_distance(ref, hyp):
    previous = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        current = [i]
        for j, h in enumerate(hyp, start=1):
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (r != h)))
        previous = current
    return previous[-1]


def test_wer_matches_edit_distance_on_random_pairs():
    rng = np.random.default_rng(8)
    for _ in range(200):
        ref = [int(t) for t in rng.integers(2, 6, size=rng.integers(1, 7))]
        hyp = [int(t) for t in rng.integers(2, 6, size=rng.integers(0, 7))]
        result = wer([ref], [hyp])
        assert result.errors == edit_distance(ref, hyp)
        assert result.wer == edit_distance(ref, hyp) / len(ref)


def test_wer_rejects_bad_inputs():
    with pytest.raises(DecodeError):
        wer([[2]], [])
    with pytest.raises(DecodeError):
        wer([[]], [[2]])


def test_records_wer_uses_second_pass_hypothesis():
    record = DecodeRecord("u", (2, 3), (2, 4), -1.0, (2, 3), -0.5)
    assert records_wer([record]).wer == 0.0


# ========================================
# SEARCH
# ========================================

def test_search_returns_ranked_eos_terminated_hypotheses(full_model, rng):
    with no_grad():
        sources = full_model.prepare(rng.normal(size=(5, 3)), FirstPassResult([Hypothesis((2,), 0.0)]))
        ranked = second_pass_search(full_model, sources, 0.4, beam=3, max_output_length=3)
    assert 1 <= len(ranked) <= 3
    assert [h.score for h in ranked] == sorted((h.score for h in ranked), reverse=True)
    assert all(h.score <= 0.0 and len(h.tokens) <= 3 for h in ranked)
    assert all(full_model.eos_id not in h.tokens and full_model.blank_id not in h.tokens for h in ranked)


def test_wider_second_beam_never_scores_worse(full_model, rng):
    with no_grad():
        sources = full_model.prepare(rng.normal(size=(5, 3)), FirstPassResult([Hypothesis((2, 3), 0.0)]))
        tops = [second_pass_search(full_model, sources, 0.3, b, 3)[0].score for b in (1, 2, 4, 8)]
    assert all(b >= a - 1e-12 for a, b in zip(tops, tops[1:]))


def test_exhaustive_beam_matches_brute_force(rng):
    from modules.verify import tiny_model
    model = tiny_model("delib-jatd-partial", vocab_size=4, seed=7)
    with no_grad():
        sources = model.prepare(rng.normal(size=(4, 3)), FirstPassResult([Hypothesis((2,), 0.0)]))
        got = second_pass_search(model, sources, 0.6, beam=15, max_output_length=3)[0]
        want = brute_force_best(model, sources, 0.6, 3)
    assert got.tokens == want.tokens
    assert got.score == pytest.approx(want.score, abs=1e-9)


def test_beam_oracle_suite_passes_on_a_few_models():
    result = run_beam_oracle(seed=3, models=5)
    assert result.passed, result.summary()


def test_search_rejects_zero_beam(full_model, rng):
    sources = full_model.prepare(rng.normal(size=(4, 3)), FirstPassResult([Hypothesis((2,), 0.0)]))
    with pytest.raises(DecodeError):
        second_pass_search(full_model, sources, 0.5, beam=0, max_output_length=3)


# ========================================
# DECODING
# ========================================

def test_decode_example_records_both_passes(full_model, rng):
    example = random_example(rng, 5, 3, ExampleKind.PAIRED, 6, 2, "utt-1")
    record = decode_example(example, full_model, CFG)
    assert record.reference == example.transcript
    assert record.nbest[0] == (record.hypothesis, record.score)
    assert two_pass_decode(example, full_model, CFG).tokens == record.hypothesis


def test_first_pass_only_skips_second_pass(full_model, rng):
    example = random_example(rng, 5, 3, ExampleKind.PAIRED, 6, 2)
    record = decode_example(example, full_model, CFG, first_pass_only=True)
    assert record.hypothesis == record.first_pass


def test_decode_rejects_empty_audio(full_model):
    with pytest.raises(DecodeError):
        decode_example(Example("e", (2,), ExampleKind.PAIRED, np.zeros((0, 3))), full_model, CFG)


def test_decode_split_is_order_and_thread_independent(full_model, rng):
    examples = [random_example(rng, 5, 3, ExampleKind.PAIRED, 5, 2, f"utt-{i}") for i in range(4)]
    serial = decode_split(full_model, examples, CFG, threads=1)
    threaded = decode_split(full_model, list(reversed(examples)), CFG, threads=3)
    assert [r.utt_id for r in serial] == ["utt-0", "utt-1", "utt-2", "utt-3"]
    assert [r.hypothesis for r in serial] == [r.hypothesis for r in threaded]


def test_lambda_selection_breaks_ties_toward_smaller_value(full_model, rng):
    dev = [random_example(rng, 5, 3, ExampleKind.PAIRED, 5, 2, f"dev-{i}") for i in range(3)]
    lam, scores = select_lambda(full_model, dev, CFG.lambda_grid, CFG)
    assert sorted(scores) == [0.1, 0.5, 1.0]
    best = min(scores.values())
    assert lam == min(v for v, s in scores.items() if s == best)


def test_lambda_selection_is_fixed_for_plain_deliberation(deliberation_model):
    assert select_lambda(deliberation_model, [], (0.1,), CFG) == (1.0, {})


# ========================================
# REPORTS
# ========================================

def report(name, hyps):
    refs = [(2, 3), (4,), (2, 2)]
    records = [DecodeRecord(f"u{i}", r, h, 0.0, h, 0.0) for i, (r, h) in enumerate(zip(refs, hyps))]
    return EvalReport(name, "x", 0.1, {"rare_tts": SplitReport("rare_tts", records_wer(records), records)})


def test_win_loss_lists_utterances_where_one_system_is_exact():
    a = report("E1", [(2, 3), (5,), (2, 2)])
    b = report("B5", [(2, 4), (4,), (2, 2)])
    samples = win_loss_samples(a, b, "rare_tts")
    assert [(s.utt_id, s.winner) for s in samples] == [("u0", "E1"), ("u1", "B5")]
    assert samples[0].alignment_b[1] == ("sub", 3, 4)


def test_check_improvement_compares_rare_means():
    better = {"splits": {"rare_tts": {"wer": 0.2}, "rare_spoken": {"wer": 0.3}}}
    worse = {"splits": {"rare_tts": {"wer": 0.4}, "rare_spoken": {"wer": 0.3}}}
    assert check_improvement(better, worse)[0]
    assert not check_improvement(worse, better)[0]
    assert not check_improvement(better, better)[0]


def test_matrix_rows_selection():
    assert [r.name for r in matrix_rows()] == ["B0", "B1", "B2", "B3", "B4", "B5", "B6", "E0", "E1"]
    assert matrix_rows(["E1"])[0].variant == "delib-jatd-full"
    assert matrix_rows(["B0"])[0].first_pass_only
    with pytest.raises(DecodeError):
        matrix_rows(["Z9"])


def comparison(**rows):
    """Single-seed matrix from (vs_like, rare_tts, rare_spoken) WERs per row."""
    report = MatrixReport(matrix_rows(list(rows)), [0])
    for name, values in rows.items():
        splits = {s: SplitReport(s, WerResult(v, 0, 0, 0, 10, 1))
                  for s, v in zip(("vs_like", "rare_tts", "rare_spoken"), values)}
        report.reports[name] = [EvalReport(name, "x", 0.1, splits)]
    return report


def test_matrix_acceptance_passes_directional_gains():
    report = comparison(B5=(0.20, 0.40, 0.35), B6=(0.21, 0.30, 0.32), E1=(0.205, 0.30, 0.30))
    assert check_matrix_acceptance(report) == (True, [])


@pytest.mark.parametrize("e1,fragment", [
    ((0.20, 0.40, 0.30), "rare_tts"),
    ((0.20, 0.35, 0.33), "worse than B6"),
    ((0.25, 0.30, 0.30), "vs_like"),
])
def test_matrix_acceptance_reports_each_failed_criterion(e1, fragment):
    report = comparison(B5=(0.20, 0.40, 0.35), B6=(0.21, 0.30, 0.32), E1=e1)
    accepted, failures = check_matrix_acceptance(report)
    assert not accepted
    assert any(fragment in f for f in failures)


def test_matrix_acceptance_needs_all_three_rows():
    accepted, failures = check_matrix_acceptance(comparison(B5=(0.2, 0.4, 0.4), E1=(0.2, 0.3, 0.3)))
    assert not accepted and "B6" in failures[0]


@pytest.mark.slow
def test_full_jatd_beats_deliberation_baselines_at_default_scale():
    config = ExperimentConfig(None, {"runtime.seed": 1234})
    corpus = build_corpus(config.corpus, seed=config.seed)
    report = run_experiment_matrix(corpus, config, ["B5", "B6", "E1"], seeds=(0, 1, 2))
    accepted, failures = check_matrix_acceptance(report)
    assert accepted, failures
