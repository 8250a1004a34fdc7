"""Second-pass variants, branch contexts, interpolation and gated training."""

import numpy as np
import pytest

from modules.autodiff import AdamOptimizer, ExampleKind, Gate, no_grad
from modules.deliberation import (ModelVariant, build_grad_mask, example_loss, interpolate, second_pass_loss,
                                  train_step)
from modules.errors import CorpusError, DecodeError, VariantError
from modules.rnnt import FirstPassResult, Hypothesis
from modules.toy_corpus import Example
from modules.verify import fixed_hyps, random_example, run_gating, run_gradcheck, run_interp, tiny_model

HYPS = FirstPassResult([Hypothesis((2, 3), -1.0), Hypothesis((4,), -2.0)])


def group_gates(model):
    return [g.gate for g in model.param_groups()]


def test_variant_names_round_trip():
    assert ModelVariant.from_name("delib-jatd-partial") is ModelVariant.DELIB_JATD_PARTIAL
    with pytest.raises(VariantError):
        ModelVariant.from_name("rnnt-lm")


def test_parameter_groups_follow_variant():
    assert Gate.FIXED_CONTEXT_E not in group_gates(tiny_model("deliberation"))
    assert Gate.HYPOTHESIS_ENCODER not in group_gates(tiny_model("las-jatd"))
    assert Gate.FIXED_CONTEXT_B not in group_gates(tiny_model("delib-jatd-partial"))
    full = group_gates(tiny_model("delib-jatd-full"))
    assert {Gate.FIXED_CONTEXT_E, Gate.FIXED_CONTEXT_B, Gate.HYPOTHESIS_ATTENTION} <= set(full)


def test_fixed_contexts_start_at_zero(full_model):
    for group in full_model.param_groups():
        if group.gate in (Gate.FIXED_CONTEXT_E, Gate.FIXED_CONTEXT_B):
            assert not group.params[0].data.any()


def test_same_seed_gives_same_weights():
    a, b = tiny_model("deliberation", seed=9), tiny_model("deliberation", seed=9)
    for ga, gb in zip(a.param_groups(), b.param_groups()):
        assert all(np.array_equal(p.data, q.data) for p, q in zip(ga.params, gb.params))


def test_hypothesis_encoding_pads_and_truncates(full_model):
    encoder = full_model.second.hyp_encoder
    assert encoder.pad((2, 3)) == ((2, 3, 1, 1), False)
    assert encoder.pad((2, 3, 4, 2, 3)) == ((2, 3, 4, 2), True)
    encoding = full_model.encode_hypotheses(HYPS, top_k=2)
    assert encoding.length == 2 * encoder.hyp_length
    assert encoding.padded_tokens == [(2, 3, 1, 1), (4, 1, 1, 1)]
    assert not encoding.truncated


def test_hypothesis_blocks_are_encoded_independently(full_model):
    length = full_model.second.hyp_encoder.hyp_length
    stacked = full_model.encode_hypotheses(HYPS, top_k=2).encoded.data
    for k, hyp in enumerate(HYPS.hyps):
        alone = full_model.encode_hypotheses([hyp]).encoded.data
        assert np.array_equal(stacked[k * length:(k + 1) * length], alone)


def test_hypothesis_encoding_rejects_empty_input(full_model):
    with pytest.raises(DecodeError):
        full_model.encode_hypotheses([])
    with pytest.raises(DecodeError):
        full_model.encode_hypotheses(HYPS, top_k=0)
    with pytest.raises(VariantError):
        tiny_model("las").encode_hypotheses(HYPS)


def test_step_outputs_log_distribution(full_model, rng):
    sources = full_model.prepare(rng.normal(size=(5, 3)), HYPS)
    for step in (full_model.step_acoustic, full_model.step_lm):
        log_probs, _ = step(sources, (2,))
        assert log_probs.shape == (1, full_model.vocab_size)
        assert np.exp(log_probs.data).sum() == pytest.approx(1.0)


def test_incremental_steps_match_fresh_steps(partial_model, rng):
    sources = partial_model.prepare(rng.normal(size=(5, 3)), HYPS)
    state = None
    for prefix in [(), (2,), (2, 4), (2, 4, 3)]:
        incremental, state = partial_model.step_lm(sources, prefix, state)
        fresh, _ = partial_model.step_lm(sources, prefix)
        assert np.allclose(incremental.data, fresh.data)


def test_step_rejects_foreign_state(full_model, rng):
    sources = full_model.prepare(rng.normal(size=(5, 3)), HYPS)
    _, state = full_model.step_acoustic(sources, (2,))
    with pytest.raises(DecodeError):
        full_model.step_acoustic(sources, (3, 2), state)
    with pytest.raises(VariantError):
        full_model.step_lm(sources, (2, 3), state)


def test_non_jatd_variants_have_no_lm_branch(deliberation_model, rng):
    sources = deliberation_model.prepare(rng.normal(size=(5, 3)), HYPS)
    with pytest.raises(VariantError):
        deliberation_model.step_lm(sources, ())


def test_full_lm_branch_ignores_audio_and_hypotheses(full_model, rng):
    with no_grad():
        a = full_model.step_lm(full_model.prepare(rng.normal(size=(4, 3)), HYPS), (2, 3))[0].data
        other = FirstPassResult([Hypothesis((4, 4, 2), 0.0)])
        b = full_model.step_lm(full_model.prepare(rng.normal(size=(7, 3)), other), (2, 3))[0].data
    assert np.array_equal(a, b)


def test_partial_lm_branch_ignores_audio_but_reads_hypotheses(partial_model, rng):
    with no_grad():
        a = partial_model.step_lm(partial_model.prepare(rng.normal(size=(4, 3)), HYPS), (2,))[0].data
        b = partial_model.step_lm(partial_model.prepare(rng.normal(size=(6, 3)), HYPS), (2,))[0].data
        other = FirstPassResult([Hypothesis((4, 4, 2), 0.0)])
        c = partial_model.step_lm(partial_model.prepare(rng.normal(size=(6, 3)), other), (2,))[0].data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_interpolate_endpoints_and_range():
    a, b = np.log([0.2, 0.8]), np.log([0.6, 0.4])
    assert interpolate(a, b, 1.0) is a
    assert interpolate(a, b, 0.0) is b
    assert np.allclose(interpolate(a, b, 0.25), 0.25 * a + 0.75 * b)
    with pytest.raises(DecodeError):
        interpolate(a, b, 1.5)
    with pytest.raises(DecodeError):
        interpolate(a, np.log([0.1, 0.2, 0.7]), 0.5)


def test_loss_is_positive_per_token_mean(full_model, rng):
    example = random_example(rng, 5, 3, ExampleKind.PAIRED, 6, 3)
    loss, acoustic, lm, tokens = example_loss(full_model, example, 0.3, HYPS)
    assert tokens == 4
    assert loss.item() > 0.0 and acoustic > 0.0 and lm > 0.0


def test_non_jatd_loss_reports_no_lm_term(deliberation_model, rng):
    example = random_example(rng, 5, 3, ExampleKind.PAIRED, 6, 2)
    result = second_pass_loss(deliberation_model, [example], 0.1, fixed_hyps(example, (2,)))
    assert result.lm_term is None
    assert result.value == pytest.approx(result.acoustic_term)


def test_lambda_one_loss_is_acoustic_only(full_model, rng):
    example = random_example(rng, 5, 3, ExampleKind.PAIRED, 6, 2)
    result = second_pass_loss(full_model, [example], 1.0, fixed_hyps(example, (2,)))
    assert result.value == pytest.approx(result.acoustic_term)


def test_loss_needs_features(full_model):
    with pytest.raises(CorpusError):
        example_loss(full_model, Example("x", (2,), ExampleKind.UNPAIRED, None), 0.1, HYPS)
    with pytest.raises(CorpusError):
        second_pass_loss(full_model, [])


def test_masks_freeze_first_pass_always():
    variant = ModelVariant.DELIB_JATD_FULL
    unfrozen = build_grad_mask(ExampleKind.PAIRED, variant, freeze_first_pass=False)
    assert not unfrozen.allows(Gate.FIRST_PASS)
    assert unfrozen.allows(Gate.ENCODER_STACK)
    assert not build_grad_mask(ExampleKind.PAIRED, variant).allows(Gate.ENCODER_STACK)
    # without a fixed-context branch every example trains like a paired one
    assert build_grad_mask(ExampleKind.UNPAIRED, ModelVariant.DELIBERATION).allows(Gate.ENCODER_ATTENTION)


def test_unpaired_step_leaves_audio_path_untouched(full_model, rng):
    batch = [random_example(rng, 5, 3, ExampleKind.UNPAIRED, 6, 3, f"u{i}") for i in range(2)]
    before = {g.name: g.snapshot() for g in full_model.param_groups()}
    metrics = train_step(full_model, batch, AdamOptimizer(), lambda_train=0.1, freeze_first_pass=False)
    after = {g.name: g.snapshot() for g in full_model.param_groups()}
    for name in ("encoder", "encoder_attention", "first_pass"):
        assert all(np.array_equal(a, b) for a, b in zip(before[name], after[name])), name
    assert not all(np.array_equal(a, b) for a, b in zip(before["fixed_context_e"], after["fixed_context_e"]))
    assert metrics.num_unpaired == 2 and metrics.num_paired == 0
    assert "unpaired" in metrics.grad_norm


def test_mixed_step_reports_both_sub_batches(full_model, rng):
    batch = [random_example(rng, 5, 3, kind, 6, 2, f"m{i}")
             for i, kind in enumerate([ExampleKind.PAIRED, ExampleKind.UNPAIRED, ExampleKind.PAIRED])]
    metrics = train_step(full_model, batch, AdamOptimizer(), lambda_train=0.1)
    assert (metrics.num_paired, metrics.num_unpaired) == (2, 1)
    assert metrics.lm_term is not None
    assert set(metrics.grad_norm) == {"paired", "unpaired"}


def test_gating_suite_passes():
    result = run_gating(seed=1)
    assert result.passed, result.summary()


def test_interp_suite_passes():
    result = run_interp(seed=2, probes=4)
    assert result.passed, result.summary()


@pytest.mark.slow
def test_gradcheck_suite_passes():
    result = run_gradcheck(seed=0)
    assert result.passed, result.summary()
