"""
Property suites run by `main.py verify`.

Each suite builds tiny seeded models and random inputs, checks one family
of properties and returns a `SuiteResult`. Nothing here touches the corpus
on disk.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from experiment_config import DecodeConfig, ModelConfig

from .autodiff import (AdamOptimizer, ExampleKind, Gate, Tensor, backward, concat, embed_lookup,
                       log_softmax, logsumexp, matmul, mul, no_grad, sigmoid, slice_, softmax, sum_, tanh)
from .decode_eval import second_pass_search
from .deliberation import DeliberationModel, interpolate, second_pass_loss, train_step
from .errors import ConfigError
from .rnnt import FirstPassResult, Hypothesis, compute_lattice, transducer_loss
from .toy_corpus import Example

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
FD_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SuiteResult:
    name: str
    checks: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, passed: bool, detail: str = ""):
        self.checks.append(CheckResult(name, bool(passed), detail))
        if not passed:
            logger.warning(f"[{self.name}] {name} failed: {detail}")

    def summary(self) -> str:
        failed = [c for c in self.checks if not c.passed]
        return f"{self.name}: {len(self.checks) - len(failed)}/{len(self.checks)} checks passed"


# ========================================
# TINY MODELS
# ========================================

def tiny_model_config(variant: str = "delib-jatd-full", **overrides) -> ModelConfig:
    values = dict(
        variant=variant, encoder_layers=1, encoder_hidden=4, encoder_proj=3, time_reduction_after=1,
        time_reduction_factor=2, pred_embed_dim=3, pred_layers=1, pred_hidden=4, pred_proj=3, joint_dim=4,
        hyp_embed_dim=3, hyp_hidden=4, hyp_proj=2, hyp_length=4, attention_dim=4, num_heads=2,
        dec_embed_dim=3, dec_hidden=4, dec_proj=3, max_label_length=8, init_scale=0.5,
    )
    values.update(overrides)
    return ModelConfig(**values)


def tiny_model(variant: str = "delib-jatd-full", vocab_size: int = 5, feature_dim: int = 3,
               seed: int = 0, **overrides) -> DeliberationModel:
    return DeliberationModel(tiny_model_config(variant, **overrides), vocab_size, feature_dim, seed)


def random_example(rng: np.random.Generator, vocab_size: int, feature_dim: int, kind: ExampleKind,
                   num_frames: int, num_tokens: int, utt_id: str = "utt") -> Example:
    transcript = tuple(int(t) for t in rng.integers(2, vocab_size, size=num_tokens))
    return Example(utt_id, transcript, kind, rng.normal(size=(num_frames, feature_dim)))


def fixed_hyps(example: Example, tokens: Sequence[int]) -> Dict[str, FirstPassResult]:
    return {example.utt_id: FirstPassResult([Hypothesis(tuple(tokens), 0.0)])}


def relative_error(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric))
    return 0.0 if scale < 1e-7 else abs(analytic - numeric) / scale


def numeric_grad(loss_fn: Callable[[], float], param: Tensor, index: Tuple[int, ...], h: float = FD_STEP) -> float:
    original = param.data[index]
    param.data[index] = original + h
    plus = loss_fn()
    param.data[index] = original - h
    minus = loss_fn()
    param.data[index] = original
    return (plus - minus) / (2 * h)


# ========================================
# SUITES
# ========================================

def _op_composites(rng: np.random.Generator) -> List[Tuple[str, List[Tensor], Callable[[], Tensor]]]:
    def leaf(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    x, w, b = leaf(3, 4), leaf(4, 5), leaf(5)
    weights = Tensor(rng.normal(size=(3, 5)))
    mlp = ("tanh-matmul-log_softmax", [x, w, b],
           lambda: sum_(mul(log_softmax(tanh(matmul(x, w) + b)), weights)))
    p, q = leaf(2, 3), leaf(2, 2)
    gates = ("sigmoid-concat-slice-logsumexp", [p, q],
             lambda: sum_(logsumexp(slice_(sigmoid(concat([p, q], axis=1)), (slice(None), slice(1, 5))))))
    table = leaf(6, 3)
    probe = Tensor(rng.normal(size=(4, 3)))
    lookup = ("embed_lookup-softmax", [table],
              lambda: sum_(mul(softmax(embed_lookup(table, [1, 4, 1, 0])), probe)))
    return [mlp, gates, lookup]


def run_gradcheck(seed: int = 0, coords_per_tensor: int = 3) -> SuiteResult:
    """Ops and whole-model second-pass loss against central finite differences."""
    suite = SuiteResult("gradcheck")
    rng = np.random.default_rng(seed)
    for name, leaves, build in _op_composites(rng):
        backward(build())
        errors = []
        for leaf in leaves:
            analytic = leaf.grad.copy()
            for index in np.ndindex(*leaf.shape):
                numeric = numeric_grad(lambda: build().item(), leaf, index)
                errors.append(relative_error(float(analytic[index]), numeric))
        suite.add(f"ops:{name}", max(errors) < FD_TOLERANCE, f"max rel err {max(errors):.2e}")

    for variant in ("deliberation", "delib-jatd-partial", "delib-jatd-full", "las-jatd"):
        model = tiny_model(variant, seed=seed)
        example = random_example(rng, model.vocab_size, model.feature_dim, ExampleKind.PAIRED,
                                 num_frames=6, num_tokens=3)
        cache = fixed_hyps(example, example.transcript[:2])
        if model.variant.is_jatd:
            # zero fixed contexts would hide their gradient
            for group in model.param_groups():
                if group.gate in (Gate.FIXED_CONTEXT_E, Gate.FIXED_CONTEXT_B):
                    group.params[0].data = rng.normal(scale=0.5, size=group.params[0].shape)

        def loss_value() -> float:
            with no_grad():
                return second_pass_loss(model, [example], 0.3, cache).value

        grads = backward(second_pass_loss(model, [example], 0.3, cache).loss)
        total = within = 0
        for group in model.second_pass_groups(freeze_first_pass=False):
            for param in group.params:
                analytic = grads.get(param)
                for flat in rng.choice(param.data.size, size=min(coords_per_tensor, param.data.size), replace=False):
                    index = np.unravel_index(flat, param.shape)
                    numeric = numeric_grad(loss_value, param, index)
                    total += 1
                    within += relative_error(float(analytic[index]), numeric) < FD_TOLERANCE
        suite.add(f"model:{variant}", within >= 0.99 * total, f"{within}/{total} coordinates within tolerance")
    return suite


def _enumerate_alignments(log_probs: np.ndarray, labels: Sequence[int], blank: int) -> float:
    """log Σ over every monotone path, listed explicitly."""
    T, U = log_probs.shape[0], len(labels)
    totals = []
    # a path is a placement of U labels among T blank-terminated frames
    for counts in itertools.product(range(U + 1), repeat=T):
        if sum(counts) != U:
            continue
        score, u = 0.0, 0
        for t, n in enumerate(counts):
            for _ in range(n):
                score += log_probs[t, u, labels[u]]
                u += 1
            score += log_probs[t, u, blank]
        totals.append(score)
    return float(np.logaddexp.reduce(totals))


def run_rnnt_oracle(seed: int = 0, instances: int = 200) -> SuiteResult:
    """Transducer loss against exhaustive alignment enumeration."""
    suite = SuiteResult("rnnt-oracle")
    rng = np.random.default_rng(seed)
    worst, worst_alpha_beta = 0.0, 0.0
    for i in range(instances):
        vocab_size = int(rng.integers(3, 6))
        model = tiny_model("las", vocab_size=vocab_size, seed=seed + i)
        frames = int(rng.integers(1, 9))
        labels = [int(t) for t in rng.integers(1, vocab_size, size=int(rng.integers(0, 4)))]
        with no_grad():
            enc = model.rnnt.encode(rng.normal(size=(frames, model.feature_dim)))
            lattice_lp = model.rnnt.lattice_log_probs(enc, labels)
            loss = model.rnnt.loss(enc, labels).item()
        oracle = -_enumerate_alignments(lattice_lp.data, labels, model.blank_id)
        lattice = compute_lattice(lattice_lp.data, labels, model.blank_id)
        worst = max(worst, abs(loss - oracle))
        worst_alpha_beta = max(worst_alpha_beta, abs(lattice.total_from_alpha - lattice.total_from_beta))
    suite.add("loss-vs-enumeration", worst < 1e-6, f"max abs diff {worst:.2e} over {instances} instances")
    suite.add("alpha-beta-agreement", worst_alpha_beta < 1e-8, f"max abs diff {worst_alpha_beta:.2e}")

    lattice_lp = Tensor(np.log(rng.dirichlet(np.ones(4), size=(3, 3))), requires_grad=True)
    labels = [2, 1]
    backward(transducer_loss(lattice_lp, labels))
    analytic = lattice_lp.grad.copy()
    errors = [relative_error(float(analytic[index]),
                             numeric_grad(lambda: transducer_loss(lattice_lp, labels).item(), lattice_lp, index))
              for index in np.ndindex(*lattice_lp.shape)]
    suite.add("loss-gradient", max(errors) < FD_TOLERANCE, f"max rel err {max(errors):.2e}")
    return suite


def run_gating(seed: int = 0) -> SuiteResult:
    """Bitwise freezes per example kind after one gated step."""
    suite = SuiteResult("gating")
    rng = np.random.default_rng(seed)
    for name, kinds in (("unpaired", [ExampleKind.UNPAIRED] * 2), ("paired", [ExampleKind.PAIRED] * 2),
                        ("mixed", [ExampleKind.PAIRED, ExampleKind.UNPAIRED])):
        model = tiny_model("delib-jatd-full", seed=seed)
        batch = [random_example(rng, model.vocab_size, model.feature_dim, kind, 6, 3, f"{name}-{i}")
                 for i, kind in enumerate(kinds)]
        before = {g.gate: g.snapshot() for g in model.param_groups()}
        train_step(model, batch, AdamOptimizer(), lambda_train=0.1, freeze_first_pass=False)
        after = {g.gate: g.snapshot() for g in model.param_groups()}

        def unchanged(gate: Gate) -> bool:
            return all(np.array_equal(a, b) for a, b in zip(before[gate], after[gate]))

        if name == "unpaired":
            suite.add("unpaired:encoder-stack-frozen", unchanged(Gate.ENCODER_STACK))
            suite.add("unpaired:encoder-attention-frozen", unchanged(Gate.ENCODER_ATTENTION))
            suite.add("unpaired:fixed-contexts-updated", not unchanged(Gate.FIXED_CONTEXT_E))
        elif name == "paired":
            suite.add("paired:fixed-context-e-frozen", unchanged(Gate.FIXED_CONTEXT_E))
            suite.add("paired:fixed-context-b-frozen", unchanged(Gate.FIXED_CONTEXT_B))
            suite.add("paired:encoder-attention-updated", not unchanged(Gate.ENCODER_ATTENTION))
        suite.add(f"{name}:decoder-updated", not unchanged(Gate.SECOND_PASS_DECODER))
        suite.add(f"{name}:first-pass-frozen", unchanged(Gate.FIRST_PASS))
    return suite


def run_interp(seed: int = 0, probes: int = 10) -> SuiteResult:
    """Interpolation identities and branch (in)dependence on the audio."""
    suite = SuiteResult("interp")
    rng = np.random.default_rng(seed)
    a = log_softmax(Tensor(rng.normal(size=7))).data
    b = log_softmax(Tensor(rng.normal(size=7))).data
    suite.add("lambda=1-is-acoustic", np.array_equal(interpolate(a, b, 1.0), a))
    suite.add("lambda=0-is-lm", np.array_equal(interpolate(a, b, 0.0), b))
    lams = rng.uniform(size=20)
    linear = max(float(np.max(np.abs(interpolate(a, b, lam) - (lam * a + (1 - lam) * b)))) for lam in lams)
    suite.add("linear-combination", linear <= 1e-15, f"max deviation {linear:.1e}")
    shifted = all(int(np.argmax(interpolate(a + 3.0, b + 3.0, lam))) == int(np.argmax(interpolate(a, b, lam)))
                  for lam in lams)
    suite.add("argmax-shift-invariant", shifted)

    hyp = FirstPassResult([Hypothesis((2, 3), 0.0)])
    for variant, expect_identical in (("delib-jatd-full", True), ("delib-jatd-partial", False)):
        model = tiny_model(variant, seed=seed)
        outputs = []
        with no_grad():
            for _ in range(probes):
                features = rng.normal(size=(int(rng.integers(2, 7)), model.feature_dim))
                random_hyp = FirstPassResult([Hypothesis(tuple(int(t) for t in rng.integers(2, 5, size=2)), 0.0)])
                sources = model.prepare(features, random_hyp if variant == "delib-jatd-partial" else hyp)
                outputs.append(model.step_lm(sources, (2,))[0].data)
        identical = all(np.array_equal(outputs[0], o) for o in outputs[1:])
        label = "lm-independent-of-audio" if expect_identical else "lm-depends-on-hypotheses"
        suite.add(f"{variant}:{label}", identical == expect_identical)

    cfg = DecodeConfig(first_beam=2, second_beam=3, max_output_length=4)
    full, plain = tiny_model("delib-jatd-full", seed=seed), tiny_model("deliberation", seed=seed)
    same = True
    with no_grad():
        for _ in range(probes):
            features = rng.normal(size=(6, full.feature_dim))
            hyps = full.first_pass(features, cfg.first_beam)
            got = second_pass_search(full, full.prepare(features, hyps), 1.0, cfg.second_beam, cfg.max_output_length)
            want = second_pass_search(plain, plain.prepare(features, hyps), 1.0, cfg.second_beam, cfg.max_output_length)
            same = same and got == want
    suite.add("full-at-lambda-1-equals-deliberation", same)
    return suite


def brute_force_best(model: DeliberationModel, sources, lam: float, max_len: int) -> Hypothesis:
    """Score every label sequence up to `max_len` (eos-terminated) from scratch."""
    labels = [k for k in range(model.vocab_size) if k not in (model.blank_id, model.eos_id)]

    def combined(prefix):
        acoustic = model.step_acoustic(sources, prefix)[0].data[0]
        if not model.variant.is_jatd or lam == 1.0:
            return acoustic
        return interpolate(acoustic, model.step_lm(sources, prefix)[0].data[0], lam)

    best: Optional[Hypothesis] = None
    for length in range(max_len + 1):
        for tokens in itertools.product(labels, repeat=length):
            score = sum(float(combined(tokens[:u])[tokens[u]]) for u in range(length))
            score += float(combined(tokens)[model.eos_id])
            if best is None or score > best.score:
                best = Hypothesis(tokens, score)
    return best


def run_beam_oracle(seed: int = 0, models: int = 50, max_len: int = 3) -> SuiteResult:
    """Exhaustive-width second pass vs brute force; first-pass top score monotone in width."""
    suite = SuiteResult("beam-oracle")
    rng = np.random.default_rng(seed)
    mismatches, non_monotone = 0, 0
    exhaustive = sum(2 ** n for n in range(max_len + 1))
    for i in range(models):
        model = tiny_model("delib-jatd-full", vocab_size=4, seed=seed + i)
        features = rng.normal(size=(int(rng.integers(2, 7)), model.feature_dim))
        with no_grad():
            enc = model.rnnt.encode(features)
            tops = [model.rnnt.decode(enc, width).best.score for width in range(1, 5)]
            non_monotone += any(b < a for a, b in zip(tops, tops[1:]))
            hyps = model.rnnt.decode(enc, 2)
            sources = model.prepare(None, hyps, enc=enc)
            lam = float(rng.uniform())
            got = second_pass_search(model, sources, lam, exhaustive, max_len)[0]
            want = brute_force_best(model, sources, lam, max_len)
        if got.tokens != want.tokens or abs(got.score - want.score) > 1e-9:
            mismatches += 1
    suite.add("exhaustive-equals-brute-force", mismatches == 0, f"{mismatches}/{models} mismatches")
    suite.add("first-pass-monotone-in-width", non_monotone == 0, f"{non_monotone}/{models} violations")
    return suite


SUITES: Dict[str, Callable[..., SuiteResult]] = {
    "gradcheck": run_gradcheck,
    "rnnt-oracle": run_rnnt_oracle,
    "gating": run_gating,
    "interp": run_interp,
    "beam-oracle": run_beam_oracle,
}


def run_suite(name: str, seed: int = 0) -> SuiteResult:
    if name not in SUITES:
        raise ConfigError(f"unknown verification suite {name!r}; expected one of {sorted(SUITES)}")
    result = SUITES[name](seed=seed)
    logger.info(result.summary())
    return result
