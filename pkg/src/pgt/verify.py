"""Invariant checks run on small random models.

Each check returns a :class:`CheckResult`; :func:`run_suite` runs all of
them and is what ``pgt verify`` reports.  Invariant ids:

    EQ    step-by-step forward equals the one-pass Markov layout
    C1    later steps never change earlier outputs
    C2    no gradient crosses a step boundary backwards; carried taps get zero
    GRAD  accumulated gradients match finite differences of the truncated loss
    ACC   accumulated gradient equals the sum of per-step gradients
    DEG   P=1 progressive training equals integrated training
    PMCO  momentum recurrence matches a hand-unrolled reference
    DPR   DPR draws respect the choice set and the rounding rule
    MEM   progressive peak activations do not grow with P
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .analysis import (default_tolerance, forward_equivalence_check, one_pass_loss, one_pass_markov_forward,
                       peak_activation_memory)
from .layers import LayerState, Model, ModelSpec, OperatorVariant, TemporalConvParams, markov_step_conv
from .schedule import DprMode, dpr_sample, make_schedule, steps_for
from .training import integrated_backward, progressive_backward

VARIANTS = ("mco", "cmco-avg", "cmco-max", "pmco", "pmco@0.8")


@dataclass
class CheckResult:
    id: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.id:5s} {self.detail}"


def random_model(rng: np.random.Generator, dtype="float64", max_layers=4, max_channels=16,
                 in_channels=None, num_classes=3) -> Model:
    """Random stack of 1..max_layers temporal layers with random Markov variants."""
    n = int(rng.integers(1, max_layers + 1))
    c_in = in_channels or int(rng.integers(1, max_channels + 1))
    layers = []
    for _ in range(n):
        variant = VARIANTS[int(rng.integers(len(VARIANTS)))]
        layers.append(f"temporal:{int(rng.integers(1, max_channels + 1))}:3:{variant}")
        if rng.random() < 0.7:
            layers.append("relu")
    spec = ModelSpec(c_in, num_classes, layers, dtype=dtype)
    model = Model(spec, seed=int(rng.integers(2**31)))
    # nonzero biases keep relu inputs off the kink at exactly 0 (dead layers would otherwise put them there)
    for name, p in model.params.items():
        if name.endswith("bias"):
            p.value[...] = rng.normal(0.0, 0.1, size=p.value.shape)
    return model


def random_case(rng, dtype="float64", step_lengths=(2, 4, 8), max_steps=5, batch=2, **kw):
    model = random_model(rng, dtype, **kw)
    t = int(rng.choice(step_lengths))
    p = int(rng.integers(1, max_steps + 1))
    sched = make_schedule(None, t, p)
    x = rng.standard_normal((batch, sched.total_length, model.spec.in_channels))
    y = rng.integers(model.spec.num_classes, size=batch)
    return model, sched, x.astype(model.dtype), y


def check_equivalence(rng, n=50, dtype="float64") -> CheckResult:
    worst = 0.0
    tol = default_tolerance(dtype)
    for _ in range(n):
        model, sched, x, _ = random_case(rng, dtype)
        worst = max(worst, forward_equivalence_check(model, x, sched, tol)["max_abs_diff"])
    return CheckResult("EQ", worst <= tol, f"{n} models, max |diff| {worst:.3g} (tol {tol:g})")


def step_outputs(model: Model, x, sched) -> list[np.ndarray]:
    state = model.initial_state()
    outs = []
    for a, b in sched.step_ranges:
        feats, state = model.features(ad.constant(x[:, a:b]), state)
        outs.append(feats.value)
    return outs


def check_one_way_forward(rng, n=20, dtype="float64") -> CheckResult:
    bad = 0
    for _ in range(n):
        model, sched, x, _ = random_case(rng, dtype, max_steps=5)
        if sched.num_steps < 2:
            continue
        base = step_outputs(model, x, sched)
        p = int(rng.integers(1, sched.num_steps))  # perturb step p+1 (0-based p) beyond the shared frame
        a, b = sched.step_ranges[p]
        x2 = x.copy()
        x2[:, a + 1:b] += rng.standard_normal(x2[:, a + 1:b].shape)
        pert = step_outputs(model, x2, sched)
        if any(np.any(base[q] != pert[q]) for q in range(p)):
            bad += 1
    return CheckResult("C1", bad == 0, f"{n} configurations, {bad} with earlier outputs changed")


def _grads(model):
    return [p.grad.copy() for p in model.parameters()]


def check_truncation(rng, n=20, dtype="float64") -> CheckResult:
    """Per-step loss isolation on the one-pass graph, plus zero gradient into carried taps."""
    problems = []
    for case in range(n):
        model, sched, x, y = random_case(rng, dtype)
        p_steps = sched.num_steps
        for p in range(p_steps):
            res = one_pass_markov_forward(model, x, sched, differentiable_input=True)
            model.zero_grad()
            ad.backward(ad.cross_entropy(res.logits[:, p], y))
            g_in = res.inputs.grad
            leaked = [q for q in range(p_steps) if q != p and np.any(g_in[:, q] != 0)]
            if leaked:
                problems.append(f"case {case}: step {p + 1} loss reached steps {[q + 1 for q in leaked]}")
            if not any(np.any(g != 0) for g in _grads(model)):
                problems.append(f"case {case}: step {p + 1} gave no parameter gradient")
    # the carried feature itself, fed as a graph node
    w = rng.standard_normal((3, 4, 5))
    params = TemporalConvParams.from_arrays(w)
    for variant in ("mco", "cmco-avg", "pmco"):
        v = OperatorVariant.parse(variant)
        carry = ad.leaf(rng.standard_normal(4))
        state = LayerState(carried_boundary=carry, pmco_momentum=carry)
        out, _ = markov_step_conv(ad.constant(rng.standard_normal((6, 4))), state, params, v)
        ad.backward(ad.sum(out * out))
        if np.any(carry.grad != 0):
            problems.append(f"{variant}: nonzero gradient into carried f_past")
    detail = f"{n} configurations" if not problems else "; ".join(problems[:3])
    return CheckResult("C2", not problems, detail)


def check_gradients(rng, n=5, eps=1e-5, rtol=1e-5) -> CheckResult:
    """Progressive accumulated gradient vs central differences of the truncated total loss (f64)."""
    worst = 0.0
    for _ in range(n):
        model, sched, x, y = random_case(rng, "float64", max_layers=2, max_channels=6, batch=2,
                                         step_lengths=(2, 4), max_steps=3, num_classes=3)
        progressive_backward(model, x, y, sched)
        grads = _grads(model)
        frozen = one_pass_markov_forward(model, x, sched).carries
        for param, g in zip(model.parameters(), grads):
            orig = param.value.copy()

            def f(v, param=param):
                param.value[...] = v
                return float(one_pass_loss(one_pass_markov_forward(model, x, sched, frozen), y).value)

            fd = ad.finite_difference_grad(f, orig, eps)
            param.value[...] = orig
            scale = max(np.max(np.abs(fd)), 1e-8)
            worst = max(worst, float(np.max(np.abs(fd - g)) / scale))
    return CheckResult("GRAD", worst <= rtol, f"{n} nets, max rel err {worst:.3g} (tol {rtol:g})")


def per_step_gradients(model: Model, x, y, sched, loss_aggregation="per_step_mean") -> list[list[np.ndarray]]:
    """Gradient of each step's (weighted) loss, each computed in its own graph from the true incoming state."""
    weight = 1.0 / sched.num_steps if loss_aggregation == "per_step_mean" else 1.0
    state = model.initial_state()
    out = []
    for a, b in sched.step_ranges:
        model.zero_grad()
        feats, next_state = model.features(ad.constant(x[:, a:b]), state)
        ad.backward(ad.scale(ad.cross_entropy(model.head(feats), y), weight))
        out.append(_grads(model))
        state = next_state
    model.zero_grad()
    return out


def check_accumulation(rng, n=10) -> CheckResult:
    bad = 0
    for _ in range(n):
        model, sched, x, y = random_case(rng, "float64")
        progressive_backward(model, x, y, sched)
        acc = _grads(model)
        parts = per_step_gradients(model, x, y, sched)
        summed = [np.zeros_like(g) for g in acc]
        for step in parts:
            for s, g in zip(summed, step):
                s += g
        if any(np.any(a != s) for a, s in zip(acc, summed)):
            bad += 1
    return CheckResult("ACC", bad == 0, f"{n} configurations, {bad} mismatched (exact comparison)")


def check_degenerate(rng, n=5) -> CheckResult:
    bad = 0
    for _ in range(n):
        model, _, _, y = random_case(rng, "float64")
        t = int(rng.choice((2, 4, 8)))
        clip = rng.standard_normal((2, t, model.spec.in_channels))
        r1 = progressive_backward(model, clip, y, make_schedule(None, t, 1))
        g1 = _grads(model)
        r2 = integrated_backward(model, clip, y)
        g2 = _grads(model)
        if r1.loss != r2.loss or any(np.any(a != b) for a, b in zip(g1, g2)):
            bad += 1
    return CheckResult("DEG", bad == 0, f"{n} models, {bad} differ from integrated training (bit-exact)")


def check_pmco(rng, steps=6) -> CheckResult:
    alpha = 0.7
    params = TemporalConvParams.from_arrays(rng.standard_normal((3, 3, 3)))
    v = OperatorVariant("pmco", alpha=alpha)
    state = LayerState()
    ref = None
    ok = True
    for _ in range(steps):
        x = rng.standard_normal((5, 3))
        _, state = markov_step_conv(ad.constant(x), state, params, v)
        agg = x.mean(axis=0)
        ref = agg if ref is None else alpha * ref + (1 - alpha) * agg
        ok &= bool(np.array_equal(state.pmco_momentum, ref))
    return CheckResult("PMCO", ok, f"{steps} steps against hand-unrolled recurrence")


def check_dpr(rng, draws=2000) -> CheckResult:
    problems = []
    for kind in ("A", "B"):
        mode = DprMode(kind, 8, 36)
        for _ in range(draws):
            t, p, sched = dpr_sample(mode, rng)
            if t not in mode.choices() or p != steps_for(36, t) or abs(sched.total_length - 36) > t - 1:
                problems.append(f"{kind}: T'={t}, P={p}")
                break
    return CheckResult("DPR", not problems, f"{draws} draws per mode" if not problems else "; ".join(problems))


def check_memory(rng, dtype="float64") -> CheckResult:
    model = random_model(rng, dtype, max_layers=3)
    counts = [peak_activation_memory(model, None, make_schedule(None, 8, p)) for p in (2, 4, 8)]
    spread = (max(counts) - min(counts)) / min(counts)
    return CheckResult("MEM", spread <= 0.10, f"peaks {counts} over P=2,4,8 (spread {spread:.1%})")


def run_suite(seed: int = 0, dtype: str = "float64", break_truncation: bool = False) -> list[CheckResult]:
    """Run every check; ``break_truncation`` disables stop_gradient (negative control)."""
    rng = np.random.default_rng(seed)
    checks = [
        lambda: check_equivalence(rng, 50, dtype),
        lambda: check_one_way_forward(rng, 20, dtype),
        lambda: check_truncation(rng, 20, dtype),
        lambda: check_gradients(rng),
        lambda: check_accumulation(rng),
        lambda: check_degenerate(rng),
        lambda: check_pmco(rng),
        lambda: check_dpr(rng),
        lambda: check_memory(rng, dtype),
    ]
    if break_truncation:
        with ad.truncation_disabled():
            return [c() for c in checks]
    return [c() for c in checks]
