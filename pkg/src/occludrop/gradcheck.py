"""Central finite-difference gradient verification.

The harness treats the graph builder as a black box: it reruns the forward
pass with perturbed inputs and compares the central difference against the
analytic gradient. Only meaningful at float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError
from .tensor import Tensor, default_dtype


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list
    passed: bool
    tolerance: float


def _scan_finite(loss: Tensor) -> None:
    for node in loss.graph_nodes():
        if not np.all(np.isfinite(node.data)):
            raise NumericError(f"non-finite value produced by op '{node.op}'")


def finite_difference_check(
    fn,
    inputs,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-3,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn(*inputs)`` against central differences.

    ``fn`` must be a pure function of the input tensors returning a scalar
    Tensor. ``sample`` limits the check to that many randomly chosen
    coordinates per input (useful on large parameter sets). The relative
    error denominator is floored to keep near-zero gradients comparable.
    """
    if default_dtype() != np.dtype(np.float64):
        raise ContractError("finite_difference_check requires the float64 default dtype")
    loss = fn(*inputs)
    if loss.data.size != 1:
        raise ContractError("finite_difference_check needs a scalar-valued fn")
    _scan_finite(loss)
    for t in inputs:
        t.zero_grad()
    loss.backward()
    analytic = [
        (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for t in inputs
    ]
    for t in inputs:
        t.zero_grad()

    per_input = []
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if sample is not None and sample < flat.size:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.choice(flat.size, size=sample, replace=False)
        worst = 0.0
        aflat = a.reshape(-1)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + step
            f_plus = fn(*inputs).item()
            flat[j] = orig - step
            f_minus = fn(*inputs).item()
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(aflat[j]), abs(numeric), floor)
            worst = max(worst, abs(aflat[j] - numeric) / denom)
        per_input.append(worst)
    max_err = max(per_input) if per_input else 0.0
    return GradCheckReport(
        max_rel_error=max_err,
        per_input=per_input,
        passed=max_err < tolerance,
        tolerance=tolerance,
    )


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    passed: bool


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _projection(rng, shape):
    r = rng.standard_normal(shape)

    def project(out):
        return (out * Tensor(r)).sum()

    return project


def _suite_cases(seed: int):
    """One (name, fn, inputs) triple per differentiable primitive."""
    from . import backbone as bb
    from . import lcd as lcdmod
    from . import sam as sammod
    from . import spatial_reg as sr
    from . import tensor as T

    rng = np.random.default_rng(seed)
    cases = []

    n, ci, co = 2, int(rng.integers(1, 4)), int(rng.integers(2, 5))
    h = int(rng.integers(4, 7))
    x = _rand(rng, n, ci, h, h)
    w = _rand(rng, co, ci, 3, 3)
    proj = _projection(rng, (n, co, h, h))
    cases.append(
        ("conv2d", lambda x, w, p=proj: p(T.conv2d(x, w, stride=1, padding=1)), [x, w])
    )

    din, dout = int(rng.integers(3, 6)), int(rng.integers(2, 6))
    x = _rand(rng, 3, din)
    w = _rand(rng, dout, din)
    b = _rand(rng, dout)
    proj = _projection(rng, (3, dout))
    cases.append(("linear", lambda x, w, b, p=proj: p(T.linear(x, w, b)), [x, w, b]))

    c = int(rng.integers(2, 5))
    x = _rand(rng, 3, c, 2, 2)
    scale = Tensor(1.0 + 0.1 * rng.standard_normal(c), requires_grad=True)
    shift = _rand(rng, c)
    proj = _projection(rng, (3, c, 2, 2))

    def bn_fn(x, scale, shift, p=proj):
        stats = T.BatchStats.for_channels(x.shape[1])
        return p(T.batchnorm(x, scale, shift, stats, training=True))

    cases.append(("batchnorm", bn_fn, [x, scale, shift]))

    nm, cm = 4, 3
    xm = _rand(rng, nm, cm, 2, 2)
    mscale = Tensor(1.0 + 0.1 * rng.standard_normal(cm), requires_grad=True)
    mshift = _rand(rng, cm)
    mask_rng = np.random.default_rng(seed + 1)
    while True:  # keep every channel alive somewhere; degeneracy is tested elsewhere
        mask = lcdmod.sample_mask(nm, cm, 2, 2, lcdmod.GammaPolicy(1, 1), mask_rng)
        if mask.dropped_sample_counts().max() < nm:
            break
    projm = _projection(rng, (nm, cm, 2, 2))

    def mbn_fn(x, scale, shift):
        stats = T.BatchStats.for_channels(cm)
        return projm(lcdmod.masked_batchnorm(x, scale, shift, mask, stats, training=True))

    cases.append(("masked_batchnorm", mbn_fn, [xm, mscale, mshift]))

    x = _rand(rng, 3, 4)
    x.data += np.sign(x.data) * 1e-2  # keep coordinates away from the relu kink
    proj = _projection(rng, (3, 4))
    cases.append(("relu", lambda x, p=proj: p(T.relu(x)), [x]))

    x = _rand(rng, 2, 3, 4, 4)
    proj = _projection(rng, (2, 3))
    cases.append(("global_avg_pool", lambda x, p=proj: p(T.global_avg_pool(x)), [x]))

    xl = _rand(rng, 2, 4, 3, 3)
    lmask = lcdmod.sample_mask(
        2, 4, 3, 3, lcdmod.GammaPolicy(gamma_min=1, gamma_max=2), np.random.default_rng(seed + 2)
    )
    projl = _projection(rng, (2, 4, 3, 3))
    cases.append(
        ("lcd_apply", lambda x, p=projl, m=lmask: p(lcdmod.apply_lcd(x, m, training=True)), [xl])
    )

    c, c_mid, hidden, hs = 6, 2, 6, 3
    xs = _rand(rng, 2, c, hs, hs)
    conv1x1 = _rand(rng, c_mid, c, 1, 1)
    fc1_w = Tensor(0.3 * rng.standard_normal((hidden, c_mid * hs * hs)), requires_grad=True)
    fc1_b = _rand(rng, hidden)
    fc2_w = Tensor(0.3 * rng.standard_normal((c, hidden)), requires_grad=True)
    fc2_b = _rand(rng, c)
    projs = _projection(rng, (2, c, hs, hs))

    def sam_fn(x, cw, w1, b1, w2, b2):
        params = sammod.SamParams(conv1x1=cw, fc1_w=w1, fc1_b=b1, fc2_w=w2, fc2_b=b2)
        _, out = sammod.sam_forward(x, params)
        return projs(out)

    cases.append(("sam", sam_fn, [xs, conv1x1, fc1_w, fc1_b, fc2_w, fc2_b]))

    # Resample until every filter-pair sum is clear of the |.| kink.
    for _ in range(20):
        wf = rng.standard_normal((4, 2, 3, 3))
        bank = sr.FilterBank(Tensor(wf))
        s = sr.pairwise_column_cosine_sums(bank.weights.data, bank.column_mode)
        off = s[~np.eye(4, dtype=bool)]
        if np.min(np.abs(off)) > 1e-3:
            break
    wft = Tensor(wf, requires_grad=True)
    cases.append(
        ("filter_orthogonal_loss", lambda w: sr.filter_orthogonal_loss(sr.FilterBank(w)), [wft])
    )

    f = _rand(rng, 2, 3, 3, 3)
    cases.append(
        ("response_orthogonal_loss", lambda f: sr.response_orthogonal_loss(sr.ResponseSet(f)), [f])
    )

    num_ids, dim = 5, 6
    emb = _rand(rng, 4, dim)
    cw = _rand(rng, num_ids, dim)
    labels = rng.integers(0, num_ids, size=4)

    def margin_fn(emb, cw):
        head = bb.MarginHead(class_weights=cw, margin=0.5, scale=64.0)
        return bb.margin_loss(emb, labels, head)

    cases.append(("margin_loss", margin_fn, [emb, cw]))

    return cases


def run_primitive_gradient_suite(
    seeds: int = 20, step: float = 1e-5, tolerance: float = 1e-4
) -> list:
    """Run the finite-difference check for every registered primitive."""
    worst: dict[str, float] = {}
    for seed in range(seeds):
        for name, fn, inputs in _suite_cases(seed):
            report = finite_difference_check(fn, inputs, step=step, tolerance=tolerance)
            worst[name] = max(worst.get(name, 0.0), report.max_rel_error)
    return [SuiteResult(name, err, err < tolerance) for name, err in worst.items()]
