"""Self-verification suites: every analytic path in the engine is checked
against an independent oracle (forward re-evaluation, finite differences,
or direct enumeration). Used by the `verify` command and the test suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attribution import (
    cascade_coefficients,
    contribution_weights,
    seed_class_score,
)
from .errors import OrthogonalPair
from .forward import ForwardTrace, forward_trace, frozen_layer_forward, layer_forward
from .model import (
    BatchNorm2d,
    ClassifierHead,
    Conv2d,
    LeakyReLU,
    MaxPool2d,
    ModelGraph,
    ReLU,
)
from .nabp import (
    BpfmStack,
    assemble_conv_jacobian,
    backprop_feature_maps,
    compose_frozen_affine,
    compute_retention,
)
from .tensor import fd_jacobian


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    residual: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{status}  {self.name}  residual={self.residual:.3e}{extra}"


def random_input(model: ModelGraph, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(model.input_shape)


def check_forward_determinism(model: ModelGraph, rng: np.random.Generator) -> CheckResult:
    x = random_input(model, rng)
    t1 = forward_trace(model, x)
    t2 = forward_trace(model, x)
    same = all(
        np.array_equal(a, b) for a, b in zip(t1.activations, t2.activations)
    ) and np.array_equal(t1.output, t2.output)
    return CheckResult("forward determinism (bitwise)", same, 0.0)


def check_conv_jacobians(
    model: ModelGraph,
    rng: np.random.Generator,
    tol: float = 1e-4,
    max_cols: int = 64,
) -> list[CheckResult]:
    """Analytic conv Jacobians against central differences. For large layers
    a random column subset is probed (each column is an independent fd run)."""
    results = []
    for l, layer in enumerate(model.layers, start=1):
        if not isinstance(layer, Conv2d):
            continue
        in_shape = model.boundary_shapes[l - 1]
        out_shape = model.boundary_shapes[l]
        p = int(np.prod(in_shape))
        analytic = assemble_conv_jacobian(layer, in_shape, out_shape).matrix.toarray()
        x0 = rng.standard_normal(p)

        def f(v, _layer=layer, _shape=in_shape):
            return layer_forward(_layer, v.reshape(_shape)).reshape(-1)

        if p <= max_cols:
            numeric = fd_jacobian(f, x0)
            err = float(np.max(np.abs(numeric - analytic)))
        else:
            cols = rng.choice(p, size=max_cols, replace=False)
            err = 0.0
            h = 1e-3
            for j in cols:
                e = np.zeros(p)
                e[j] = h
                col = (f(x0 + e) - f(x0 - e)) / (2 * h)
                err = max(err, float(np.max(np.abs(col - analytic[:, j]))))
        results.append(
            CheckResult(f"conv jacobian vs finite differences (layer {l})", err <= tol, err)
        )
    return results


def roundtrip_layer_residual(
    model: ModelGraph,
    trace: ForwardTrace,
    bpfm: BpfmStack,
    l: int,
) -> tuple[float, str, bool]:
    """Forward BPFM^{l-1} through g_l and compare against the entries of
    BPFM^l the inverse is accountable for. Returns (relative residual,
    detail, exactness-required flag)."""
    layer = model.layers[l - 1]
    x = bpfm.maps[l - 1]
    y = bpfm.maps[l].reshape(-1)
    if isinstance(layer, Conv2d):
        diag = bpfm.diagnostics.get(l)
        if diag is None or diag.rows is None:
            return 0.0, "ridge fallback; no exact rows", False
        in_shape = model.boundary_shapes[l - 1]
        p = int(np.prod(in_shape))
        q = int(np.prod(model.boundary_shapes[l]))
        if q >= p:
            fwd = frozen_layer_forward(model, trace, l, x).reshape(-1)
            target = y
        else:
            composite = compose_frozen_affine(model, trace, l, p)
            fwd = composite.jacobian @ x.reshape(-1) + composite.offset
            target = bpfm.maps[l - 1 + composite.depth].reshape(-1)
        sel = diag.rows
        num = float(np.max(np.abs(fwd[sel] - target[sel]))) if sel.size else 0.0
        denom = 1.0 + float(np.max(np.abs(target[sel]))) if sel.size else 1.0
        return num / denom, f"{sel.size} selected rows", False
    if isinstance(layer, BatchNorm2d):
        fwd = frozen_layer_forward(model, trace, l, x).reshape(-1)
        num = float(np.max(np.abs(fwd - y)))
        return num / (1.0 + float(np.max(np.abs(y)))), "all entries", False
    if isinstance(layer, ReLU):
        mask = trace.relu_masks[l].reshape(-1)
        fwd = frozen_layer_forward(model, trace, l, x).reshape(-1)
        num = float(np.max(np.abs(fwd[mask] - y[mask]))) if mask.any() else 0.0
        return num, "pass-through at traced nonnegative positions", True
    if isinstance(layer, LeakyReLU):
        fwd = layer_forward(layer, x).reshape(-1)
        return float(np.max(np.abs(fwd - y))), "exact bijection", True
    if isinstance(layer, MaxPool2d):
        fwd = frozen_layer_forward(model, trace, l, x).reshape(-1)
        return float(np.max(np.abs(fwd - y))), "gather at stored indices", True
    raise TypeError(f"unknown layer {layer!r}")


def check_roundtrips(
    model: ModelGraph,
    trace: ForwardTrace,
    tol: float = 1e-6,
) -> list[CheckResult]:
    bpfm = backprop_feature_maps(model, trace)
    results = []
    for l, layer in enumerate(model.layers, start=1):
        resid, detail, exact = roundtrip_layer_residual(model, trace, bpfm, l)
        limit = 0.0 if exact else tol
        diag = bpfm.diagnostics.get(l)
        if diag is not None and diag.clamped_channels:
            detail += f"; clamped batchnorm scale in channels {list(diag.clamped_channels)}"
        if diag is not None and diag.fallback:
            detail += "; ridge fallback used"
        results.append(
            CheckResult(
                f"inverse round-trip (layer {l}, {layer.kind})",
                resid <= limit,
                resid,
                detail,
            )
        )
    return results


def frozen_scalar_head(
    model: ModelGraph,
    trace: ForwardTrace,
    boundary: int,
    seed: np.ndarray,
) -> "callable":
    """Scalar map x -> seed . (head output), with layers boundary+1..N applied
    under the frozen trace pattern. Independent of the cascade's Jacobians."""
    shape = model.boundary_shapes[boundary]
    head = model.head

    def f(flat: np.ndarray) -> np.ndarray:
        v = flat.reshape(shape)
        for j in range(boundary + 1, model.num_layers + 1):
            v = frozen_layer_forward(model, trace, j, v)
        pooled = v.mean(axis=(1, 2))
        if isinstance(head, ClassifierHead):
            out = head.fc_weights @ pooled + head.fc_bias
        elif head.l2_normalize:
            out = pooled / np.linalg.norm(pooled)
        else:
            out = pooled
        return np.array([np.dot(seed, out)])

    return f


def check_coefficient_oracle(
    model: ModelGraph,
    trace: ForwardTrace,
    target: int,
    tol: float = 1e-4,
    boundaries: list[int] | None = None,
) -> list[CheckResult]:
    """cascade_coefficients vs the frozen-pattern finite-difference gradient
    of the class score at each requested boundary."""
    seed_lam = seed_class_score(model, trace, target)
    stack = cascade_coefficients(model, trace, seed_lam)
    head = model.head
    assert isinstance(head, ClassifierHead)
    one_hot = np.zeros(head.fc_bias.size)
    one_hot[target] = 1.0
    if boundaries is None:
        boundaries = list(range(model.num_layers + 1))
    results = []
    for b in boundaries:
        f = frozen_scalar_head(model, trace, b, one_hot)
        x0 = trace.activations[b].reshape(-1)
        grad = fd_jacobian(f, x0).reshape(-1)
        lam = stack.coefficients[b].reshape(-1)
        err = float(np.max(np.abs(grad - lam)))
        results.append(
            CheckResult(f"coefficient cascade vs fd gradient (boundary {b})", err <= tol, err)
        )
    return results


def check_omega_properties(
    rng: np.random.Generator, pairs: int = 200
) -> list[CheckResult]:
    sum_err = 0.0
    scale_err = 0.0
    odd_exact = True
    tested = 0
    while tested < pairs:
        d = int(rng.integers(1, 65))
        q = rng.standard_normal(d)
        s = rng.standard_normal(d)
        if abs(np.dot(q, s)) < 1e-9:
            continue
        tested += 1
        omega = contribution_weights(q, s)
        sum_err = max(sum_err, abs(omega.sum() - np.sign(np.dot(q, s))))
        c = float(rng.uniform(0.1, 10.0))
        # relative to the weight magnitude: near-orthogonal pairs blow the
        # weights up to where absolute 1e-12 is below float64 resolution
        delta = np.abs(contribution_weights(c * q, s) - omega)
        scale_err = max(scale_err, float(np.max(delta / (1.0 + np.abs(omega)))))
        if not np.array_equal(contribution_weights(-q, s), -omega):
            odd_exact = False
    orth_raises = False
    try:
        contribution_weights(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    except OrthogonalPair:
        orth_raises = True
    return [
        CheckResult("omega sums to sign(score) = +/-1", sum_err <= 1e-9, sum_err),
        CheckResult("omega invariant under positive rescaling", scale_err <= 1e-12, scale_err),
        CheckResult("omega odd under query negation (exact)", odd_exact, 0.0),
        CheckResult("orthogonal pair raises OrthogonalPair", orth_raises, 0.0),
    ]


def check_pool_gather(model: ModelGraph, trace: ForwardTrace) -> list[CheckResult]:
    results = []
    for l, layer in enumerate(model.layers, start=1):
        if not isinstance(layer, MaxPool2d):
            continue
        src = trace.activations[l - 1].reshape(-1)
        gathered = src[trace.pool_indices[l]].reshape(model.boundary_shapes[l])
        exact = np.array_equal(gathered, trace.activations[l])
        results.append(
            CheckResult(f"pool index gather reproduces output (layer {l})", exact, 0.0)
        )
    return results


def run_all(model: ModelGraph, seed: int = 42) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = [check_forward_determinism(model, rng)]
    results.extend(check_conv_jacobians(model, rng))
    x = random_input(model, rng)
    trace = forward_trace(model, x)
    results.extend(check_pool_gather(model, trace))
    results.extend(check_roundtrips(model, trace))
    if isinstance(model.head, ClassifierHead):
        target = int(np.argmax(trace.output))
        # deepest and shallowest boundaries; interior ones are covered by the
        # layer-local jacobian and round-trip checks
        results.extend(
            check_coefficient_oracle(
                model, trace, target, boundaries=[0, model.num_layers]
            )
        )
    results.extend(check_omega_properties(rng))
    # retention conservation: decision + abandoned incidences match structure
    retention = compute_retention(model, trace)
    from .nabp import count_neuron_times

    ok = True
    for l in range(1, model.num_layers + 1):
        report = count_neuron_times(model, trace, l, retention)
        if report.decision_neuron_times + report.abandoned_neuron_times \
                != report.total_neuron_times:
            ok = False
        if report.distinct_decision_neurons > max(report.decision_neuron_times, 0) \
                and report.decision_neuron_times > 0:
            ok = False
    results.append(CheckResult("neuron-time incidence conservation", ok, 0.0))
    return results
