"""Neuron-abandoning back-propagation.

Each backbone layer gets an exact (or frozen-pattern affine) inverse; the
cascade walks from the deepest boundary back to the input, reconstructing a
back-propagated feature map (BPFM) at every boundary while neurons not used
in the decision are dropped. Retention masks and neuron-time accounting
formalize which neurons survive.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import IndexOutOfRange, RankDeficient, SingularMatrix, Unreachable
from .forward import ForwardTrace
from .model import (
    BatchNorm2d,
    Conv2d,
    LayerSpec,
    LeakyReLU,
    MaxPool2d,
    ModelGraph,
    ReLU,
)
from .tensor import lu_factor
import scipy.linalg

RIDGE = 1e-8
BN_SCALE_FLOOR = 1e-12
INDEPENDENCE_TOL = 1e-10


@dataclass(frozen=True)
class ConvJacobian:
    """Flattened-neuron Jacobian of a conv layer: entry (i, j) is the kernel
    weight connecting input neuron j to output neuron i; absent entries are
    structural zeros (no connection)."""
    matrix: sp.csr_matrix  # (q, p)
    bias_vector: np.ndarray  # (q,)


@dataclass(frozen=True)
class AffineComposite:
    """Frozen-pattern affine composition of layers g_l .. g_{l+M-1}:
    composite(x) = jacobian @ x + offset exactly."""
    jacobian: sp.csr_matrix
    offset: np.ndarray
    depth: int
    start_layer: int


@dataclass
class SolveDiagnostics:
    rows: np.ndarray | None = None  # selected output rows (None for ridge)
    substituted: bool = False  # first-p selection was singular
    fallback: bool = False  # ridge least squares used
    residual: float = 0.0
    clamped_channels: tuple[int, ...] = ()
    note: str = ""


@dataclass(frozen=True)
class RetentionSet:
    """masks[b] marks decision-retained neurons of A^{b+1} (boundary b)."""
    masks: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class NeuronTimesReport:
    layer: int
    total_neuron_times: int
    decision_neuron_times: int
    abandoned_neuron_times: int
    distinct_decision_neurons: int


@dataclass
class BpfmStack:
    """maps[b] is BPFM at boundary b (shaped like A^{b+1}); maps[-1] equals
    the traced A^{N+1} exactly."""
    maps: list[np.ndarray]
    diagnostics: dict[int, SolveDiagnostics] = field(default_factory=dict)


def assemble_conv_jacobian(
    layer: Conv2d,
    in_shape: tuple[int, int, int],
    out_shape: tuple[int, int, int],
) -> ConvJacobian:
    ic_n, h, w = in_shape
    oc_n, oh_n, ow_n = out_shape
    sh, sw = layer.stride
    ph, pw = layer.padding
    kh, kw = layer.kernel
    oh, ow = np.meshgrid(np.arange(oh_n), np.arange(ow_n), indexing="ij")
    rows_spatial = (oh * ow_n + ow).ravel()
    rows_all, cols_all, vals_all = [], [], []
    oc_offsets = np.arange(oc_n) * (oh_n * ow_n)
    for ic in range(ic_n):
        for a in range(kh):
            for b in range(kw):
                ih = (oh * sh - ph + a).ravel()
                iw = (ow * sw - pw + b).ravel()
                valid = (ih >= 0) & (ih < h) & (iw >= 0) & (iw < w)
                if not np.any(valid):
                    continue
                cols_spatial = ic * h * w + ih[valid] * w + iw[valid]
                rs = rows_spatial[valid]
                rows_all.append((oc_offsets[:, None] + rs[None, :]).ravel())
                cols_all.append(np.tile(cols_spatial, oc_n))
                vals_all.append(np.repeat(layer.weights[:, ic, a, b], rs.size))
    rows = np.concatenate(rows_all)
    cols = np.concatenate(cols_all)
    vals = np.concatenate(vals_all)
    q = oc_n * oh_n * ow_n
    p = ic_n * h * w
    matrix = sp.coo_matrix((vals, (rows, cols)), shape=(q, p)).tocsr()
    bias_vector = np.repeat(layer.bias, oh_n * ow_n)
    return ConvJacobian(matrix, bias_vector)


def frozen_affine(
    model: ModelGraph, trace: ForwardTrace, l: int
) -> tuple[sp.csr_matrix, np.ndarray]:
    """(J, c) with frozen g_l(x) = J x + c, flattened neurons."""
    layer = model.layers[l - 1]
    in_shape = model.boundary_shapes[l - 1]
    out_shape = model.boundary_shapes[l]
    p = int(np.prod(in_shape))
    q = int(np.prod(out_shape))
    if isinstance(layer, Conv2d):
        cj = assemble_conv_jacobian(layer, in_shape, out_shape)
        return cj.matrix, cj.bias_vector
    if isinstance(layer, BatchNorm2d):
        s = layer.scale / np.sqrt(layer.running_var + layer.epsilon)
        spatial = in_shape[1] * in_shape[2]
        diag = np.repeat(s, spatial)
        offset = np.repeat(layer.shift - s * layer.running_mean, spatial)
        return sp.diags(diag, format="csr"), offset
    if isinstance(layer, ReLU):
        diag = trace.relu_masks[l].reshape(-1).astype(np.float64)
        return sp.diags(diag, format="csr"), np.zeros(p)
    if isinstance(layer, LeakyReLU):
        mask = trace.relu_masks[l].reshape(-1)
        diag = np.where(mask, 1.0, layer.negative_slope)
        return sp.diags(diag, format="csr"), np.zeros(p)
    if isinstance(layer, MaxPool2d):
        idx = trace.pool_indices[l]
        matrix = sp.csr_matrix(
            (np.ones(q), (np.arange(q), idx)), shape=(q, p)
        )
        return matrix, np.zeros(q)
    raise TypeError(f"unknown layer {layer!r}")


def _greedy_independent_rows(dense: np.ndarray, p: int) -> np.ndarray | None:
    """Earliest-first selection of p linearly independent rows via
    modified Gram-Schmidt with one reorthogonalization pass."""
    basis = np.zeros((p, dense.shape[1]))
    k = 0
    selected = []
    for i in range(dense.shape[0]):
        r = dense[i]
        nr = np.linalg.norm(r)
        if nr == 0.0:
            continue
        res = r - basis[:k].T @ (basis[:k] @ r)
        res -= basis[:k].T @ (basis[:k] @ res)
        n_res = np.linalg.norm(res)
        if n_res > INDEPENDENCE_TOL * nr:
            basis[k] = res / n_res
            selected.append(i)
            k += 1
            if k == p:
                return np.asarray(selected)
    return None


def _ridge_solve(jac: sp.csr_matrix, offset: np.ndarray, y: np.ndarray) -> np.ndarray:
    rhs = y - offset
    gram = (jac.T @ jac).toarray()
    gram[np.diag_indices_from(gram)] += RIDGE
    x = scipy.linalg.solve(gram, jac.T @ rhs, assume_a="pos")
    if not np.all(np.isfinite(x)):
        raise RankDeficient("ridge least-squares solve produced non-finite values")
    return x


def invert_affine_square(
    jac: sp.csr_matrix | np.ndarray,
    offset: np.ndarray,
    y: np.ndarray,
    p: int,
) -> tuple[np.ndarray, SolveDiagnostics]:
    """Solve a p-square subsystem of jac @ x + offset = y (q >= p rows).

    Takes rows 1..p in flat order; on singularity, greedily substitutes later
    rows that restore rank; if rank < p over all rows, falls back to
    ridge-regularized least squares over all of them.
    """
    jac = sp.csr_matrix(jac)
    offset = np.asarray(offset, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    diag = SolveDiagnostics()
    rows = np.arange(p)
    dense_first = jac[rows].toarray()
    factors = None
    try:
        factors = lu_factor(dense_first)
        sel = dense_first
    except SingularMatrix:
        diag.substituted = True
        full = jac.toarray()
        rows_alt = _greedy_independent_rows(full, p)
        if rows_alt is not None:
            sel = full[rows_alt]
            try:
                factors = lu_factor(sel)
                rows = rows_alt
            except SingularMatrix:
                factors = None
        if factors is None:
            diag.fallback = True
            x = _ridge_solve(jac, offset, y)
            resid = jac @ x + offset - y
            diag.residual = float(np.max(np.abs(resid))) if resid.size else 0.0
            diag.rows = None
            return x, diag
    rhs = y[rows] - offset[rows]
    x = scipy.linalg.lu_solve(factors, rhs, check_finite=False)
    if not np.all(np.isfinite(x)):
        raise RankDeficient("square solve produced non-finite values")
    diag.rows = rows
    diag.residual = float(np.max(np.abs(sel @ x - rhs))) if p else 0.0
    return x, diag


def compose_frozen_affine(
    model: ModelGraph, trace: ForwardTrace, l: int, p: int | None = None
) -> AffineComposite:
    """Stack g_l .. g_{l+M-1} under the frozen pattern, with minimal M >= 1
    such that the output neuron count reaches p (= |A^l| by default).

    The offset is the frozen composite evaluated at the zero input, so the
    composite is exactly affine and reproduces the traced activations.
    """
    if not 1 <= l <= model.num_layers:
        raise ValueError(f"layer {l} out of range")
    if p is None:
        p = int(np.prod(model.boundary_shapes[l - 1]))
    depth = None
    for m in range(1, model.num_layers - l + 2):
        if int(np.prod(model.boundary_shapes[l - 1 + m])) >= p:
            depth = m
            break
    if depth is None:
        raise Unreachable(
            f"no stacking depth from layer {l} reaches {p} output neurons"
        )
    return _compose(model, trace, l, depth)


def _compose(model: ModelGraph, trace: ForwardTrace, l: int, depth: int) -> AffineComposite:
    jac = None
    offset = None
    for j in range(l, l + depth):
        lj, cj = frozen_affine(model, trace, j)
        if jac is None:
            jac, offset = lj, cj
        else:
            offset = lj @ offset + cj
            jac = (lj @ jac).tocsr()
    return AffineComposite(jac, offset, depth, l)


def invert_conv(
    model: ModelGraph, trace: ForwardTrace, l: int, incoming: BpfmStack
) -> tuple[np.ndarray, SolveDiagnostics]:
    """Reconstruct BPFM^{l-1} for conv layer g_l from the deeper maps."""
    in_shape = model.boundary_shapes[l - 1]
    out_shape = model.boundary_shapes[l]
    p = int(np.prod(in_shape))
    q = int(np.prod(out_shape))
    layer = model.layers[l - 1]
    assert isinstance(layer, Conv2d)
    if q >= p:
        cj = assemble_conv_jacobian(layer, in_shape, out_shape)
        y = incoming.maps[l].reshape(-1)
        x, diag = invert_affine_square(cj.matrix, cj.bias_vector, y, p)
        return x.reshape(in_shape), diag
    try:
        composite = compose_frozen_affine(model, trace, l, p)
    except Unreachable:
        # Tail of the backbone shrinks below p for every depth: minimum-norm
        # ridge solve against the deepest available map, flagged approximate.
        composite = _compose(model, trace, l, model.num_layers - l + 1)
        y = incoming.maps[model.num_layers].reshape(-1)
        x = _ridge_solve(composite.jacobian, composite.offset, y)
        resid = composite.jacobian @ x + composite.offset - y
        diag = SolveDiagnostics(
            rows=None,
            fallback=True,
            residual=float(np.max(np.abs(resid))),
            note="unreachable neuron count; ridge over deepest map",
        )
        return x.reshape(in_shape), diag
    boundary = l - 1 + composite.depth
    y = incoming.maps[boundary].reshape(-1)
    x, diag = invert_affine_square(composite.jacobian, composite.offset, y, p)
    return x.reshape(in_shape), diag


def invert_batchnorm(layer: BatchNorm2d, bpfm: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    """x = sqrt(Var + eps)/scale * (y - shift) + Mean per channel; channels
    with |scale| < 1e-12 are clamped (sign of 0 taken as +) and reported."""
    scale = layer.scale.copy()
    tiny = np.abs(scale) < BN_SCALE_FLOOR
    clamped = tuple(int(i) for i in np.nonzero(tiny)[0])
    signs = np.where(scale >= 0, 1.0, -1.0)
    scale = np.where(tiny, signs * BN_SCALE_FLOOR, scale)
    root = np.sqrt(layer.running_var + layer.epsilon)
    x = (root / scale)[:, None, None] * (bpfm - layer.shift[:, None, None]) \
        + layer.running_mean[:, None, None]
    return x, clamped


def invert_relu(bpfm: np.ndarray) -> np.ndarray:
    # Pass-through: negatives were already abandoned on the forward pass.
    return bpfm.copy()


def invert_leakyrelu(layer: LeakyReLU, bpfm: np.ndarray) -> np.ndarray:
    return np.where(bpfm >= 0, bpfm, bpfm / layer.negative_slope)


def invert_maxpool(
    layer: MaxPool2d,
    indices: np.ndarray,
    bpfm: np.ndarray,
    in_shape: tuple[int, int, int],
) -> np.ndarray:
    p = int(np.prod(in_shape))
    if np.any(indices < 0) or np.any(indices >= p):
        raise IndexOutOfRange("stored pool index outside the layer input")
    out = np.zeros(p)
    out[indices] = bpfm.reshape(-1)
    return out.reshape(in_shape)


def backprop_feature_maps(model: ModelGraph, trace: ForwardTrace) -> BpfmStack:
    """BPFM^N := A^{N+1}; then kind-dispatched inverses down to BPFM^0."""
    n = model.num_layers
    maps: list[np.ndarray | None] = [None] * (n + 1)
    maps[n] = trace.activations[n].copy()
    stack = BpfmStack(maps=maps)  # type: ignore[arg-type]
    for l in range(n, 0, -1):
        layer = model.layers[l - 1]
        try:
            if isinstance(layer, Conv2d):
                x, diag = invert_conv(model, trace, l, stack)
                stack.diagnostics[l] = diag
            elif isinstance(layer, BatchNorm2d):
                x, clamped = invert_batchnorm(layer, stack.maps[l])
                if clamped:
                    stack.diagnostics[l] = SolveDiagnostics(
                        clamped_channels=clamped, note="batchnorm scale clamped"
                    )
            elif isinstance(layer, ReLU):
                x = invert_relu(stack.maps[l])
            elif isinstance(layer, LeakyReLU):
                x = invert_leakyrelu(layer, stack.maps[l])
            elif isinstance(layer, MaxPool2d):
                x = invert_maxpool(
                    layer, trace.pool_indices[l], stack.maps[l],
                    model.boundary_shapes[l - 1],
                )
            else:
                raise TypeError(f"unknown layer {layer!r}")
        except Exception as exc:
            exc.args = (f"layer {l}: {exc}",) + exc.args[1:]
            raise
        stack.maps[l - 1] = x
    return stack


def compute_retention(model: ModelGraph, trace: ForwardTrace) -> RetentionSet:
    """Backward-traced decision-making neuron masks at every boundary."""
    n = model.num_layers
    masks: list[np.ndarray | None] = [None] * (n + 1)
    masks[n] = np.ones(model.boundary_shapes[n], dtype=bool)
    for l in range(n, 0, -1):
        layer = model.layers[l - 1]
        out_mask = masks[l]
        in_shape = model.boundary_shapes[l - 1]
        if isinstance(layer, Conv2d):
            cj = assemble_conv_jacobian(layer, in_shape, model.boundary_shapes[l])
            structure = cj.matrix.copy()
            structure.data = np.ones_like(structure.data)
            hit = structure.T @ out_mask.reshape(-1).astype(np.float64)
            masks[l - 1] = (hit > 0).reshape(in_shape)
        elif isinstance(layer, BatchNorm2d):
            masks[l - 1] = out_mask.copy()
        elif isinstance(layer, ReLU):
            masks[l - 1] = out_mask & trace.relu_masks[l]
        elif isinstance(layer, LeakyReLU):
            masks[l - 1] = out_mask.copy()
        elif isinstance(layer, MaxPool2d):
            flat = np.zeros(int(np.prod(in_shape)), dtype=bool)
            kept = trace.pool_indices[l][out_mask.reshape(-1)]
            flat[kept] = True
            masks[l - 1] = flat.reshape(in_shape)
    return RetentionSet(masks=tuple(masks))  # type: ignore[arg-type]


def count_neuron_times(
    model: ModelGraph,
    trace: ForwardTrace,
    l: int,
    retention: RetentionSet | None = None,
) -> NeuronTimesReport:
    """Incidence accounting for layer g_l: one neuron-time per (input neuron,
    output window) pair; elementwise layers have receptive field 1."""
    if not 1 <= l <= model.num_layers:
        raise ValueError(f"layer {l} out of range 1..{model.num_layers}")
    if retention is None:
        retention = compute_retention(model, trace)
    layer = model.layers[l - 1]
    in_shape = model.boundary_shapes[l - 1]
    out_shape = model.boundary_shapes[l]
    out_mask = retention.masks[l].reshape(-1)
    distinct = int(np.count_nonzero(retention.masks[l - 1]))
    if isinstance(layer, Conv2d):
        cj = assemble_conv_jacobian(layer, in_shape, out_shape)
        csr = cj.matrix
        per_row = np.diff(csr.indptr)
        total = int(per_row.sum())
        decision = int(per_row[out_mask].sum())
    elif isinstance(layer, MaxPool2d):
        window = layer.kernel[0] * layer.kernel[1]
        total = out_mask.size * window
        decision = int(np.count_nonzero(out_mask)) * window
    else:
        total = out_mask.size
        decision = int(np.count_nonzero(out_mask))
    return NeuronTimesReport(
        layer=l,
        total_neuron_times=total,
        decision_neuron_times=decision,
        abandoned_neuron_times=total - decision,
        distinct_decision_neurons=distinct,
    )
