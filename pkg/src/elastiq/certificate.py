"""Logit-drift certificates for compressed runtime profiles.

Replacing stored full-rank weights with truncated, quantized ones moves the
logits. The bounds here control that movement layer by layer: each layer
contributes (sensitivity of the logits to a perturbation injected right
after that layer's weight multiply) x (operator-norm of the weight change)
x (norm of the signal entering the layer). Summing the contributions gives
a pointwise bound at one input, and swapping the per-input signal norm for
its calibration-set RMS gives the expected-drift aggregate.

Two sensitivity proxies are available. The conservative one multiplies
per-block Lipschitz bounds and is a guarantee: for any profile, observed
drift never exceeds the pointwise bound. The sampled one power-iterates
the exact downstream Jacobian at calibration inputs and smooths the
estimates with an exponential moving average; it is tighter but can
undershoot, so nothing downstream treats it as certified.

Tail gains are evaluated at both the stored and the compressed weights and
the larger is used. Truncation alone cannot grow a spectral norm here, but
low-bit quantization can, and a tail evaluated only at stored weights
would silently void the guarantee.
"""

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import elastic, linalg, network

CONSERVATIVE = "conservative"

# iterative spectral-norm estimates converge from below; every such value
# that enters a certificate is inflated by this factor
_SLACK = 1.0 + 1e-8

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class PowerIter:
    """Sampled-Jacobian proxy mode: power-iteration steps + EMA decay."""

    steps: int = 5
    ema_decay: float = 0.99

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")


def network_fingerprint(net):
    """sha256 over every parameter array, shape-tagged, order-fixed."""
    h = hashlib.sha256()
    for blk in net.blocks:
        lay = blk.elastic
        h.update(lay.kind.encode())
        h.update(blk.activation.encode())
        h.update(b"r" if blk.residual else b".")
        h.update(np.asarray([lay.k_min, lay.k_max], dtype=np.int64).tobytes())
        arrays = [a for _, a in network._factor_arrays(lay)]
        arrays += [lay.bias, blk.gamma, blk.beta]
        for a in arrays:
            if a is None:
                h.update(b"none")
                continue
            a = np.ascontiguousarray(a, dtype=np.float64)
            h.update(np.asarray(a.shape, dtype=np.int64).tobytes())
            h.update(a.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class CalibrationStats:
    """Per-layer input-norm statistics over a calibration set.

    alpha[i] is the root-mean-square of the l2 norm of the signal entering
    block i; max_norm[i] is the running maximum of the same norms, kept for
    conservative fallbacks. fingerprint ties the stats to the exact network
    parameters they were measured on.
    """

    alpha: tuple
    max_norm: tuple
    count: int
    fingerprint: str

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be positive")
        if len(self.alpha) != len(self.max_norm):
            raise ValueError("alpha and max_norm lengths differ")
        for a, m in zip(self.alpha, self.max_norm):
            if a < 0.0:
                raise ValueError("alpha entries must be non-negative")
            if a > m * (1.0 + 1e-12) + 1e-300:
                raise ValueError("alpha cannot exceed the running max")


def _row_norms(a, single):
    a = np.asarray(a, dtype=np.float64)
    if single:
        return np.array([np.linalg.norm(a.ravel())])
    return np.sqrt(np.sum(a.reshape(a.shape[0], -1) ** 2, axis=1))


def calibrate(net, inputs):
    """Measure per-layer input-norm RMS and maxima on the full model."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.size == 0:
        raise ValueError("calibration set is empty")
    first = net.blocks[0]
    want = 3 if first.is_conv else 1
    if x.ndim == want:
        x = x[None, ...]
    tr = network.forward(net, x, None)
    alpha, mx = [], []
    for layer_in in tr.inputs:
        norms = _row_norms(layer_in, single=False)
        alpha.append(float(np.sqrt(np.mean(norms ** 2))))
        mx.append(float(np.max(norms)))
    return CalibrationStats(alpha=tuple(alpha), max_norm=tuple(mx),
                            count=int(x.shape[0]),
                            fingerprint=network_fingerprint(net))


def _check_stats(net, stats):
    if stats.fingerprint != network_fingerprint(net):
        raise ValueError(
            "stale calibration statistics: network fingerprint mismatch")


def _local_scale(block):
    # post-weight contraction of one block: activation Lipschitz times the
    # largest frozen scale; the residual branch cancels in a weight-only
    # perturbation, so it does not appear here
    g = network.activation_lipschitz(block.activation)
    if block.gamma is not None:
        g *= float(np.max(np.abs(block.gamma)))
    return g


def _tail_gain(block, entry):
    full_w = elastic.truncate(block.elastic, block.elastic.k_max)
    wg = network.weight_gain(full_w)
    if entry is not None:
        k, q = entry
        if k != block.elastic.k_max or q is not None:
            comp = elastic.effective_weight(block.elastic, k, q)
            wg = max(wg, network.weight_gain(comp))
    g = _local_scale(block) * wg * _SLACK
    return 1.0 + g if block.residual else g


def _conservative_multipliers(net, entries=None):
    """Per-layer certified sensitivities: local scale times the product of
    downstream block gains, gains taken at the worse of stored and
    compressed weights."""
    n = len(net.blocks)
    gains = [_tail_gain(b, entries[i] if entries else None)
             for i, b in enumerate(net.blocks)]
    suffix = [1.0] * (n + 1)
    for i in range(n - 1, -1, -1):
        suffix[i] = gains[i] * suffix[i + 1]
    return [_local_scale(net.blocks[i]) * suffix[i + 1] for i in range(n)]


def _act_derivative(name, z):
    if name == network.RELU:
        return (z > 0.0).astype(np.float64)
    if name == network.IDENTITY:
        return np.ones_like(z)
    cdf = 0.5 * (1.0 + erf(z / _SQRT2))
    return cdf + z * np.exp(-0.5 * z * z) * _INV_SQRT2PI


def _post_weight_jacobian(net, ell, x):
    """Exact Jacobian of the logits w.r.t. the signal just after block
    ell's weight multiply, at input x, full stored weights."""
    tr = network.forward(net, x, None)
    jac = None
    for j in range(ell, len(net.blocks)):
        blk = net.blocks[j]
        lay = blk.elastic
        a = tr.inputs[j]
        w = elastic.effective_weight(lay, lay.k_max)
        u = a @ w.T
        if lay.bias is not None:
            u = u + lay.bias
        scale = np.ones(u.shape[0])
        z = u
        if blk.gamma is not None:
            scale = blk.gamma
            z = scale * u + blk.beta
        d = _act_derivative(blk.activation, z) * scale
        if j == ell:
            jac = d[:, None] * np.eye(u.shape[0])
        else:
            step = d[:, None] * w
            if blk.residual:
                step = step + np.eye(step.shape[0])
            jac = step @ jac
    return jac


def _jacobian_norm_estimate(jac, steps):
    rng = np.random.default_rng(0)
    v = rng.standard_normal(jac.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(steps):
        w = jac.T @ (jac @ v)
        n = np.linalg.norm(w)
        if n == 0.0:
            return 0.0
        v = w / n
    return float(np.linalg.norm(jac @ v))


def lipschitz_proxy(net, ell, mode=CONSERVATIVE, calibration_inputs=None,
                    profile=None):
    """Sensitivity of the logits to a perturbation injected right after
    layer ell's weight multiply.

    Conservative mode multiplies per-block Lipschitz bounds downstream of
    the injection point (guaranteed upper bound; with the final block a
    plain linear head, the last layer's value is exactly 1). PowerIter
    mode power-iterates the exact downstream Jacobian at each calibration
    input and EMA-smooths the estimates; it can undershoot and is never
    treated as certified. The optional profile widens conservative tail
    gains to cover the compressed weights.
    """
    n = len(net.blocks)
    if not 0 <= int(ell) < n:
        raise ValueError("layer index out of range")
    ell = int(ell)
    if mode == CONSERVATIVE:
        entries = network.resolve_profile(net, profile) \
            if profile is not None else None
        return float(_conservative_multipliers(net, entries)[ell])
    if not isinstance(mode, PowerIter):
        raise ValueError("mode must be CONSERVATIVE or a PowerIter")
    if any(b.is_conv for b in net.blocks):
        raise ValueError("sampled proxy supports dense stacks only")
    if calibration_inputs is None:
        raise ValueError("sampled proxy needs calibration inputs")
    xs = np.atleast_2d(np.asarray(calibration_inputs, dtype=np.float64))
    if xs.shape[0] == 0:
        raise ValueError("sampled proxy needs calibration inputs")
    ema = None
    for row in xs:
        jac = _post_weight_jacobian(net, ell, row)
        est = _jacobian_norm_estimate(jac, mode.steps)
        ema = est if ema is None \
            else mode.ema_decay * ema + (1.0 - mode.ema_decay) * est
    return float(ema)


def _delta_gain(block, k, q):
    """Operator-norm bound on (stored full weight - profile weight)."""
    lay = block.elastic
    if k == lay.k_max and q is None:
        return 0.0
    if not block.is_conv:
        return float(elastic.residual_norm(lay, k, q))
    delta = elastic.truncate(lay, lay.k_max) \
        - elastic.effective_weight(lay, k, q)
    return float(network.weight_gain(delta) * _SLACK)


def compression_gain(net, ell, k, q=None):
    """Operator-norm bound on the weight change layer ell undergoes when
    executed at rank k with q-bit factors (q=None keeps float factors)."""
    n = len(net.blocks)
    if not 0 <= int(ell) < n:
        raise ValueError("layer index out of range")
    return _delta_gain(net.blocks[int(ell)], int(k), q)


def _multipliers(net, entries, mode, calibration_inputs):
    if mode == CONSERVATIVE:
        return _conservative_multipliers(net, entries)
    return [lipschitz_proxy(net, i, mode, calibration_inputs)
            for i in range(len(net.blocks))]


def _ledger_rows(net, stats, profile, mode, calibration_inputs):
    entries = network.resolve_profile(net, profile)
    mults = _multipliers(net, entries, mode, calibration_inputs)
    rows = []
    for i, (blk, (k, q)) in enumerate(zip(net.blocks, entries)):
        rows.append((float(mults[i]), _delta_gain(blk, k, q),
                     float(stats.alpha[i])))
    return rows


def pointwise_bound(net, stats, profile, x, mode=CONSERVATIVE,
                    calibration_inputs=None):
    """Certified drift bound at one input (or a batch, one bound per row),
    evaluated with the full model's layer-input norms."""
    _check_stats(net, stats)
    entries = network.resolve_profile(net, profile)
    mults = _multipliers(net, entries, mode, calibration_inputs)
    dgains = [_delta_gain(b, k, q) for b, (k, q) in zip(net.blocks, entries)]
    first = net.blocks[0]
    want = 3 if first.is_conv else 1
    single = np.asarray(x).ndim == want
    tr = network.forward(net, x, None)
    total = np.zeros(1 if single else np.asarray(x).shape[0])
    for i in range(len(net.blocks)):
        if dgains[i] == 0.0:
            continue
        norms = _row_norms(tr.inputs[i], single)
        total = total + mults[i] * dgains[i] * norms
    return float(total[0]) if single else total


def expected_bound(net, stats, profile, mode=CONSERVATIVE,
                   calibration_inputs=None):
    """Aggregate expected-drift bound: sum over layers of sensitivity x
    weight-change norm x input-norm RMS. Errors on stats measured on a
    different network."""
    _check_stats(net, stats)
    rows = _ledger_rows(net, stats, profile, mode, calibration_inputs)
    total = 0.0
    for mult, dgain, alpha in rows:
        total += mult * dgain * alpha
    return float(total)


@dataclass(frozen=True)
class CertificateLedger:
    """Per-layer certificate rows plus the aggregate they sum to.

    rows[i] = (sensitivity, weight-change norm, input-norm RMS); delta_hat
    is exactly the ordered sum of the row products. quantiles carries
    labeled per-input summaries of both the pointwise bound and the
    observed drift over the calibration set, since either may be wanted
    as a deployment threshold.
    """

    rows: tuple
    delta_hat: float
    mode: object
    quantiles: dict

    def __post_init__(self):
        for row in self.rows:
            if len(row) != 3 or any(v < 0.0 for v in row):
                raise ValueError("ledger rows must be non-negative triples")
        if self.delta_hat < 0.0:
            raise ValueError("aggregate must be non-negative")


def build_ledger(net, stats, profile, calibration_inputs, mode=CONSERVATIVE):
    _check_stats(net, stats)
    rows = _ledger_rows(net, stats, profile, mode, calibration_inputs)
    total = 0.0
    for mult, dgain, alpha in rows:
        total += mult * dgain * alpha
    xs = np.asarray(calibration_inputs, dtype=np.float64)
    bounds = np.atleast_1d(pointwise_bound(
        net, stats, profile, xs, mode, calibration_inputs))
    drifts = np.atleast_1d(network.logit_drift(net, xs, profile))
    def summarize(vals):
        return {"p50": float(np.percentile(vals, 50)),
                "p95": float(np.percentile(vals, 95)),
                "max": float(np.max(vals))}
    quantiles = {"pointwise_bound": summarize(bounds),
                 "observed_drift": summarize(drifts)}
    return CertificateLedger(rows=tuple(rows), delta_hat=float(total),
                             mode=mode, quantiles=quantiles)


def diagnostics(net, stats, profiles, eval_inputs, epsilon,
                mode=CONSERVATIVE, calibration_inputs=None):
    """Coverage, bound-vs-drift correlation, and drift summaries.

    Coverage is the percentage of (profile, input) pairs whose observed
    drift stays within epsilon. Correlation pairs each profile's aggregate
    bound with its mean observed drift; with fewer than two distinct
    aggregate values it is undefined and reported as such.
    """
    profiles = list(profiles)
    if len(profiles) < 2:
        raise ValueError("diagnostics needs at least two profiles")
    _check_stats(net, stats)
    xs = np.asarray(eval_inputs, dtype=np.float64)
    delta_hats, mean_drifts, all_drifts = [], [], []
    for prof in profiles:
        delta_hats.append(expected_bound(net, stats, prof, mode,
                                         calibration_inputs))
        d = np.atleast_1d(network.logit_drift(net, xs, prof))
        mean_drifts.append(float(np.mean(d)))
        all_drifts.append(d)
    flat = np.concatenate(all_drifts)
    dh = np.asarray(delta_hats)
    md = np.asarray(mean_drifts)
    sx = float(np.std(dh))
    sy = float(np.std(md))
    if sx == 0.0 or sy == 0.0:
        corr, defined = None, False
    else:
        corr = float(np.mean((dh - dh.mean()) * (md - md.mean())) / (sx * sy))
        defined = True
    return {
        "coverage_percent": float(100.0 * np.mean(flat <= epsilon)),
        "pearson_correlation": corr,
        "correlation_defined": defined,
        "mean_drift": float(np.mean(flat)),
        "delta_hat_p95": float(np.percentile(dh, 95)),
    }
