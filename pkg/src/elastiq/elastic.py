"""Elastic factorized layers.

A layer stores a factorization once (SVD, channel Tucker-2, or CP) and can
then be evaluated at any rank k in [k_min, k_max] without refitting, with an
optional bit width per factor. Soft rank masks make the rank choice
differentiable during training; the bit map ties quantizer widths to rank.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import linalg
from . import quant

DENSE_SVD = "dense_svd"
CONV_TUCKER2 = "conv_tucker2"
DENSE_CP = "dense_cp"

FACTOR_U = "u"
FACTOR_CORE = "core"
FACTOR_V = "v"

SOFT = "soft"
HARD = "hard"

_KIND_FACTORS = {
    DENSE_SVD: linalg.SvdFactors,
    CONV_TUCKER2: linalg.Tucker2Factors,
    DENSE_CP: linalg.CpFactors,
}
_FACTOR_SLOT = {FACTOR_U: 0, FACTOR_CORE: 1, FACTOR_V: 2}


def stored_rank(kind, factors):
    """Largest rank the stored factors can serve."""
    if kind == DENSE_SVD:
        return int(factors.sigma.shape[0])
    if kind == DENSE_CP:
        return int(factors.weights.shape[0])
    # conv kernels have two channel ranks; k indexes the larger one
    return max(int(factors.core.shape[0]), int(factors.core.shape[1]))


@dataclass(frozen=True)
class ElasticLayer:
    """Immutable factorized layer snapshot.

    kind selects the factor form; k_min/k_max bound the servable ranks.
    Layers sharing a group_id are meant to be truncated with identical k
    (the planner enforces this); bias vectors ride along untouched.
    """

    kind: str
    factors: object
    k_min: int
    k_max: int
    group_id: str | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        want = _KIND_FACTORS.get(self.kind)
        if want is None:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if not isinstance(self.factors, want):
            raise TypeError(f"{self.kind} layer needs {want.__name__}")
        cap = stored_rank(self.kind, self.factors)
        if not 1 <= int(self.k_min) <= int(self.k_max) <= cap:
            raise ValueError(
                f"need 1 <= k_min <= k_max <= {cap}, "
                f"got ({self.k_min}, {self.k_max})")
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float64)
            if b.ndim != 1 or b.shape[0] != self.out_features:
                raise ValueError("bias must be 1-D with one entry per output")
            object.__setattr__(self, "bias", b)

    @property
    def out_features(self):
        if self.kind == CONV_TUCKER2:
            return int(self.factors.u_out.shape[0])
        if self.kind == DENSE_CP:
            return int(self.factors.a1.shape[0])
        return int(self.factors.u.shape[0])

    @property
    def in_features(self):
        if self.kind == CONV_TUCKER2:
            return int(self.factors.u_in.shape[0])
        if self.kind == DENSE_CP:
            return int(self.factors.a2.shape[0])
        return int(self.factors.v.shape[0])


def from_dense(w, k_min=1, k_max=None, group_id=None, bias=None):
    """Factorize a dense weight matrix into an elastic SVD layer."""
    f = linalg.svd_full(w)
    if k_max is None:
        k_max = f.rank_cap
    return ElasticLayer(DENSE_SVD, f, k_min, k_max, group_id, bias)


def from_conv(w4, k_min=1, k_max=None, group_id=None, bias=None, sweeps=3):
    """Factorize a conv kernel (c_out, c_in, h, w) into a Tucker-2 layer."""
    w4 = np.asarray(w4, dtype=np.float64)
    c_out, c_in = int(w4.shape[0]), int(w4.shape[1])
    f = linalg.tucker2_fit(w4, c_out, c_in, sweeps=sweeps)
    if k_max is None:
        k_max = max(c_out, c_in)
    return ElasticLayer(CONV_TUCKER2, f, k_min, k_max, group_id, bias)


def from_dense_cp(w, rank, k_min=1, k_max=None, group_id=None, bias=None,
                  sweeps=5):
    """Factorize a dense weight matrix into an elastic CP layer."""
    f = linalg.cp_fit(w, rank, sweeps=sweeps)
    if k_max is None:
        k_max = int(f.weights.shape[0])
    return ElasticLayer(DENSE_CP, f, k_min, k_max, group_id, bias)


def _check_k(layer, k):
    k = int(k)
    if not layer.k_min <= k <= layer.k_max:
        raise ValueError(
            f"k={k} outside [{layer.k_min}, {layer.k_max}]")
    return k


def conv_rank_schedule(layer, k):
    """Map the shared rank index k to (r_out, r_in) channel ranks.

    Proportional: r_out = ceil(k * c_out / k_max), likewise for r_in, each
    clamped to the stored factor rank. Monotone in k, and k = k_max always
    reaches the full stored ranks.
    """
    if layer.kind != CONV_TUCKER2:
        raise ValueError("rank schedule only applies to conv layers")
    k = _check_k(layer, k)
    f = layer.factors
    c_out, c_in = f.u_out.shape[0], f.u_in.shape[0]
    r_o = min(f.core.shape[0], -(-k * c_out // layer.k_max))
    r_i = min(f.core.shape[1], -(-k * c_in // layer.k_max))
    return int(r_o), int(r_i)


def _split_bits(factor_bits):
    if factor_bits is None:
        return None, None, None
    if isinstance(factor_bits, (tuple, list)):
        if len(factor_bits) != 3:
            raise ValueError("factor_bits triple must be (u, core, v)")
        return tuple(factor_bits)
    b = int(factor_bits)
    return b, b, b


def _round_trip(t, bits):
    # symmetric per-tensor nearest rounding; deterministic
    if bits is None:
        return t
    spec = quant.calibrate_scale(t, quant.QuantSpec(bits=int(bits)))
    return quant.dequantize(quant.quantize(t, spec))


def effective_weight(layer, k, factor_bits=None):
    """Reconstruction at rank k, optionally through quantized factors.

    factor_bits is None (exact), a single width for all factors, or a
    (u, core, v) triple of widths applied to the rank-k factor slices.
    """
    k = _check_k(layer, k)
    bu, bc, bv = _split_bits(factor_bits)
    f = layer.factors
    if layer.kind == DENSE_SVD:
        u = _round_trip(f.u[:, :k], bu)
        s = _round_trip(f.sigma[:k], bc)
        v = _round_trip(f.v[:, :k], bv)
        return (u * s) @ v.T
    if layer.kind == DENSE_CP:
        a1 = _round_trip(f.a1[:, :k], bu)
        w = _round_trip(f.weights[:k], bc)
        a2 = _round_trip(f.a2[:, :k], bv)
        return (a1 * w) @ a2.T
    r_o, r_i = conv_rank_schedule(layer, k)
    u_out = _round_trip(f.u_out[:, :r_o], bu)
    core = _round_trip(f.core[:r_o, :r_i], bc)
    u_in = _round_trip(f.u_in[:, :r_i], bv)
    return np.einsum("rshw,or,is->oihw", core, u_out, u_in)


def truncate(layer, k):
    """Hard rank-k reconstruction; k = k_max reproduces the full weight."""
    return effective_weight(layer, k, None)


def rank_fraction(layer, k):
    """Fraction of the elastic range in use at rank k."""
    return _check_k(layer, k) / layer.k_max


def _spectrum_trustworthy(layer, tol=1e-10):
    """True when the stored factors form a genuine SVD: orthonormal factor
    columns and a non-negative, non-increasing spectrum. Gradient updates
    break this between re-orthogonalizations, at which point sigma entries
    stop being the residual's singular values."""
    f = layer.factors
    s = f.sigma
    if s.size and (float(s.min()) < 0.0 or np.any(s[1:] > s[:-1])):
        return False
    for a in (f.u, f.v):
        gram = a.T @ a
        if not np.allclose(gram, np.eye(a.shape[1]), rtol=0.0, atol=tol):
            return False
    return True


def residual_norm(layer, k, q=None):
    """Spectral norm of (full reconstruction - rank-k reconstruction).

    Without quantization a dense SVD layer whose stored factors still form
    a genuine SVD answers from its spectrum: the norm is exactly the first
    discarded singular value. Every other case — quantized factors, other
    kinds, or factors perturbed away from orthonormality by training —
    materializes the residual and runs power iteration on it; that result
    is nudged up by 1e-8 relative so the reported value stays a usable
    upper bound despite the iteration approaching from below. Conv
    residuals are measured on the (c_out, c_in*h*w) unfolding. q may be a
    single width or a (u, core, v) triple.
    """
    k = _check_k(layer, k)
    if q is None and k == layer.k_max:
        return 0.0
    if q is None and layer.kind == DENSE_SVD \
            and _spectrum_trustworthy(layer):
        return float(layer.factors.sigma[k])
    full = effective_weight(layer, layer.k_max)
    approx = effective_weight(layer, k, q)
    resid = full - approx
    if resid.ndim == 4:
        resid = resid.reshape(resid.shape[0], -1)
    est = linalg.spectral_norm(resid, tol=1e-12, max_iters=2000)
    return float(est * (1.0 + 1e-8))


# ---------------------------------------------------------------------------
# rank masks


@dataclass
class RankMask:
    """Trainable rank selector over the first k_max factor components.

    Mutable on purpose: one training context owns and updates it.
    """

    logits: np.ndarray
    temperature: float
    mode: str = SOFT
    hard_k: int | None = None

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 1 or self.logits.size == 0:
            raise ValueError("logits must be a non-empty vector")
        if not self.temperature > 0.0:
            raise ValueError("temperature must be positive")
        if self.mode not in (SOFT, HARD):
            raise ValueError(f"unknown mask mode {self.mode!r}")
        if self.mode == HARD:
            if self.hard_k is None:
                raise ValueError("hard mode needs hard_k")
            if not 0 <= int(self.hard_k) <= self.logits.size:
                raise ValueError("hard_k out of range")


def hard_mask(k, size):
    """Indicator vector: one for the first k entries, zero after."""
    if not 0 <= int(k) <= int(size):
        raise ValueError("k out of range")
    return (np.arange(int(size)) < int(k)).astype(np.float64)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def soft_mask(mask, gumbel_noise, k_target):
    """Relaxed top-k indicator from noise-perturbed logits.

    Scores g = logits + noise are ranked; each entry gets
    sigmoid((g_i - theta) / temperature) with theta placed mid-gap between
    the k-th and (k+1)-th ranked scores, so both boundary entries saturate
    cleanly as the temperature shrinks. k_target = k_max drops the threshold
    below the smallest score and the mask tends to all-ones.
    """
    tau = float(mask.temperature)
    if not tau > 0.0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(mask.logits, dtype=np.float64)
    noise = np.asarray(gumbel_noise, dtype=np.float64)
    if noise.shape != logits.shape:
        raise ValueError("noise shape must match logits")
    k_max = logits.shape[0]
    k = int(k_target)
    if not 1 <= k <= k_max:
        raise ValueError("k_target out of range")
    g = logits + noise
    ranked = np.sort(g)[::-1]
    if k == k_max:
        theta = ranked[-1] - 1.0
    else:
        theta = 0.5 * (ranked[k - 1] + ranked[k])
    return _sigmoid((g - theta) / tau)


def mask_values(mask, gumbel_noise=None, k_target=None):
    """Mask vector for either mode; soft mode needs noise and a target."""
    if mask.mode == HARD:
        return hard_mask(mask.hard_k, mask.logits.size)
    if gumbel_noise is None or k_target is None:
        raise ValueError("soft mode needs gumbel_noise and k_target")
    return soft_mask(mask, gumbel_noise, k_target)


def sample_gumbel(size, rng):
    """Standard Gumbel draws from a numpy Generator."""
    u = np.clip(rng.random(size), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def masked_weight(layer, values):
    """Weight with each factor component scaled by its mask value.

    Dense kinds only; values has one entry per servable component. An
    all-ones vector reproduces truncate at k_max bit for bit.
    """
    m = np.asarray(values, dtype=np.float64)
    if m.shape != (layer.k_max,):
        raise ValueError("mask length must equal k_max")
    f = layer.factors
    if layer.kind == DENSE_SVD:
        return (f.u[:, :layer.k_max] * (f.sigma[:layer.k_max] * m)) \
            @ f.v[:, :layer.k_max].T
    if layer.kind == DENSE_CP:
        return (f.a1[:, :layer.k_max] * (f.weights[:layer.k_max] * m)) \
            @ f.a2[:, :layer.k_max].T
    raise ValueError("masked weights are not defined for conv layers")


def anneal_temperature(t, total_steps, tau0=2.0, tau_min=0.3, alpha=0.5):
    """Geometric cooling with a floor: max(tau_min, tau0 * alpha**(t/T))."""
    if not tau0 > tau_min > 0.0:
        raise ValueError("need tau0 > tau_min > 0")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if int(total_steps) < 1:
        raise ValueError("total_steps must be >= 1")
    if t < 0:
        raise ValueError("step must be >= 0")
    return float(max(tau_min, tau0 * alpha ** (t / int(total_steps))))


# ---------------------------------------------------------------------------
# rank-tied bit widths


@dataclass(frozen=True)
class BitMap:
    """Monotone rank-to-bits map with small per-factor offsets.

    Base width is min(q_max, floor(a * ln k + b)); each factor adds its
    offset and the sum is clamped to [2, q_max]. a >= 0 keeps the map
    non-decreasing in k.
    """

    a: float
    b: float
    q_max: int
    offsets: tuple = (1, 0, 1)

    def __post_init__(self):
        if not float(self.a) >= 0.0:
            raise ValueError("slope a must be >= 0 to keep bits monotone")
        if int(self.q_max) < 2:
            raise ValueError("q_max must be >= 2")
        off = tuple(int(o) for o in self.offsets)
        if len(off) != 3:
            raise ValueError("offsets must be (u, core, v)")
        object.__setattr__(self, "offsets", off)


def base_bits(bm, k):
    """Shared width before offsets: min(q_max, floor(a * ln k + b))."""
    if int(k) < 1:
        raise ValueError("rank index must be >= 1")
    return int(min(int(bm.q_max),
                   math.floor(float(bm.a) * math.log(int(k)) + float(bm.b))))


def bit_of_rank(bm, k, factor):
    """Width for one factor at rank k, clamped to [2, q_max]."""
    slot = _FACTOR_SLOT.get(factor)
    if slot is None:
        raise ValueError(f"unknown factor {factor!r}")
    q = base_bits(bm, k) + bm.offsets[slot]
    return int(min(int(bm.q_max), max(2, q)))


def factor_bits(bm, k):
    """(u, core, v) widths at rank k, one bit_of_rank call per factor."""
    return tuple(bit_of_rank(bm, k, f) for f in (FACTOR_U, FACTOR_CORE,
                                                 FACTOR_V))
