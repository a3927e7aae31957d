"""Feed-forward execution and reverse-mode gradients at desk scale.

Two forward paths share one block semantics (linear map, optional bias,
optional frozen affine norm, activation, optional skip connection):

* ``forward`` runs plain numpy on a hard per-layer (rank, bits) plan and
  records a trace of activations.
* ``forward_tape`` builds the same computation on a small reverse-mode tape
  so ``backward`` can return gradients for factors, biases, norm parameters,
  soft rank-mask logits, and quantizer log-scales.

The tape covers a fixed operator vocabulary: add, multiply, matmul, permute,
reshape, narrow, gather, conv2d, the activations, reductions, log-softmax,
and a straight-through quantizer.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import elastic, linalg, quant

RELU = "relu"
GELU = "gelu"
IDENTITY = "identity"
FULL = "full"

# global slope bound used for conservative gains; the true supremum of the
# erf-form gelu derivative is ~1.0998
GELU_LIPSCHITZ = 1.1

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ---------------------------------------------------------------------------
# reverse-mode tape


class Var:
    """Tape node: float64 value, accumulated gradient, parent links."""

    __slots__ = ("value", "grad", "parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward


def _acc(node, g):
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += g


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backprop(root, seed=None):
    """Accumulate gradients of root into every reachable node."""
    topo, seen, stack = [], set(), [(root, False)]
    while stack:
        node, ready = stack.pop()
        if ready:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    if seed is None:
        seed = np.ones_like(root.value)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != root.value.shape:
        raise ValueError("seed shape does not match root value")
    root.grad = seed.copy()
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def v_add(a, b):
    out = Var(a.value + b.value, (a, b))
    def bk(g):
        _acc(a, _unbroadcast(g, a.value.shape))
        _acc(b, _unbroadcast(g, b.value.shape))
    out._backward = bk
    return out


def v_mul(a, b):
    out = Var(a.value * b.value, (a, b))
    def bk(g):
        _acc(a, _unbroadcast(g * b.value, a.value.shape))
        _acc(b, _unbroadcast(g * a.value, b.value.shape))
    out._backward = bk
    return out


def v_scale(a, c):
    c = float(c)
    out = Var(a.value * c, (a,))
    out._backward = lambda g: _acc(a, g * c)
    return out


def v_shift(a, c):
    out = Var(a.value + float(c), (a,))
    out._backward = lambda g: _acc(a, g)
    return out


def v_sub(a, b):
    return v_add(a, v_scale(b, -1.0))


def v_matmul(a, b):
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul nodes must be 2-D")
    out = Var(a.value @ b.value, (a, b))
    def bk(g):
        _acc(a, g @ b.value.T)
        _acc(b, a.value.T @ g)
    out._backward = bk
    return out


def v_permute(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Var(a.value.transpose(axes), (a,))
    out._backward = lambda g: _acc(a, g.transpose(inv))
    return out


def v_t(a):
    return v_permute(a, (1, 0))


def v_reshape(a, shape):
    shape = tuple(shape)
    out = Var(a.value.reshape(shape), (a,))
    out._backward = lambda g: _acc(a, g.reshape(a.value.shape))
    return out


def v_narrow(a, k, axis):
    """First k entries along one axis; gradient zero-pads the rest."""
    idx = tuple(slice(None) if i != axis else slice(0, k)
                for i in range(a.value.ndim))
    out = Var(a.value[idx], (a,))
    def bk(g):
        full = np.zeros_like(a.value)
        full[idx] = g
        _acc(a, full)
    out._backward = bk
    return out


def v_gather(a, indices):
    if a.value.ndim != 1:
        raise ValueError("gather expects a vector node")
    idx = np.asarray(indices, dtype=np.intp)
    out = Var(a.value[idx], (a,))
    def bk(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        _acc(a, full)
    out._backward = bk
    return out


def v_relu(a):
    out = Var(np.maximum(a.value, 0.0), (a,))
    out._backward = lambda g: _acc(a, g * (a.value > 0.0))
    return out


def v_gelu(a):
    x = a.value
    out = Var(0.5 * x * (1.0 + erf(x / _SQRT2)), (a,))
    def bk(g):
        phi = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        _acc(a, g * (cdf + x * phi))
    out._backward = bk
    return out


def v_sigmoid(a):
    y = elastic._sigmoid(a.value)
    out = Var(y, (a,))
    out._backward = lambda g: _acc(a, g * y * (1.0 - y))
    return out


def v_exp(a):
    y = np.exp(a.value)
    out = Var(y, (a,))
    out._backward = lambda g: _acc(a, g * y)
    return out


def v_log(a):
    if np.any(a.value <= 0.0):
        raise ValueError("log node needs positive values")
    out = Var(np.log(a.value), (a,))
    out._backward = lambda g: _acc(a, g / a.value)
    return out


def v_sum(a):
    out = Var(np.sum(a.value), (a,))
    out._backward = lambda g: _acc(a, np.broadcast_to(g, a.value.shape))
    return out


def v_mean(a):
    n = a.value.size
    out = Var(np.mean(a.value), (a,))
    out._backward = lambda g: _acc(
        a, np.broadcast_to(g / n, a.value.shape))
    return out


def v_max(a):
    """Max over all entries; subgradient goes to the first argmax."""
    flat_idx = int(np.argmax(a.value))
    out = Var(np.max(a.value), (a,))
    def bk(g):
        full = np.zeros_like(a.value)
        full.flat[flat_idx] = g
        _acc(a, full)
    out._backward = bk
    return out


def v_log_softmax(a, axis=-1):
    x = a.value
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse
    out = Var(y, (a,))
    def bk(g):
        _acc(a, g - np.exp(y) * np.sum(g, axis=axis, keepdims=True))
    out._backward = bk
    return out


def _conv_same_value(x, k):
    # stride-1 zero-padded conv keeping H, W; odd kernel sides
    o, _, kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    h, w = x.shape[2], x.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((x.shape[0], o, h, w))
    for dy in range(kh):
        for dx in range(kw):
            out += np.einsum("oc,bcyx->boyx", k[:, :, dy, dx],
                             xp[:, :, dy:dy + h, dx:dx + w])
    return out


def v_conv2d(x, kernel):
    xv, kv = x.value, kernel.value
    if xv.ndim != 4 or kv.ndim != 4:
        raise ValueError("conv2d expects (B,C,H,W) input and 4-D kernel")
    kh, kw = kv.shape[2], kv.shape[3]
    ph, pw = kh // 2, kw // 2
    h, w = xv.shape[2], xv.shape[3]
    out = Var(_conv_same_value(xv, kv), (x, kernel))
    def bk(g):
        xp = np.pad(xv, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        gx = np.zeros_like(xp)
        gk = np.zeros_like(kv)
        for dy in range(kh):
            for dx in range(kw):
                tap = kv[:, :, dy, dx]
                gx[:, :, dy:dy + h, dx:dx + w] += np.einsum(
                    "oc,boyx->bcyx", tap, g)
                gk[:, :, dy, dx] = np.einsum(
                    "boyx,bcyx->oc", g, xp[:, :, dy:dy + h, dx:dx + w])
        _acc(x, gx[:, :, ph:ph + h, pw:pw + w]
             if (ph or pw) else gx)
        _acc(kernel, gk)
    out._backward = bk
    return out


def v_quant_ste(t, log_scale, bits, rounding=quant.NEAREST, seed=0):
    """Symmetric per-tensor quantize-dequantize with straight-through grads.

    Forward rounds t / exp(log_scale) to the grid and rescales. Backward
    passes upstream through entries whose nearest code is inside the grid
    and routes s * upstream * (code - ratio) into log_scale, matching the
    closed-form straight-through rule of the quantizer module.
    """
    if log_scale.value.shape != (1,):
        raise ValueError("log_scale must have shape (1,)")
    g_lim = quant.grid_limit(bits)
    s = np.exp(log_scale.value)
    ratio = t.value / s
    nearest = np.rint(ratio)
    if rounding == quant.NEAREST:
        codes = nearest
    elif rounding == quant.STOCHASTIC:
        rng = np.random.Generator(np.random.PCG64(seed))
        lo = np.floor(ratio)
        codes = lo + (rng.random(ratio.shape) < (ratio - lo))
    else:
        raise ValueError(f"unknown rounding {rounding!r}")
    codes = np.clip(codes, -g_lim, g_lim)
    out = Var(s * codes, (t, log_scale))
    in_range = np.abs(nearest) <= g_lim
    def bk(g):
        _acc(t, g * in_range)
        _acc(log_scale,
             np.array([np.sum(s * g * (nearest - ratio) * in_range)]))
    out._backward = bk
    return out


# ---------------------------------------------------------------------------
# network structure


_ACT_LIPSCHITZ = {RELU: 1.0, IDENTITY: 1.0, GELU: GELU_LIPSCHITZ}


def _act_value(name, x):
    if name == RELU:
        return np.maximum(x, 0.0)
    if name == GELU:
        return 0.5 * x * (1.0 + erf(x / _SQRT2))
    return x


_ACT_NODE = {RELU: v_relu, GELU: v_gelu, IDENTITY: lambda a: a}


@dataclass(frozen=True)
class Block:
    """One network block: elastic linear map, optional frozen affine norm,
    activation, optional skip connection around the whole block."""

    elastic: elastic.ElasticLayer
    activation: str = IDENTITY
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    residual: bool = False

    def __post_init__(self):
        if self.activation not in _ACT_LIPSCHITZ:
            raise ValueError(f"unknown activation {self.activation!r}")
        n = self.elastic.out_features
        if self.beta is not None and self.gamma is None:
            raise ValueError("beta without gamma")
        if self.gamma is not None:
            gm = np.asarray(self.gamma, dtype=np.float64)
            if gm.shape != (n,):
                raise ValueError("gamma must be 1-D over output units")
            object.__setattr__(self, "gamma", gm)
            bt = (np.zeros(n) if self.beta is None
                  else np.asarray(self.beta, dtype=np.float64))
            if bt.shape != (n,):
                raise ValueError("beta must be 1-D over output units")
            object.__setattr__(self, "beta", bt)
        if self.is_conv:
            kh, kw = self.elastic.factors.core.shape[2:]
            if kh % 2 == 0 or kw % 2 == 0:
                raise ValueError("same-padded conv needs odd kernel sides")
            if self.residual and self.elastic.in_features != n:
                raise ValueError("skip connection needs matching channels")
        elif self.residual and self.elastic.in_features != n:
            raise ValueError("skip connection needs matching width")

    @property
    def is_conv(self):
        return self.elastic.kind == elastic.CONV_TUCKER2


@dataclass(frozen=True)
class Network:
    """Ordered blocks with compatible shapes; all dense or all conv."""

    blocks: tuple

    def __post_init__(self):
        blocks = tuple(self.blocks)
        if not blocks:
            raise ValueError("network needs at least one block")
        object.__setattr__(self, "blocks", blocks)
        conv = blocks[0].is_conv
        for prev, nxt in zip(blocks, blocks[1:]):
            if nxt.is_conv != conv:
                raise ValueError("mixing conv and dense blocks is not "
                                 "supported")
            if nxt.elastic.in_features != prev.elastic.out_features:
                raise ValueError("adjacent block shapes are incompatible")

    def __len__(self):
        return len(self.blocks)


@dataclass
class ForwardTrace:
    """Per-block inputs and outputs plus the final logits.

    Traces built by forward_tape also carry the gradient tape; plain eval
    traces do not and cannot be passed to backward.
    """

    inputs: list
    outputs: list
    logits: np.ndarray
    _z: Var | None = field(default=None, repr=False)
    _leaves: list | None = field(default=None, repr=False)
    _bound: list | None = field(default=None, repr=False)


def _factor_arrays(layer):
    f = layer.factors
    if layer.kind == elastic.DENSE_SVD:
        return (("u", f.u), ("core", f.sigma), ("v", f.v))
    if layer.kind == elastic.DENSE_CP:
        return (("u", f.a1), ("core", f.weights), ("v", f.a2))
    return (("u", f.u_out), ("core", f.core), ("v", f.u_in))


def _plan_entry(block, entry):
    if entry is None:
        return block.elastic.k_max, None
    if isinstance(entry, (int, np.integer)):
        return int(entry), None
    entry = tuple(entry)
    if len(entry) == 1:
        return int(entry[0]), None
    if len(entry) != 2:
        raise ValueError("profile entry must be k or (k, q)")
    return int(entry[0]), entry[1]


def _normalize_profile(net, profile):
    n = len(net.blocks)
    if profile is None or (isinstance(profile, str) and profile == FULL):
        return [(b.elastic.k_max, None) for b in net.blocks]
    pairs = getattr(profile, "pairs", profile)
    if isinstance(pairs, dict):
        entries = [(b.elastic.k_max, None) for b in net.blocks]
        for key, entry in pairs.items():
            i = int(key)
            if not 0 <= i < n:
                raise ValueError(f"profile references unknown layer {key}")
            entries[i] = _plan_entry(net.blocks[i], entry)
        return entries
    pairs = list(pairs)
    if len(pairs) != n:
        raise ValueError("profile length does not match the layer count")
    return [_plan_entry(b, e) for b, e in zip(net.blocks, pairs)]


def _promote_input(net, x):
    x = np.asarray(x, dtype=np.float64)
    first = net.blocks[0]
    want = 3 if first.is_conv else 1
    single = x.ndim == want
    a = x[None, ...] if single else x
    if a.ndim != want + 1:
        raise ValueError("input rank does not match the first block")
    if first.is_conv:
        if a.shape[1] != first.elastic.in_features:
            raise ValueError("input channel count mismatch")
    elif a.shape[1] != first.elastic.in_features:
        raise ValueError("input width mismatch")
    return a, single


def forward(net, x, profile=None):
    """Run the network on x under a per-layer (rank, bits) plan.

    profile may be None or "full" (stored reconstruction at k_max,
    unquantized), a sequence with one entry per layer, a dict from layer
    index to entry, or any object exposing such a sequence as .pairs.
    Entries are k, (k,), or (k, q); q is a width or a (u, core, v) triple.
    x may be a single input or a leading-batch stack of inputs.
    """
    entries = _normalize_profile(net, profile)
    a, single = _promote_input(net, x)
    inputs, outputs = [], []
    for blk, (k, q) in zip(net.blocks, entries):
        w = elastic.effective_weight(blk.elastic, k, q)
        inputs.append(a[0] if single else a)
        if blk.is_conv:
            pre = _conv_same_value(a, w)
            if blk.elastic.bias is not None:
                pre = pre + blk.elastic.bias[:, None, None]
            if blk.gamma is not None:
                pre = (pre * blk.gamma[:, None, None]
                       + blk.beta[:, None, None])
        else:
            pre = a @ w.T
            if blk.elastic.bias is not None:
                pre = pre + blk.elastic.bias
            if blk.gamma is not None:
                pre = pre * blk.gamma + blk.beta
        h = _act_value(blk.activation, pre)
        if blk.residual:
            h = h + a
        outputs.append(h[0] if single else h)
        a = h
    logits = a[0] if single else a
    return ForwardTrace(inputs=inputs, outputs=outputs, logits=logits)


def logit_drift(net, x, profile):
    """l2 distance between profile logits and full logits.

    Returns a float for a single input and a per-sample vector for a
    batched input.
    """
    z_full = forward(net, x, None).logits
    z_prof = forward(net, x, profile).logits
    diff = z_prof - z_full
    a, single = _promote_input(net, x)
    del a
    if single:
        return float(np.linalg.norm(diff.ravel()))
    axes = tuple(range(1, diff.ndim))
    return np.sqrt(np.sum(diff * diff, axis=axes))


def activation_lipschitz(name):
    """Global Lipschitz bound of a named activation."""
    if name not in _ACT_LIPSCHITZ:
        raise ValueError(f"unknown activation {name!r}")
    return _ACT_LIPSCHITZ[name]


def resolve_profile(net, profile):
    """Expand any accepted profile form to one (k, q) pair per layer."""
    return _normalize_profile(net, profile)


def weight_gain(w):
    """Operator-norm bound of a weight array.

    Dense: spectral norm. Conv: sum of per-tap spectral norms, an upper
    bound on the operator norm of the zero-padded convolution.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 4:
        return float(sum(
            linalg.spectral_norm(w[:, :, dy, dx])
            for dy in range(w.shape[2]) for dx in range(w.shape[3])))
    if w.ndim != 2:
        raise ValueError("weight must be 2-d or 4-d")
    return float(linalg.spectral_norm(w))


def _weight_gain(block):
    return weight_gain(elastic.truncate(block.elastic, block.elastic.k_max))


def block_gain(block):
    """Lipschitz bound of one whole block at full rank, unquantized."""
    g = _ACT_LIPSCHITZ[block.activation] * _weight_gain(block)
    if block.gamma is not None:
        g *= float(np.max(np.abs(block.gamma)))
    return 1.0 + g if block.residual else g


def exact_postlayer_lipschitz(net, ell):
    """Upper bound on the gain of the map from block ell's output to the
    logits: product of downstream block gains. ell = len(net) gives 1."""
    n = len(net.blocks)
    if not 0 <= int(ell) <= n:
        raise ValueError("layer index out of range")
    total = 1.0
    for blk in net.blocks[int(ell):]:
        total *= block_gain(blk)
    return float(total)


# ---------------------------------------------------------------------------
# differentiable forward


def _tape_quant(node, bits, rounding, seed):
    spec = quant.calibrate_scale(node.value, quant.QuantSpec(bits=int(bits)))
    log_s = Var(np.log(np.asarray(spec.scales)))
    return v_quant_ste(node, log_s, int(bits), rounding, seed), log_s


def _tape_mask(leaf, mask, noise, k_target):
    tau = float(mask.temperature)
    if not tau > 0.0:
        raise ValueError("temperature must be positive")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != leaf.value.shape:
        raise ValueError("noise shape must match logits")
    k_max = leaf.value.shape[0]
    k = int(k_target)
    if not 1 <= k <= k_max:
        raise ValueError("k_target out of range")
    g = v_add(leaf, Var(noise))
    order = np.argsort(-g.value, kind="stable")
    if k == k_max:
        theta = v_shift(v_gather(g, [order[-1]]), -1.0)
    else:
        theta = v_scale(
            v_add(v_gather(g, [order[k - 1]]), v_gather(g, [order[k]])), 0.5)
    return v_sigmoid(v_scale(v_sub(g, theta), 1.0 / tau))


def forward_tape(net, x, profile=None, masks=None,
                 quant_rounding=quant.NEAREST, quant_seed=0):
    """Differentiable forward pass; returns a trace usable by backward.

    masks is an optional per-layer list; an entry (rank_mask, noise,
    k_target) runs that dense layer through a soft rank mask over all
    servable components instead of hard truncation (its plan rank is
    ignored; its plan widths still apply). Quantized factors round with
    quant_rounding; stochastic rounding draws from quant_seed plus the
    layer index.
    """
    entries = _normalize_profile(net, profile)
    if masks is None:
        masks = [None] * len(net.blocks)
    if len(masks) != len(net.blocks):
        raise ValueError("masks length does not match the layer count")
    a_np, single = _promote_input(net, x)
    a = Var(a_np)
    leaves, bound, inputs, outputs = [], [], [], []
    for i, (blk, (k, q)) in enumerate(zip(net.blocks, entries)):
        lay = blk.elastic
        bu, bc, bv = elastic._split_bits(q)
        ld = {}
        facs = _factor_arrays(lay)
        for nm, arr in facs:
            ld[nm] = Var(arr)
        bound.append(tuple(arr for _, arr in facs))
        seed_i = quant_seed * 1000003 + i

        if masks[i] is not None:
            if blk.is_conv:
                raise ValueError("soft masks are not defined for conv "
                                 "layers")
            rank_mask, noise, k_target = masks[i]
            if rank_mask.logits.shape != (lay.k_max,):
                raise ValueError("mask length must equal the layer k_max")
            ld["mask_logits"] = Var(rank_mask.logits)
            m = _tape_mask(ld["mask_logits"], rank_mask, noise, k_target)
            uk = v_narrow(ld["u"], lay.k_max, 1)
            sk = v_narrow(ld["core"], lay.k_max, 0)
            vk = v_narrow(ld["v"], lay.k_max, 1)
            if bu is not None:
                uk, ld["scale_u"] = _tape_quant(uk, bu, quant_rounding,
                                                seed_i)
            if bc is not None:
                sk, ld["scale_core"] = _tape_quant(sk, bc, quant_rounding,
                                                   seed_i + 1)
            if bv is not None:
                vk, ld["scale_v"] = _tape_quant(vk, bv, quant_rounding,
                                                seed_i + 2)
            w = v_matmul(v_mul(uk, v_mul(sk, m)), v_t(vk))
        elif blk.is_conv:
            r_o, r_i = elastic.conv_rank_schedule(lay, k)
            uo = v_narrow(ld["u"], r_o, 1)
            co = v_narrow(v_narrow(ld["core"], r_o, 0), r_i, 1)
            ui = v_narrow(ld["v"], r_i, 1)
            if bu is not None:
                uo, ld["scale_u"] = _tape_quant(uo, bu, quant_rounding,
                                                seed_i)
            if bc is not None:
                co, ld["scale_core"] = _tape_quant(co, bc, quant_rounding,
                                                   seed_i + 1)
            if bv is not None:
                ui, ld["scale_v"] = _tape_quant(ui, bv, quant_rounding,
                                                seed_i + 2)
            r, s, kh, kw = co.value.shape
            t1 = v_matmul(uo, v_reshape(co, (r, s * kh * kw)))
            t1 = v_reshape(t1, (uo.value.shape[0], s, kh, kw))
            t1 = v_permute(t1, (0, 2, 3, 1))
            o = uo.value.shape[0]
            t2 = v_matmul(v_reshape(t1, (o * kh * kw, s)), v_t(ui))
            t2 = v_reshape(t2, (o, kh, kw, ui.value.shape[0]))
            w = v_permute(t2, (0, 3, 1, 2))
        else:
            uk = v_narrow(ld["u"], k, 1)
            sk = v_narrow(ld["core"], k, 0)
            vk = v_narrow(ld["v"], k, 1)
            if bu is not None:
                uk, ld["scale_u"] = _tape_quant(uk, bu, quant_rounding,
                                                seed_i)
            if bc is not None:
                sk, ld["scale_core"] = _tape_quant(sk, bc, quant_rounding,
                                                   seed_i + 1)
            if bv is not None:
                vk, ld["scale_v"] = _tape_quant(vk, bv, quant_rounding,
                                                seed_i + 2)
            w = v_matmul(v_mul(uk, sk), v_t(vk))

        inputs.append(a.value[0] if single else a.value)
        if blk.is_conv:
            pre = v_conv2d(a, w)
            if lay.bias is not None:
                ld["bias"] = Var(lay.bias)
                pre = v_add(pre, v_reshape(ld["bias"],
                                           (lay.out_features, 1, 1)))
            if blk.gamma is not None:
                ld["gamma"] = Var(blk.gamma)
                ld["beta"] = Var(blk.beta)
                pre = v_add(
                    v_mul(pre, v_reshape(ld["gamma"],
                                         (lay.out_features, 1, 1))),
                    v_reshape(ld["beta"], (lay.out_features, 1, 1)))
        else:
            pre = v_matmul(a, v_t(w))
            if lay.bias is not None:
                ld["bias"] = Var(lay.bias)
                pre = v_add(pre, ld["bias"])
            if blk.gamma is not None:
                ld["gamma"] = Var(blk.gamma)
                ld["beta"] = Var(blk.beta)
                pre = v_add(v_mul(pre, ld["gamma"]), ld["beta"])
        h = _ACT_NODE[blk.activation](pre)
        if blk.residual:
            h = v_add(h, a)
        outputs.append(h.value[0] if single else h.value)
        leaves.append(ld)
        a = h
    z = v_reshape(a, a.value.shape[1:]) if single else a
    return ForwardTrace(inputs=inputs, outputs=outputs, logits=z.value,
                        _z=z, _leaves=leaves, _bound=bound)


def backward(net, trace, upstream):
    """Seed the tape with upstream (dLoss/dlogits) and return, per layer,
    a dict of gradients for every leaf the trace touched: u, core, v,
    bias, gamma, beta, mask_logits, scale_u, scale_core, scale_v."""
    if trace._z is None:
        raise ValueError("trace carries no tape; build it with forward_tape")
    if len(trace._bound) != len(net.blocks):
        raise ValueError("stale trace: layer count changed")
    for refs, blk in zip(trace._bound, net.blocks):
        cur = tuple(arr for _, arr in _factor_arrays(blk.elastic))
        if any(r is not c for r, c in zip(refs, cur)):
            raise ValueError("stale trace: network parameters were rebuilt")
    upstream = np.asarray(upstream, dtype=np.float64)
    backprop(trace._z, upstream)
    out = []
    for ld in trace._leaves:
        out.append({nm: (v.grad if v.grad is not None
                         else np.zeros_like(v.value))
                    for nm, v in ld.items()})
    return out
