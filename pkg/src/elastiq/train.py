"""Desk-scale training loop for elastic stacks on synthetic data.

Each step runs the full-rank view and a rank-sampled compressed view of
the same parameters, assembles a five-term objective (task cross-entropy,
self-distillation, augmentation consistency, a drift cap, and a budget
proxy), and differentiates it through the shared tape. Rank sampling
anneals from uniform toward the deployment profiles, soft rank masks cool
on a geometric temperature schedule, and the regularizer weights ramp up
linearly. Certificate coefficients are refreshed periodically and smoothed
with an EMA; factors are re-orthogonalized on a fixed cadence.

Checkpoints serialize every parameter, optimizer buffer, and the RNG
state, so a resumed run reproduces the original loss trajectory bit for
bit.
"""

from dataclasses import dataclass, field, replace
import csv
import json

import numpy as np

from . import certificate, controller, cost, elastic, linalg, network

SGD = "sgd"
ADAMW = "adamw"

_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Objective weights plus the drift tolerance and warmup fraction."""

    self_distill: float = 0.5
    aug_consistency: float = 0.2
    drift_cap: float = 0.2
    budget: float = 0.3
    isotonic: float = 0.1
    epsilon: float = 0.15
    warmup_frac: float = 0.15

    def __post_init__(self):
        for name in ("self_distill", "aug_consistency", "drift_cap",
                     "budget", "isotonic"):
            if not getattr(self, name) >= 0.0:
                raise ValueError(f"{name} must be non-negative")
        if not self.epsilon > 0.0:
            raise ValueError("epsilon must be positive")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ValueError("warmup_frac must be in [0, 1]")


@dataclass(frozen=True)
class RankSampler:
    """Annealed rank distribution: uniform early, profiles late."""

    k_min: int
    k_max: int
    t_anneal: int
    profiles: tuple

    def __post_init__(self):
        if not 1 <= int(self.k_min) <= int(self.k_max):
            raise ValueError("need 1 <= k_min <= k_max")
        if not int(self.t_anneal) >= 1:
            raise ValueError("t_anneal must be at least 1")
        profs = tuple(sorted({int(p) for p in self.profiles}))
        if not profs:
            raise ValueError("profiles must not be empty")
        for p in profs:
            if not self.k_min <= p <= self.k_max:
                raise ValueError(f"profile rank {p} outside "
                                 f"[{self.k_min}, {self.k_max}]")
        object.__setattr__(self, "k_min", int(self.k_min))
        object.__setattr__(self, "k_max", int(self.k_max))
        object.__setattr__(self, "t_anneal", int(self.t_anneal))
        object.__setattr__(self, "profiles", profs)


def gamma_schedule(sampler, t):
    """Uniform-component weight: max(0, 1 - t / t_anneal)."""
    if t < 0:
        raise ValueError("step must be non-negative")
    return max(0.0, 1.0 - float(t) / float(sampler.t_anneal))


def rank_probabilities(sampler, t):
    """Probability of each rank in [k_min, k_max] at step t."""
    gamma = gamma_schedule(sampler, t)
    n = sampler.k_max - sampler.k_min + 1
    p = np.full(n, gamma / n)
    for prof in sampler.profiles:
        p[prof - sampler.k_min] += (1.0 - gamma) / len(sampler.profiles)
    return p


def sample_rank(sampler, t, rng):
    """One rank draw from the annealed mixture."""
    ks = np.arange(sampler.k_min, sampler.k_max + 1)
    return int(rng.choice(ks, p=rank_probabilities(sampler, t)))


def lambda_warmup(base, t, warmup_steps):
    """Linear ramp from zero to base over warmup_steps, then constant."""
    if warmup_steps < 0:
        raise ValueError("warmup_steps must be non-negative")
    if t < 0:
        raise ValueError("step must be non-negative")
    if warmup_steps == 0:
        return float(base)
    return float(base) * min(1.0, float(t) / float(warmup_steps))


def make_dataset(seed, n_train=2000, n_eval=500, dim=16):
    """Two interleaved Gaussian-mixture classes embedded in dim axes.

    Class centers form an XOR layout in a 2-D plane; the remaining axes
    carry low-power noise and the whole cloud is rotated by a seeded
    orthogonal map, then standardized on the training split.
    """
    if dim < 3:
        raise ValueError("dim must be at least 3")
    rng = np.random.default_rng(seed)
    n = n_train + n_eval
    y = rng.integers(0, 2, size=n)
    arm = rng.integers(0, 2, size=n)
    centers = np.array([[[0.0, 0.0], [2.2, 2.2]],
                        [[0.0, 2.2], [2.2, 0.0]]])
    plane = centers[y, arm] + 0.5 * rng.standard_normal((n, 2))
    rest = 0.4 * rng.standard_normal((n, dim - 2))
    x = np.concatenate([plane, rest], axis=1)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    x = x @ q.T
    mu = x[:n_train].mean(axis=0)
    sd = x[:n_train].std(axis=0)
    x = (x - mu) / np.where(sd > 0, sd, 1.0)
    return (x[:n_train], y[:n_train].astype(np.int64),
            x[n_train:], y[n_train:].astype(np.int64))


def build_network(seed, dim=16, hidden=(32, 32), classes=2):
    """Elastic dense stack with ReLU bodies and a linear output layer."""
    rng = np.random.default_rng(seed)
    dims = (int(dim),) + tuple(int(h) for h in hidden) + (int(classes),)
    blocks = []
    for i in range(len(dims) - 1):
        w = rng.standard_normal((dims[i + 1], dims[i])) \
            * np.sqrt(2.0 / dims[i])
        act = network.RELU if i < len(dims) - 2 else network.IDENTITY
        blocks.append(network.Block(
            elastic=elastic.from_dense(w, bias=np.zeros(dims[i + 1])),
            activation=act))
    return network.Network(tuple(blocks))


def rank_profile(net, k, bits=None):
    """Per-layer (rank, bits) entries for a global rank clamped to each
    layer's servable window."""
    k = int(k)
    if k < 1:
        raise ValueError("rank must be at least 1")
    return [(min(k, b.elastic.k_max), bits) for b in net.blocks]


class _FixedNoise:
    """Hands total_loss a pre-drawn augmentation noise block so the
    per-step draw order stays owned by the loop's generator."""

    def __init__(self, noise):
        self.noise = noise

    def standard_normal(self, shape):
        if tuple(shape) != self.noise.shape:
            raise ValueError("noise shape mismatch")
        return self.noise


@dataclass(frozen=True)
class LossTerms:
    """Weighted objective contributions; they sum to total exactly."""

    total: float
    task: float
    self_distill: float
    aug_consistency: float
    drift_cap: float
    budget: float
    drift_surrogate: float

    def as_dict(self):
        return {"task": self.task, "self_distill": self.self_distill,
                "aug_consistency": self.aug_consistency,
                "drift_cap": self.drift_cap, "budget": self.budget}


def _fresh_coeffs(net, stats, mode=certificate.CONSERVATIVE,
                  calib=None):
    if certificate.network_fingerprint(net) != stats.fingerprint:
        raise ValueError("stale calibration statistics: recalibrate "
                         "before scoring this network")
    return np.array([certificate.lipschitz_proxy(
        net, i, mode=mode, calibration_inputs=calib) * stats.alpha[i]
        for i in range(len(net.blocks))])


def _kl_node(logp_teacher, logp_student, batch_size):
    p = network.v_exp(logp_teacher)
    gap = network.v_sub(logp_teacher, logp_student)
    return network.v_scale(network.v_sum(network.v_mul(p, gap)),
                           1.0 / batch_size)


def _drift_surrogate_node(net, entries, comp_leaves, coeffs):
    """Tape node for the certified-drift stand-in: per layer, the largest
    tail factor magnitude past the served rank, scaled by the EMA
    certificate coefficient. Empty tails contribute nothing."""
    total = None
    for i, (blk, (k, _)) in enumerate(zip(net.blocks, entries)):
        if blk.is_conv:
            raise ValueError("the drift surrogate needs dense layers")
        k_max = blk.elastic.k_max
        if k >= k_max:
            continue
        core = comp_leaves[i]["core"]
        tail = network.v_gather(core, np.arange(k, k_max))
        mag = network.v_add(network.v_relu(tail),
                            network.v_relu(network.v_scale(tail, -1.0)))
        term = network.v_scale(network.v_max(mag), float(coeffs[i]))
        total = term if total is None else network.v_add(total, term)
    return total


def budget_overshoot(net, entries, cost_model, budget):
    """Predicted latency over the budget target, hinged at zero."""
    if budget.latency_target is None:
        raise ValueError("the budget proxy needs a latency target")
    rows = cost.profile_costs(net, list(entries))
    pred = cost.predict(cost_model, rows)
    return max(0.0, pred / budget.latency_target - 1.0)


def total_loss(net, batch, k, weights, stats=None, *, coeffs=None,
               budget=None, cost_model=None, masks=None, rng=None,
               aug_sigma=0.05, bits=None, quant_seed=0):
    """Five-term objective at sampled rank k, with parameter gradients.

    Returns (LossTerms, grads) where grads is a per-layer list of
    name-to-array gradient dicts covering every tape leaf the step
    touched (factors, bias, mask logits, quantizer scales). The
    compressed view shares arrays with the full view, so both tapes'
    contributions are summed. Any non-finite term aborts the step.
    """
    x, y = batch
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError("batch must be (inputs, labels) with one label "
                         "per row")
    entries = rank_profile(net, k, bits)
    b_sz = x.shape[0]

    traces = []
    tr_full = network.forward_tape(net, x, None)
    tr_comp = network.forward_tape(net, x, entries, masks=masks,
                                   quant_seed=quant_seed)
    traces += [tr_full, tr_comp]
    logp_f = network.v_log_softmax(tr_full._z, axis=-1)
    logp_c = network.v_log_softmax(tr_comp._z, axis=-1)

    onehot = np.zeros((b_sz, net.blocks[-1].elastic.out_features))
    onehot[np.arange(b_sz), y] = 1.0
    task = network.v_scale(
        network.v_sum(network.v_mul(network.Var(onehot), logp_f)),
        -1.0 / b_sz)
    total = task

    sd = None
    if weights.self_distill > 0.0:
        sd = network.v_scale(_kl_node(logp_f, logp_c, b_sz),
                             weights.self_distill)
        total = network.v_add(total, sd)

    aug = None
    if weights.aug_consistency > 0.0:
        if rng is None:
            raise ValueError("augmentation consistency needs a random "
                             "generator")
        x_aug = x + aug_sigma * rng.standard_normal(x.shape)
        tr_fa = network.forward_tape(net, x_aug, None)
        tr_ca = network.forward_tape(net, x_aug, entries, masks=masks,
                                     quant_seed=quant_seed)
        traces += [tr_fa, tr_ca]
        aug = network.v_scale(
            _kl_node(network.v_log_softmax(tr_fa._z, axis=-1),
                     network.v_log_softmax(tr_ca._z, axis=-1), b_sz),
            weights.aug_consistency)
        total = network.v_add(total, aug)

    cert = None
    surrogate = 0.0
    if weights.drift_cap > 0.0:
        if coeffs is None:
            if stats is None:
                raise ValueError("the drift cap needs calibration stats "
                                 "or precomputed coefficients")
            coeffs = _fresh_coeffs(net, stats)
        delta = _drift_surrogate_node(net, entries, tr_comp._leaves,
                                      coeffs)
        if delta is not None:
            surrogate = float(delta.value)
            cert = network.v_scale(
                network.v_relu(network.v_shift(delta, -weights.epsilon)),
                weights.drift_cap)
            total = network.v_add(total, cert)

    bud_value = 0.0
    if weights.budget > 0.0 and budget is not None:
        if cost_model is None:
            raise ValueError("the budget proxy needs a cost model")
        bud_value = weights.budget * budget_overshoot(net, entries,
                                                      cost_model, budget)
        total = network.v_shift(total, bud_value)

    terms = LossTerms(
        total=float(total.value),
        task=float(task.value),
        self_distill=0.0 if sd is None else float(sd.value),
        aug_consistency=0.0 if aug is None else float(aug.value),
        drift_cap=0.0 if cert is None else float(cert.value),
        budget=bud_value,
        drift_surrogate=surrogate)
    bad = [name for name, v in (("total", terms.total),
                                *terms.as_dict().items())
           if not np.isfinite(v)]
    if bad:
        raise FloatingPointError(
            f"non-finite loss terms {bad}: {terms!r}")

    network.backprop(total)
    grads = [dict() for _ in net.blocks]
    for tr in traces:
        for i, ld in enumerate(tr._leaves):
            for name, leaf in ld.items():
                if leaf.grad is None:
                    continue
                if name in grads[i]:
                    grads[i][name] = grads[i][name] + leaf.grad
                else:
                    grads[i][name] = leaf.grad.copy()
    return terms, grads


@dataclass(frozen=True)
class TrainConfig:
    """Everything that defines a run except the seed."""

    dim: int = 16
    hidden: tuple = (32, 32)
    classes: int = 2
    n_train: int = 2000
    n_eval: int = 500
    steps: int = 400
    batch_size: int = 64
    lr: float = 0.02
    momentum: float = 0.9
    optimizer: str = SGD
    weight_decay: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    profiles: tuple = (4, 16, 32)
    profile_names: tuple = ("tiny", "med", "max")
    t_anneal: int = 0
    tau0: float = 2.0
    tau_min: float = 0.3
    tau_alpha: float = 0.5
    aug_sigma: float = 0.05
    ema_decay: float = 0.9
    refresh_every: int = 10
    reortho_every: int = 50
    log_every: int = 10
    curriculum_frac: float = 1.0 / 3.0
    clip_norm: float = 2.0
    budget_slack: float = 1.1
    use_soft_masks: bool = True
    train_bits: int | None = None
    calib_size: int = 64
    device: str = "synth0"
    calibrated_proxy: bool = True
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    csv_path: str | None = None

    def __post_init__(self):
        if self.optimizer not in (SGD, ADAMW):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.steps >= 1:
            raise ValueError("steps must be at least 1")
        if not self.batch_size >= 1:
            raise ValueError("batch_size must be at least 1")
        if len(self.profiles) != len(self.profile_names):
            raise ValueError("profiles and profile_names must pair up")
        if not 0.0 <= self.curriculum_frac <= 1.0:
            raise ValueError("curriculum_frac must be in [0, 1]")

    @property
    def anneal_steps(self):
        return self.t_anneal if self.t_anneal > 0 else \
            max(1, self.steps // 3)

    @property
    def warmup_steps(self):
        return int(round(self.weights.warmup_frac * self.steps))


@dataclass
class TrainState:
    """Mutable run state; everything here round-trips a checkpoint."""

    step: int
    net: network.Network
    masks: list
    head: controller.PolicyHead
    cert_coeffs: np.ndarray
    cost_model: cost.CostModel
    budgets: tuple
    rng: np.random.Generator
    opt: dict
    metrics: list
    initial_loss: float | None = None
    diverge_streak: int = 0


@dataclass(frozen=True)
class TrainReport:
    seed: int
    steps: int
    final_loss: float
    final_terms: dict
    accuracy: dict
    violation_rate: dict
    drift_bound: dict
    mean_drift: dict
    csv_path: str | None


_METRIC_FIELDS = ("step", "total", "task", "self_distill",
                  "aug_consistency", "drift_cap", "budget", "isotonic",
                  "delta_hat", "tau", "gamma", "lam_sd", "lam_aug",
                  "lam_cert", "k", "budget_index", "phase")


def _global_k_max(net):
    return max(b.elastic.k_max for b in net.blocks)


def _policy_menus(net, profiles):
    menus = []
    for blk in net.blocks:
        ks = sorted({min(int(p), blk.elastic.k_max) for p in profiles})
        menus.append([(k, None) for k in ks])
    return menus


def _init_cost_and_budgets(config, net, rng_seed):
    k_top = _global_k_max(net)
    grid = sorted({int(k) for k in np.linspace(1, k_top, 8)})
    row_sets = [cost.profile_costs(net, rank_profile(net, k))
                for k in grid]
    need = 2 * len(net.blocks) + 1
    while len(row_sets) < need:
        row_sets.append(row_sets[-1])
    table, _ = cost.synth_device_table(row_sets, device=config.device,
                                       seed=rng_seed)
    model = cost.fit_cost_model(table, row_sets)
    budgets = []
    for k in config.profiles:
        rows = cost.profile_costs(net, rank_profile(net, k))
        target = config.budget_slack * cost.predict(model, rows)
        budgets.append(controller.BudgetToken(
            device=config.device, latency_target=float(target)))
    return model, tuple(budgets)


def _init_state(config, seed):
    net = build_network(seed, config.dim, config.hidden, config.classes)
    masks = [elastic.RankMask(np.zeros(b.elastic.k_max),
                              temperature=config.tau0)
             for b in net.blocks]
    head = controller.init_policy(
        _policy_menus(net, config.profiles), [config.device],
        hidden=16, seed=seed)
    model, budgets = _init_cost_and_budgets(config, net, seed)
    x_tr, _, _, _ = make_dataset(seed, config.n_train, config.n_eval,
                                 config.dim)
    calib = x_tr[:config.calib_size]
    stats = certificate.calibrate(net, calib)
    coeffs = _fresh_coeffs(net, stats, _proxy_mode(config), calib)
    return TrainState(step=0, net=net, masks=masks, head=head,
                      cert_coeffs=coeffs, cost_model=model,
                      budgets=budgets, rng=np.random.default_rng(seed),
                      opt={}, metrics=[])


def _sgd_update(opt, key, arr, grad, lr, momentum, weight_decay):
    g = grad + weight_decay * arr if weight_decay else grad
    buf = opt.get(key)
    if buf is None:
        buf = np.zeros_like(arr)
        opt[key] = buf
    buf *= momentum
    buf += g
    arr -= lr * buf


def _adamw_update(opt, key, arr, grad, lr, weight_decay):
    st = opt.get(key)
    if st is None:
        st = {"m": np.zeros_like(arr), "v": np.zeros_like(arr), "t": 0}
        opt[key] = st
    st["t"] += 1
    st["m"] = _ADAM_B1 * st["m"] + (1 - _ADAM_B1) * grad
    st["v"] = _ADAM_B2 * st["v"] + (1 - _ADAM_B2) * grad * grad
    m_hat = st["m"] / (1 - _ADAM_B1 ** st["t"])
    v_hat = st["v"] / (1 - _ADAM_B2 ** st["t"])
    arr -= lr * (m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
                 + weight_decay * arr)


def _apply_update(config, opt, key, arr, grad):
    if config.optimizer == SGD:
        _sgd_update(opt, key, arr, grad, config.lr, config.momentum,
                    config.weight_decay)
    else:
        _adamw_update(opt, key, arr, grad, config.lr,
                      config.weight_decay)


def _clip_grads(grads, clip_norm):
    """Global-norm gradient clipping across every array in the step."""
    if not clip_norm > 0.0:
        return grads
    sq = 0.0
    for layer in grads:
        for g in layer.values():
            sq += float(np.sum(g * g))
    norm = np.sqrt(sq)
    if norm <= clip_norm:
        return grads
    scale = clip_norm / norm
    return [{name: g * scale for name, g in layer.items()}
            for layer in grads]


def _layer_param(blk, name):
    f = blk.elastic.factors
    if name == "u":
        return f.u
    if name == "core":
        return f.sigma
    if name == "v":
        return f.v
    if name == "bias":
        return blk.elastic.bias
    return None


def _reorthogonalize(net):
    """Reset every dense layer to the exact SVD of its current full
    weight; the represented function is unchanged up to roundoff."""
    blocks = []
    for blk in net.blocks:
        lay = blk.elastic
        w = elastic.effective_weight(lay, lay.k_max)
        blocks.append(replace(blk, elastic=elastic.from_dense(
            w, k_min=lay.k_min, k_max=lay.k_max, group_id=lay.group_id,
            bias=lay.bias)))
    return network.Network(tuple(blocks))


def _proxy_mode(config):
    return certificate.PowerIter() if config.calibrated_proxy \
        else certificate.CONSERVATIVE


def _refresh_coeffs(state, config, calib, decay):
    stats = certificate.calibrate(state.net, calib)
    fresh = _fresh_coeffs(state.net, stats, _proxy_mode(config), calib)
    state.cert_coeffs = decay * state.cert_coeffs + (1 - decay) * fresh


def evaluate(net, x, y, profiles, names, epsilon, calib):
    """Accuracy, drift-violation rate, and certified bound per profile."""
    stats = certificate.calibrate(net, calib)
    accuracy, violation, bound, mean_drift = {}, {}, {}, {}
    for name, k in zip(names, profiles):
        entries = rank_profile(net, k)
        trace = network.forward(net, x, entries)
        pred = np.argmax(trace.logits, axis=-1)
        drifts = np.asarray(network.logit_drift(net, x, entries))
        accuracy[name] = float(np.mean(pred == y))
        violation[name] = float(np.mean(drifts > epsilon))
        mean_drift[name] = float(np.mean(drifts))
        bound[name] = float(certificate.expected_bound(net, stats,
                                                       entries))
    return accuracy, violation, bound, mean_drift


def train_toy(config, seed, state=None, stop_after=None):
    """Run (or resume) the loop; returns (state, report).

    The per-step draw order is fixed: batch indices, rank, per-layer
    Gumbel noise, augmentation noise, budget pick, isotonic budget pair.
    Resuming from a checkpoint therefore replays the exact trajectory,
    provided the resumed run uses the same config (every schedule
    constant derives from config.steps). stop_after pauses the loop
    after that step count so a checkpoint can be taken mid-run.
    """
    x_tr, y_tr, x_ev, y_ev = make_dataset(seed, config.n_train,
                                          config.n_eval, config.dim)
    calib = x_tr[:config.calib_size]
    if state is None:
        state = _init_state(config, seed)
    w = config.weights
    sampler = RankSampler(1, _global_k_max(state.net),
                          config.anneal_steps, config.profiles)
    phase_end = int(config.curriculum_frac * config.steps)
    end = config.steps if stop_after is None \
        else min(config.steps, int(stop_after))
    entry_step = state.step

    while state.step < end:
        t = state.step
        rng = state.rng
        idx = rng.integers(0, config.n_train, size=config.batch_size)
        k_t = sample_rank(sampler, t, rng)
        tau_t = elastic.anneal_temperature(
            t, config.anneal_steps, tau0=config.tau0,
            tau_min=config.tau_min, alpha=config.tau_alpha)
        masks = None
        if config.use_soft_masks:
            masks = []
            for blk, mask in zip(state.net.blocks, state.masks):
                mask.temperature = tau_t
                noise = elastic.sample_gumbel(blk.elastic.k_max, rng)
                masks.append((mask, noise,
                              min(k_t, blk.elastic.k_max)))
        aug_noise = rng.standard_normal(
            (config.batch_size, config.dim))
        if t < phase_end:
            b_idx = len(state.budgets) - 1
            phase = 1
        else:
            b_idx = int(rng.integers(0, len(state.budgets)))
            phase = 2
        pair = None
        if w.isotonic > 0.0 and len(state.budgets) >= 2:
            lo, hi = sorted(rng.choice(len(state.budgets), size=2,
                                       replace=False))
            pair = (int(lo), int(hi))

        lam_sd = lambda_warmup(w.self_distill, t, config.warmup_steps)
        lam_aug = lambda_warmup(w.aug_consistency, t,
                                config.warmup_steps)
        lam_cert = lambda_warmup(w.drift_cap, t, config.warmup_steps)
        eff = replace(w, self_distill=lam_sd, aug_consistency=lam_aug,
                      drift_cap=lam_cert)

        terms, grads = total_loss(
            state.net, (x_tr[idx], y_tr[idx]), k_t, eff,
            coeffs=state.cert_coeffs, budget=state.budgets[b_idx],
            cost_model=state.cost_model, masks=masks,
            rng=_FixedNoise(aug_noise), aug_sigma=config.aug_sigma,
            bits=config.train_bits)

        grads = _clip_grads(grads, config.clip_norm)

        if state.initial_loss is None:
            state.initial_loss = terms.total
        if terms.total > config.divergence_factor * state.initial_loss:
            state.diverge_streak += 1
            if state.diverge_streak >= config.divergence_patience:
                raise RuntimeError(
                    f"diverged: loss {terms.total:.4g} stayed above "
                    f"{config.divergence_factor}x the initial "
                    f"{state.initial_loss:.4g} for "
                    f"{state.diverge_streak} steps; last terms "
                    f"{terms!r}")
        else:
            state.diverge_streak = 0

        for i, blk in enumerate(state.net.blocks):
            for name, grad in grads[i].items():
                if name.startswith("scale_"):
                    continue
                if name == "mask_logits":
                    _apply_update(config, state.opt, f"l{i}:mask",
                                  state.masks[i].logits, grad)
                    continue
                arr = _layer_param(blk, name)
                if arr is not None:
                    _apply_update(config, state.opt, f"l{i}:{name}",
                                  arr, grad)

        iso_val = 0.0
        if pair is not None:
            iso_val, hgrads = controller.isotonic_hinge(
                state.head, state.budgets[pair[0]],
                state.budgets[pair[1]], w.isotonic)
            for name, grad in hgrads.items():
                if name.startswith("device:"):
                    arr = state.head.device_embeddings[
                        name.split(":", 1)[1]]
                else:
                    arr = getattr(state.head, name)
                _apply_update(config, state.opt, f"head:{name}", arr,
                              grad)

        state.step += 1
        if config.reortho_every and \
                state.step % config.reortho_every == 0:
            state.net = _reorthogonalize(state.net)
            for i in range(len(state.net.blocks)):
                for name in ("u", "core", "v"):
                    state.opt.pop(f"l{i}:{name}", None)
            _refresh_coeffs(state, config, calib, 0.0)
        elif config.refresh_every and \
                state.step % config.refresh_every == 0:
            _refresh_coeffs(state, config, calib, config.ema_decay)

        if t % config.log_every == 0 or state.step == config.steps:
            gamma = gamma_schedule(sampler, t)
            state.metrics.append({
                "step": t, "total": terms.total, "task": terms.task,
                "self_distill": terms.self_distill,
                "aug_consistency": terms.aug_consistency,
                "drift_cap": terms.drift_cap, "budget": terms.budget,
                "isotonic": iso_val,
                "delta_hat": terms.drift_surrogate, "tau": tau_t,
                "gamma": gamma, "lam_sd": lam_sd, "lam_aug": lam_aug,
                "lam_cert": lam_cert, "k": k_t, "budget_index": b_idx,
                "phase": phase})

    if state.step == config.steps and state.step > entry_step:
        # restore the exact-SVD parametrization once the run completes, so
        # exported spectra are genuine singular values again; the function
        # is unchanged up to roundoff, and a paused-then-resumed run hits
        # this at the same step with the same parameters
        state.net = _reorthogonalize(state.net)

    accuracy, violation, bound, mean_drift = evaluate(
        state.net, x_ev, y_ev, config.profiles, config.profile_names,
        w.epsilon, calib)
    last = state.metrics[-1] if state.metrics else {}
    report = TrainReport(
        seed=seed, steps=state.step,
        final_loss=float(last.get("total", float("nan"))),
        final_terms={key: float(last[key]) for key in
                     ("task", "self_distill", "aug_consistency",
                      "drift_cap", "budget") if key in last},
        accuracy=accuracy, violation_rate=violation, drift_bound=bound,
        mean_drift=mean_drift, csv_path=config.csv_path)
    if config.csv_path:
        write_metrics_csv(state.metrics, config.csv_path)
    return state, report


def write_metrics_csv(metrics, path):
    """Metrics rows to CSV with a fixed column order."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_METRIC_FIELDS)
        writer.writeheader()
        for row in metrics:
            writer.writerow(row)


def save_checkpoint(state, path):
    """Serialize the full run state to one .npz archive."""
    arrays = {"cert_coeffs": state.cert_coeffs,
              "cm_comp": state.cost_model.comp,
              "cm_mem": state.cost_model.mem}
    layers_meta = []
    for i, blk in enumerate(state.net.blocks):
        lay = blk.elastic
        if lay.kind != elastic.DENSE_SVD:
            raise ValueError("checkpoints cover dense SVD stacks only")
        f = lay.factors
        arrays[f"l{i}_u"] = f.u
        arrays[f"l{i}_core"] = f.sigma
        arrays[f"l{i}_v"] = f.v
        if lay.bias is not None:
            arrays[f"l{i}_bias"] = lay.bias
        arrays[f"l{i}_mask"] = state.masks[i].logits
        layers_meta.append({
            "k_min": lay.k_min, "k_max": lay.k_max,
            "group_id": lay.group_id, "has_bias": lay.bias is not None,
            "activation": blk.activation})
    head = state.head
    arrays["head_w_budget"] = head.w_budget
    arrays["head_w_device"] = head.w_device
    if head.w_summary is not None:
        arrays["head_w_summary"] = head.w_summary
    arrays["head_b_hidden"] = head.b_hidden
    arrays["head_w_out"] = head.w_out
    arrays["head_b_out"] = head.b_out
    devices = sorted(head.device_embeddings)
    for j, dev in enumerate(devices):
        arrays[f"emb{j}"] = head.device_embeddings[dev]
    opt_keys = []
    for key, buf in state.opt.items():
        j = len(opt_keys)
        if isinstance(buf, dict):
            arrays[f"opt{j}_m"] = buf["m"]
            arrays[f"opt{j}_v"] = buf["v"]
            opt_keys.append({"key": key, "kind": ADAMW, "t": buf["t"]})
        else:
            arrays[f"opt{j}"] = buf
            opt_keys.append({"key": key, "kind": SGD})
    meta = {
        "step": state.step,
        "rng": state.rng.bit_generator.state,
        "initial_loss": state.initial_loss,
        "diverge_streak": state.diverge_streak,
        "metrics": state.metrics,
        "layers": layers_meta,
        "head": {"menus": [[list(e) for e in m] for m in head.menus],
                 "references": head.references, "devices": devices},
        "cost_model": {"device": state.cost_model.device,
                       "intercept": state.cost_model.intercept,
                       "r_squared": state.cost_model.r_squared,
                       "mape_percent": state.cost_model.mape_percent},
        "budgets": [{"device": b.device,
                     "latency_target": b.latency_target,
                     "bytes_target": b.bytes_target,
                     "energy_target": b.energy_target}
                    for b in state.budgets],
        "opt_keys": opt_keys,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(),
                                   dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Rebuild a TrainState saved by save_checkpoint, bit for bit."""
    with np.load(path) as zf:
        data = {key: zf[key] for key in zf.files}
    meta = json.loads(bytes(data["meta"]).decode())
    blocks, masks = [], []
    for i, lm in enumerate(meta["layers"]):
        lay = elastic.ElasticLayer(
            elastic.DENSE_SVD,
            linalg.SvdFactors(u=data[f"l{i}_u"],
                              sigma=data[f"l{i}_core"],
                              v=data[f"l{i}_v"]),
            lm["k_min"], lm["k_max"], lm["group_id"],
            data[f"l{i}_bias"] if lm["has_bias"] else None)
        blocks.append(network.Block(elastic=lay,
                                    activation=lm["activation"]))
        masks.append(elastic.RankMask(data[f"l{i}_mask"],
                                      temperature=1.0))
    net = network.Network(tuple(blocks))
    hm = meta["head"]
    menus = tuple(tuple((int(k), None if q is None else int(q))
                        for k, q in m) for m in hm["menus"])
    head = controller.PolicyHead(
        w_budget=data["head_w_budget"], w_device=data["head_w_device"],
        w_summary=data.get("head_w_summary"),
        b_hidden=data["head_b_hidden"], w_out=data["head_w_out"],
        b_out=data["head_b_out"],
        device_embeddings={dev: data[f"emb{j}"]
                           for j, dev in enumerate(hm["devices"])},
        menus=menus, references=hm["references"])
    cm = meta["cost_model"]
    model = cost.CostModel(device=cm["device"],
                           intercept=cm["intercept"],
                           comp=data["cm_comp"], mem=data["cm_mem"],
                           r_squared=cm["r_squared"],
                           mape_percent=cm["mape_percent"])
    budgets = tuple(controller.BudgetToken(**b)
                    for b in meta["budgets"])
    opt = {}
    for j, entry in enumerate(meta["opt_keys"]):
        if entry["kind"] == ADAMW:
            opt[entry["key"]] = {"m": data[f"opt{j}_m"],
                                 "v": data[f"opt{j}_v"],
                                 "t": entry["t"]}
        else:
            opt[entry["key"]] = data[f"opt{j}"]
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(step=meta["step"], net=net, masks=masks,
                      head=head, cert_coeffs=data["cert_coeffs"],
                      cost_model=model, budgets=budgets, rng=rng,
                      opt=opt, metrics=meta["metrics"],
                      initial_loss=meta["initial_loss"],
                      diverge_streak=meta["diverge_streak"])
