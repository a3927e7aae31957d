"""Compute and memory accounting plus a fitted latency/energy proxy.

Closed-form multiply-add counts and byte footprints for the staged
factorized forward paths, break-even thresholds that say when a factorized
layer beats the dense one, and a nonnegative-least-squares latency model
over (FLOPs, bytes) features. No hardware is touched: device tables are
synthesized from a planted linear model with multiplicative log-normal
noise, clearly labeled as such, so the fit/predict loop stays testable on
a desk.

Counting conventions: one multiply-accumulate = 2 FLOPs, accumulators
start at zero, diagonal scaling is 1 FLOP per element. Bytes are rounded
up per tensor. Unquantized factors are counted at 32 bits.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import elastic, network

ACTIVATION_BITS = 8
UNQUANTIZED_BITS = 32


@dataclass(frozen=True)
class LayerCost:
    flops: int
    weight_bytes: int
    activation_bytes: int

    def __post_init__(self):
        if min(self.flops, self.weight_bytes, self.activation_bytes) < 0:
            raise ValueError("costs must be non-negative")


def flops_dense_svd(m, n, k):
    """Staged factorized matvec cost: project (2nk), scale (k), expand
    (2mk)."""
    if k < 1:
        raise ValueError("rank must be at least 1")
    return 2 * n * k + k + 2 * m * k


def flops_conv_tucker2(c_o, c_i, h, w, height, width, r_o, r_i):
    """Staged conv cost: 1x1 reduce, small spatial conv, 1x1 expand."""
    if not (1 <= r_o <= c_o and 1 <= r_i <= c_i):
        raise ValueError("ranks must lie within the channel counts")
    return 2 * height * width * (c_i * r_i + r_o * r_i * h * w + c_o * r_o)


def _tensor_bytes(count, bits):
    return -(-count * bits // 8)


def bytes_of(layer, k, q=None):
    """Serialized weight bytes of a layer at rank k, bit widths q.

    q is None (32-bit floats), a single width, or a (u, core, v) triple.
    Each factor is rounded up to whole bytes on its own, matching the
    bit-packed export payloads.
    """
    bu, bc, bv = elastic._split_bits(q)
    bu = UNQUANTIZED_BITS if bu is None else bu
    bc = UNQUANTIZED_BITS if bc is None else bc
    bv = UNQUANTIZED_BITS if bv is None else bv
    if layer.kind == elastic.CONV_TUCKER2:
        r_o, r_i = elastic.conv_rank_schedule(layer, k)
        c_o, c_i = layer.out_features, layer.in_features
        _, _, kh, kw = layer.factors.core.shape
        counts = (c_o * r_o, r_o * r_i * kh * kw, c_i * r_i)
    else:
        elastic._check_k(layer, k)
        m, n = layer.out_features, layer.in_features
        counts = (m * k, k, n * k)
    return (_tensor_bytes(counts[0], bu) + _tensor_bytes(counts[1], bc)
            + _tensor_bytes(counts[2], bv))


def layer_cost(layer, k, q=None, spatial=None,
               activation_bits=ACTIVATION_BITS):
    """Full accounting for one layer at one operating point.

    Dense layers need no spatial size; conv layers require
    spatial=(H, W) of the feature map. Activation bytes cover one input
    read plus one output write at the inference activation width.
    """
    if layer.kind == elastic.CONV_TUCKER2:
        if spatial is None:
            raise ValueError("conv layers need spatial=(H, W)")
        height, width = spatial
        r_o, r_i = elastic.conv_rank_schedule(layer, k)
        _, _, kh, kw = layer.factors.core.shape
        fl = flops_conv_tucker2(layer.out_features, layer.in_features,
                                kh, kw, height, width, r_o, r_i)
        act_elems = (layer.in_features + layer.out_features) * height * width
    else:
        fl = flops_dense_svd(layer.out_features, layer.in_features, k)
        act_elems = layer.in_features + layer.out_features
    return LayerCost(flops=int(fl),
                     weight_bytes=int(bytes_of(layer, k, q)),
                     activation_bytes=int(_tensor_bytes(act_elems,
                                                        activation_bits)))


def profile_costs(net, profile, spatial=None,
                  activation_bits=ACTIVATION_BITS):
    """Per-layer LayerCost list for one profile of a network."""
    entries = network.resolve_profile(net, profile)
    return [layer_cost(b.elastic, k, q, spatial, activation_bits)
            for b, (k, q) in zip(net.blocks, entries)]


def threshold_rank_dense(m, n):
    """Compute-only break-even rank floor(m*n/(m+n)).

    Strictly below it the staged path is always cheaper than the dense
    matvec; strictly above it is always dearer. At the floor itself the
    comparison depends on whether (m+n) divides m*n. Bandwidth effects
    tighten the usable rank further; this counts multiplies only.
    """
    if m < 1 or n < 1:
        raise ValueError("dimensions must be positive")
    return (m * n) // (m + n)


def threshold_rho_conv(h, w):
    """Channel-rank fraction where the spatial stage of the staged conv
    costs as much as a full 1x1 channel mixer: 1/sqrt(h*w)."""
    if h < 1 or w < 1:
        raise ValueError("kernel sides must be positive")
    return 1.0 / math.sqrt(h * w)


@dataclass(frozen=True)
class DeviceTable:
    """Per-profile latency (and optional energy) measurements.

    Synthesized tables carry the noise model they were drawn from;
    imported ones carry None.
    """

    device: str
    entries: tuple
    noise_model: dict | None = None

    def __post_init__(self):
        for pid, lat, energy in self.entries:
            if not lat > 0.0:
                raise ValueError(f"latency for {pid} must be positive")
            if energy is not None and not energy > 0.0:
                raise ValueError(f"energy for {pid} must be positive")


def synth_device_table(cost_rows, device="synthetic-device", seed=0,
                       noise_sigma=0.03, with_energy=True):
    """Draw a synthetic measurement table from a planted linear model.

    Per-layer compute and memory coefficients are log-uniform, a global
    kernel-launch intercept is added, and every profile's clean value is
    scaled by exp(noise_sigma * z). Returns (table, planted) where planted
    holds the latency model's true coefficients for plant-and-recover
    checks.
    """
    rows = [list(r) for r in cost_rows]
    if not rows:
        raise ValueError("need at least one profile")
    n_layers = len(rows[0])
    if any(len(r) != n_layers for r in rows):
        raise ValueError("ragged cost rows")
    # coefficient ranges sized so desk-scale feature counts contribute on
    # the order of the intercept: the grid's latency variation must carry
    # signal, not just noise
    rng = np.random.default_rng(seed)
    intercept = 10.0 ** rng.uniform(-2.0, -1.0)
    comp = 10.0 ** rng.uniform(-4.0, -3.0, n_layers)
    mem = 10.0 ** rng.uniform(-4.0, -3.0, n_layers)
    e_intercept = 10.0 ** rng.uniform(-1.0, 0.0)
    e_comp = 10.0 ** rng.uniform(-4.0, -3.0, n_layers)
    e_mem = 10.0 ** rng.uniform(-4.0, -3.0, n_layers)
    entries = []
    for i, row in enumerate(rows):
        lat = intercept
        en = e_intercept
        for j, c in enumerate(row):
            b = c.weight_bytes + c.activation_bytes
            lat += comp[j] * c.flops + mem[j] * b
            en += e_comp[j] * c.flops + e_mem[j] * b
        lat *= math.exp(noise_sigma * rng.standard_normal())
        en *= math.exp(noise_sigma * rng.standard_normal())
        entries.append((f"p{i:04d}", float(lat),
                        float(en) if with_energy else None))
    table = DeviceTable(
        device=device, entries=tuple(entries),
        noise_model={"kind": "lognormal", "sigma": float(noise_sigma),
                     "seed": int(seed)})
    planted = {"intercept": float(intercept),
               "comp": tuple(float(v) for v in comp),
               "mem": tuple(float(v) for v in mem)}
    return table, planted


def nnls(a, b, max_iter=None):
    """Nonnegative least squares, active-set style.

    Minimizes ||a x - b||_2 subject to x >= 0. Returns (x, residual_norm).
    Deterministic: ties in the gradient pick the lowest index.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, n = a.shape
    if max_iter is None:
        max_iter = 3 * n + 10
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    tol = 10.0 * np.finfo(float).eps * np.linalg.norm(a, 1) * max(m, n)
    for _ in range(max_iter):
        w = a.T @ (b - a @ x)
        w[passive] = -np.inf
        j = int(np.argmax(w))
        if w[j] <= tol:
            break
        passive[j] = True
        while True:
            z = np.zeros(n)
            z[passive] = np.linalg.lstsq(a[:, passive], b, rcond=None)[0]
            if np.all(z[passive] > tol):
                x = z
                break
            bad = passive & (z <= tol)
            # largest feasible step toward z that keeps x nonnegative
            alpha = np.min(x[bad] / (x[bad] - z[bad]))
            x = x + alpha * (z - x)
            passive &= x > tol
            x[~passive] = 0.0
    return x, float(np.linalg.norm(b - a @ x))


def _design_matrix(cost_rows):
    rows = [list(r) for r in cost_rows]
    n_layers = len(rows[0])
    feats = []
    for row in rows:
        feat = [1.0]
        for c in row:
            feat.append(float(c.flops))
            feat.append(float(c.weight_bytes + c.activation_bytes))
        feats.append(feat)
    return np.asarray(feats), n_layers


@dataclass(frozen=True)
class CostModel:
    device: str
    intercept: float
    comp: tuple
    mem: tuple
    r_squared: float
    mape_percent: float

    def __post_init__(self):
        if self.intercept < 0.0 or min(self.comp + self.mem, default=0) < 0:
            raise ValueError("coefficients must be non-negative")
        if len(self.comp) != len(self.mem):
            raise ValueError("comp and mem lengths differ")


def fit_cost_model(table, cost_rows, target="latency"):
    """Fit the linear latency (or energy) proxy on a profile grid.

    Needs at least as many profiles as coefficients (1 + 2 per layer) and
    every feature column to vary. Goodness of fit is reported on the grid
    itself as R^2 and mean absolute percentage error.
    """
    rows = [list(r) for r in cost_rows]
    if len(rows) != len(table.entries):
        raise ValueError("cost rows do not match the table entries")
    if target == "latency":
        y = np.array([e[1] for e in table.entries])
    elif target == "energy":
        if any(e[2] is None for e in table.entries):
            raise ValueError("table has no energy measurements")
        y = np.array([e[2] for e in table.entries])
    else:
        raise ValueError("target must be latency or energy")
    x_mat, n_layers = _design_matrix(rows)
    if x_mat.shape[0] < x_mat.shape[1]:
        raise ValueError("underdetermined: need at least as many profiles "
                         "as coefficients")
    if np.any(np.all(x_mat[:, 1:] == 0.0, axis=0)):
        raise ValueError("all-zero feature column")
    coef, _ = nnls(x_mat, y)
    pred = x_mat @ coef
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0.0 else 1.0
    mape = float(100.0 * np.mean(np.abs(pred - y) / y))
    return CostModel(device=table.device, intercept=float(coef[0]),
                     comp=tuple(float(c) for c in coef[1::2]),
                     mem=tuple(float(c) for c in coef[2::2]),
                     r_squared=r2, mape_percent=mape)


def predict(model, cost_row):
    """Latency estimate of one profile under a fitted model."""
    row = list(cost_row)
    if len(row) != len(model.comp):
        raise ValueError("profile layer count does not match the model")
    total = model.intercept
    for j, c in enumerate(row):
        total += model.comp[j] * c.flops
        total += model.mem[j] * (c.weight_bytes + c.activation_bytes)
    return float(total)


def write_device_table(table, path):
    """CSV export: header profile_id,latency_ms,energy_mj; energy blank
    when absent. Device id and noise model are not part of the format."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["profile_id", "latency_ms", "energy_mj"])
        for pid, lat, energy in table.entries:
            writer.writerow([pid, repr(float(lat)),
                             "" if energy is None else repr(float(energy))])


def read_device_table(path, device="imported"):
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["profile_id", "latency_ms"]:
            raise ValueError("unrecognized device table header")
        for row in reader:
            if not row:
                continue
            energy = float(row[2]) if len(row) > 2 and row[2] else None
            entries.append((row[0], float(row[1]), energy))
    return DeviceTable(device=device, entries=tuple(entries))
