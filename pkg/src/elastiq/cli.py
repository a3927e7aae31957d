"""Command-line pipeline around the manifest format.

Commands
--------
train       train the synthetic-task model and export a manifest
decompose   factorize a raw-weight manifest into servable elastic factors
certify     attach calibration statistics and a drift-certificate ledger
plan        fit a device cost model and attach a budget-ordered lattice
select      pick the fastest stored profile meeting budget and certificate
report      per-profile quality/cost/drift table (text, optional CSV)
audit       scan the stored lattice for monotonicity violations

The intended order is train (or decompose) -> certify -> plan -> select /
report / audit; certify requires a loadable model, plan requires a
certified manifest, and select/report/audit require a planned lattice.

Exit codes
----------
0   success
1   error: bad arguments, unreadable or inconsistent files, failed checks
2   certificate warning (select: the budget is met only by profiles whose
    drift bound exceeds epsilon)
3   infeasible (select: no stored profile fits the cost budget)
4   monotonicity violations found (audit)

Every command prints machine-readable lines of the form
``@@ <topic> key=value key=value ...`` alongside any human-readable text;
floats are printed with shortest round-trip precision. Reruns with
identical arguments and seeds produce byte-identical stdout and files.

Calibration probes
------------------
Commands that need model inputs (certify, plan with a sampled proxy,
report) draw standard-normal probes from --seed by default — matching
the standardized synthetic task — or load array ``x`` from an .npz file
given via --calib. Dense stacks only; conv models must supply --calib.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import certificate
from . import controller
from . import cost
from . import elastic
from . import manifest
from . import network
from . import train

# exit codes
EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CERT_WARNING = 2
EXIT_INFEASIBLE = 3
EXIT_AUDIT_VIOLATIONS = 4

SENTINEL = "@@"

_DECOMPOSE_RECON_LIMIT = 1e-7
_MENU_FRACS = (0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0)
_MENU_BITS = (4, 8, None)
_GRID_FRACS = tuple((j + 1) / 10 for j in range(10))
_AUTO_BUDGET_FRACS = (0.25, 0.5, 1.0)
_AUTO_BUDGET_SLACK = 1.05


class CliError(Exception):
    """User-facing command failure; message printed, exit code 1."""


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so bad usage exits 1."""

    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


def _fmt_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def say(topic, **fields):
    """Print one machine-readable sentinel line."""
    parts = [SENTINEL, str(topic)]
    parts += [f"{key}={_fmt_value(value)}" for key, value in fields.items()]
    print(" ".join(parts))


def _file_sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write_doc(doc, path):
    files = manifest.write_manifest(doc, path)
    say("manifest", path=path, sha256=_file_sha256(path),
        files=len(files))
    return files


def _read_doc(path):
    try:
        return manifest.read_manifest(path)
    except manifest.ManifestError as exc:
        raise CliError(str(exc)) from exc


def _probe_inputs(net, n, seed, calib_path=None):
    """Model inputs for calibration: an .npz file or seeded N(0,1) rows."""
    if calib_path is not None:
        try:
            with np.load(calib_path) as data:
                xs = np.asarray(data["x"], dtype=np.float64)
        except (OSError, KeyError, ValueError) as exc:
            raise CliError(f"cannot load calibration inputs: {exc}") from exc
        if xs.shape[0] < 1:
            raise CliError("calibration file holds no inputs")
        return xs
    first = net.blocks[0]
    if first.is_conv:
        raise CliError("synthesized probes cover dense stacks only; "
                       "conv models need --calib")
    rng = np.random.default_rng(int(seed))
    return rng.standard_normal((int(n), first.elastic.in_features))


def _ledger_mode(doc):
    cert = doc.get("certificate")
    if cert is None:
        raise CliError("manifest carries no certificate; run certify first")
    if cert.get("mode") == "conservative":
        return certificate.CONSERVATIVE
    return certificate.PowerIter()


def _ledger_epsilon(doc):
    cert = doc.get("certificate") or {}
    eps = cert.get("epsilon")
    return None if eps is None else manifest.parse_float(eps)


def _stored_stats(doc):
    sec = doc.get("calibration")
    if sec is None:
        raise CliError("manifest carries no calibration statistics; "
                       "run certify first")
    return manifest.stats_from_doc(sec)


def _self_verify(path, calibration_inputs=None):
    problems = manifest.verify_manifest(path,
                                        calibration_inputs=calibration_inputs)
    say("verify", problems=len(problems))
    for p in problems:
        print(f"verify: {p}", file=sys.stderr)
    if problems:
        raise CliError("written manifest failed self-verification")


# ---------------------------------------------------------------------------
# train


_TUPLE_FIELDS = ("hidden", "profiles", "profile_names")


def _load_train_config(path):
    if path is None:
        return train.TrainConfig()
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read config: {exc}") from exc
    if not isinstance(data, dict):
        raise CliError("config must be a JSON object")
    known = {f.name for f in dataclasses.fields(train.TrainConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)}")
    if "weights" in data:
        try:
            data["weights"] = train.LossWeights(**data["weights"])
        except TypeError as exc:
            raise CliError(f"bad loss weights: {exc}") from exc
    for name in _TUPLE_FIELDS:
        if name in data:
            data[name] = tuple(data[name])
    try:
        return train.TrainConfig(**data)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad config: {exc}") from exc


def cmd_train(args):
    config = _load_train_config(args.config)
    digest = manifest.config_hash(dataclasses.asdict(config))
    state = None
    if args.resume is not None:
        try:
            state = train.load_checkpoint(args.resume)
        except (OSError, KeyError, ValueError) as exc:
            raise CliError(f"cannot resume: {exc}") from exc
    state, report = train.train_toy(config, args.seed, state=state,
                                    stop_after=args.stop_after)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.npz")
    train.save_checkpoint(state, ckpt)
    metrics_csv = os.path.join(args.out, "metrics.csv")
    train.write_metrics_csv(state.metrics, metrics_csv)

    doc = manifest.network_to_doc(state.net, seed=args.seed,
                                  config_digest=digest, source="train")
    for name, k in zip(config.profile_names, config.profiles):
        pairs = train.rank_profile(state.net, k, config.train_bits)
        manifest.add_profile(doc, state.net, name, pairs)
    x_tr = train.make_dataset(args.seed, config.n_train, config.n_eval,
                              config.dim)[0]
    stats = certificate.calibrate(state.net, x_tr[:config.calib_size])
    doc["calibration"] = manifest.stats_to_doc(stats)
    model_path = os.path.join(args.out, "model.json")
    _write_doc(doc, model_path)

    say("train", seed=args.seed, steps=state.step,
        final_loss=report.final_loss, config_hash=digest,
        checkpoint=ckpt, metrics=metrics_csv)
    for name in config.profile_names:
        say("eval", profile=name, accuracy=report.accuracy[name],
            violation_rate=report.violation_rate[name],
            drift_bound=report.drift_bound[name],
            mean_drift=report.mean_drift[name])
    _self_verify(model_path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# decompose


def cmd_decompose(args):
    doc = _read_doc(args.model)
    try:
        layers = manifest.raw_from_doc(doc)
    except manifest.ManifestError as exc:
        raise CliError(str(exc)) from exc
    blocks = []
    for entry in layers:
        maker = elastic.from_conv if entry["kind"] == "conv" \
            else elastic.from_dense
        try:
            lay = maker(entry["weight"], k_min=args.k_min,
                        bias=entry["bias"])
        except ValueError as exc:
            raise CliError(f"layer {len(blocks)}: {exc}") from exc
        blocks.append(network.Block(elastic=lay,
                                    activation=entry["activation"],
                                    residual=entry["residual"]))
    try:
        net = network.Network(blocks=tuple(blocks))
    except ValueError as exc:
        raise CliError(str(exc)) from exc

    worst = 0.0
    for i, (entry, blk) in enumerate(zip(layers, net.blocks)):
        w = entry["weight"]
        recon = elastic.truncate(blk.elastic, blk.elastic.k_max)
        denom = max(float(np.linalg.norm(w)), 1e-300)
        rel = float(np.linalg.norm(w - recon)) / denom
        worst = max(worst, rel)
        say("layer", index=i, kind=blk.elastic.kind,
            k_max=blk.elastic.k_max, recon_rel=rel)
    if worst > _DECOMPOSE_RECON_LIMIT:
        raise CliError(f"full-rank reconstruction error {worst!r} exceeds "
                       f"{_DECOMPOSE_RECON_LIMIT!r}")

    seed = doc.get("provenance", {}).get("seed")
    out = manifest.network_to_doc(net, seed=seed, source="decompose")
    _write_doc(out, args.out)
    say("decompose", layers=len(net.blocks), recon_rel_max=worst)
    _self_verify(args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# certify


def _parse_profile_flag(spec):
    """Parse --profiles entries "k[:bits]" into (name, k, bits) triples."""
    out = []
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        k, _, bits = item.partition(":")
        try:
            k = int(k)
            bits = int(bits) if bits else None
        except ValueError as exc:
            raise CliError(f"bad profile entry {item!r}") from exc
        name = f"r{k}" if bits is None else f"r{k}b{bits}"
        out.append((name, k, bits))
    if not out:
        raise CliError("--profiles names no profiles")
    return out


def cmd_certify(args):
    doc = _read_doc(args.model)
    try:
        net = manifest.net_from_doc(doc)
    except manifest.ManifestError as exc:
        raise CliError(str(exc)) from exc
    probes = _probe_inputs(net, args.calib_size, args.seed, args.calib)
    stats = certificate.calibrate(net, probes)
    if doc.get("profiles"):
        profiles = {name: manifest.pairs_from_doc(sec["pairs"])
                    for name, sec in sorted(doc["profiles"].items())}
    elif args.profiles:
        profiles = {}
        for name, k, bits in _parse_profile_flag(args.profiles):
            pairs = train.rank_profile(net, k, bits)
            manifest.add_profile(doc, net, name, pairs)
            profiles[name] = manifest.pairs_from_doc(
                doc["profiles"][name]["pairs"])
    else:
        raise CliError("manifest stores no profiles; pass --profiles")
    mode = certificate.CONSERVATIVE if args.mode == "conservative" \
        else certificate.PowerIter()
    doc["calibration"] = manifest.stats_to_doc(stats)
    doc["certificate"] = manifest.certificate_section(
        net, stats, profiles, mode, epsilon=args.epsilon,
        calibration_inputs=probes)
    out = args.out or args.model
    _write_doc(doc, out)
    cert = doc["certificate"]
    say("certify", mode=cert["mode"], certified=cert["certified"],
        profiles=len(profiles), calib_count=stats.count,
        epsilon=args.epsilon)
    for name in sorted(profiles):
        say("ledger", profile=name,
            delta_hat=manifest.parse_float(
                cert["profiles"][name]["delta_hat"]))
    _self_verify(out, calibration_inputs=probes)
    return EXIT_OK


# ---------------------------------------------------------------------------
# plan


def _rank_ladder(k_max, fracs):
    return sorted({max(1, round(f * k_max)) for f in fracs} | {k_max})


def _canonical_menus(net):
    """Per-layer (rank, bits) menus: a rank ladder crossed with bit
    widths, strictly ascending in (rank, effective width)."""
    menus = []
    for blk in net.blocks:
        ks = _rank_ladder(blk.elastic.k_max, _MENU_FRACS)
        menus.append([(k, b) for k in ks for b in _MENU_BITS])
    return menus


def _canonical_grid(net):
    """Deterministic profile grid used to pair device measurements with
    cost rows: global rank fractions crossed with bit widths."""
    grid = []
    for frac in _GRID_FRACS:
        for bits in _MENU_BITS:
            grid.append([(max(1, round(frac * b.elastic.k_max)), bits)
                         for b in net.blocks])
    return grid


def _parse_budget_lists(args):
    def parse(flag, text, conv):
        if text is None:
            return None
        try:
            return [conv(tok) for tok in text.split(",") if tok.strip()]
        except ValueError as exc:
            raise CliError(f"bad {flag} list: {text!r}") from exc

    lat = parse("--latency-ms", args.latency_ms, float)
    byt = parse("--bytes", args.bytes, int)
    eng = parse("--energy-mj", args.energy_mj, float)
    present = [lst for lst in (lat, byt, eng) if lst is not None]
    if not present:
        return None
    n = max(len(lst) for lst in present)
    for lst in present:
        if len(lst) not in (1, n):
            raise CliError("budget lists must share one length "
                           "(or give a single value)")

    def pick(lst, j):
        if lst is None:
            return None
        return lst[0] if len(lst) == 1 else lst[j]

    return [(pick(lat, j), pick(byt, j), pick(eng, j)) for j in range(n)]


def cmd_plan(args):
    doc = _read_doc(args.model)
    try:
        net = manifest.net_from_doc(doc)
    except manifest.ManifestError as exc:
        raise CliError(str(exc)) from exc
    stats = _stored_stats(doc)
    mode = _ledger_mode(doc)
    calib = None
    if not isinstance(mode, str):
        calib = _probe_inputs(net, args.calib_size, args.seed, args.calib)

    menus = _canonical_menus(net)
    benefit = controller.certificate_mass(net, stats, menus, mode, calib)
    grid = _canonical_grid(net)
    grid_rows = [cost.profile_costs(net, pairs) for pairs in grid]
    device = args.device
    if args.device_csv is not None:
        table = cost.read_device_table(args.device_csv,
                                       device=device or "imported")
        if len(table.entries) != len(grid):
            raise CliError(
                f"device table rows ({len(table.entries)}) must match the "
                f"canonical probe grid ({len(grid)} profiles)")
    else:
        table, _ = cost.synth_device_table(grid_rows,
                                           device=device or "synth0",
                                           seed=args.seed)
    cost_model = cost.fit_cost_model(table, grid_rows)
    has_energy = all(e[2] is not None for e in table.entries)
    energy_model = cost.fit_cost_model(table, grid_rows, target="energy") \
        if has_energy else None
    say("costmodel", device=cost_model.device,
        r_squared=cost_model.r_squared,
        mape_percent=cost_model.mape_percent, energy=has_energy)

    triples = _parse_budget_lists(args)
    if triples is None:
        full = [(blk.elastic.k_max, None) for blk in net.blocks]
        base = cost.predict(cost_model,
                            cost.profile_costs(net, full))
        lats = sorted({f * base * _AUTO_BUDGET_SLACK
                       for f in _AUTO_BUDGET_FRACS})
        triples = [(lat, None, None) for lat in lats]
        say("budgets", source="auto", count=len(triples))
    else:
        say("budgets", source="flags", count=len(triples))
    budgets = []
    for lat, byt, eng in triples:
        if eng is not None and energy_model is None:
            raise CliError("energy budgets need a device table with an "
                           "energy column")
        try:
            budgets.append(controller.BudgetToken(
                device=cost_model.device, latency_target=lat,
                bytes_target=byt, energy_target=eng))
        except ValueError as exc:
            raise CliError(str(exc)) from exc

    tightest = controller.greedy_knapsack(net, menus, budgets[0], benefit,
                                          cost_model, energy_model)
    say("plan", budgets=len(budgets),
        smallest_budget_feasible=tightest.feasible)
    try:
        lattice = controller.build_lattice(
            net, menus, budgets, benefit, stats, cost_model,
            energy_model=energy_model, mode=mode,
            calibration_inputs=calib)
    except ValueError as exc:
        raise CliError(str(exc)) from exc

    named = {}
    for prof in lattice.profiles:
        manifest.add_profile(doc, net, prof.name, prof.pairs)
        named[prof.name] = prof.pairs
    doc["lattice"] = manifest.lattice_to_doc(lattice)
    doc["certificate"] = manifest.certificate_section(
        net, stats, named, mode, epsilon=_ledger_epsilon(doc),
        calibration_inputs=calib)
    audit = controller.audit_monotone(lattice)
    say("audit", pairs=audit.pairs, accuracy=audit.accuracy_events,
        latency=audit.latency_events, drift=audit.drift_events,
        violation_percent=audit.violation_percent)
    for j, prof in enumerate(lattice.profiles):
        say("level", profile=prof.name,
            predicted_latency_ms=lattice.predicted_latency[j],
            weight_bytes=lattice.weight_bytes[j],
            drift_bound=lattice.drift_bound[j])
    out = args.out or args.model
    _write_doc(doc, out)
    _self_verify(out, calibration_inputs=calib)
    return EXIT_OK


# ---------------------------------------------------------------------------
# select / report / audit


def _stored_lattice(doc):
    sec = doc.get("lattice")
    if sec is None:
        raise CliError("manifest carries no profile lattice; run plan first")
    try:
        return manifest.lattice_from_doc(sec)
    except (KeyError, ValueError, TypeError) as exc:
        raise CliError(f"stored lattice is invalid: {exc}") from exc


def _select_epsilon(args, doc):
    if args.epsilon is not None:
        return float(args.epsilon)
    eps = _ledger_epsilon(doc)
    if eps is None:
        raise CliError("no epsilon stored in the certificate; "
                       "pass --epsilon")
    return eps


def cmd_select(args):
    doc = _read_doc(args.model)
    lattice = _stored_lattice(doc)
    epsilon = _select_epsilon(args, doc)
    if args.latency_ms is None and args.bytes is None \
            and args.energy_mj is None:
        raise CliError("give at least one of --latency-ms, --bytes, "
                       "--energy-mj")
    device = args.device or lattice.device or "device"
    try:
        budget = controller.BudgetToken(
            device=device,
            latency_target=args.latency_ms,
            bytes_target=args.bytes,
            energy_target=args.energy_mj)
        result = controller.select_runtime(lattice, budget, epsilon)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    say("select", profile=result.profile.name, index=result.index,
        status=result.status, predicted_latency_ms=result.predicted_latency,
        drift_bound=result.drift_bound, epsilon=epsilon)
    if result.status == controller.OK:
        return EXIT_OK
    if result.status == controller.CERT_WARNING:
        return EXIT_CERT_WARNING
    return EXIT_INFEASIBLE


_REPORT_COLUMNS = ("profile", "accuracy_percent", "predicted_latency_ms",
                   "weight_bytes", "drift_bound", "coverage_percent",
                   "violation_percent")


def cmd_report(args):
    doc = _read_doc(args.model)
    try:
        net = manifest.net_from_doc(doc)
    except manifest.ManifestError as exc:
        raise CliError(str(exc)) from exc
    lattice = _stored_lattice(doc)
    stats = _stored_stats(doc)
    mode = _ledger_mode(doc)
    epsilon = _select_epsilon(args, doc)
    xs = _probe_inputs(net, args.probes, args.seed, args.calib)
    calib = xs if not isinstance(mode, str) else None

    full = network.forward(net, xs, None)
    full_top = np.argmax(np.atleast_2d(full.logits), axis=-1)
    rows = []
    for j, prof in enumerate(lattice.profiles):
        trace = network.forward(net, xs, prof)
        top = np.argmax(np.atleast_2d(trace.logits), axis=-1)
        drifts = np.atleast_1d(network.logit_drift(net, xs, prof))
        coverage = float(100.0 * np.mean(drifts <= epsilon))
        rows.append({
            "profile": prof.name,
            "accuracy_percent": float(100.0 * np.mean(top == full_top)),
            "predicted_latency_ms": float(lattice.predicted_latency[j]),
            "weight_bytes": int(lattice.weight_bytes[j]),
            "drift_bound": float(lattice.drift_bound[j]),
            "coverage_percent": coverage,
            "violation_percent": float(100.0 - coverage),
        })

    header = ("profile      accuracy%   latency_ms  weight_bytes"
              "  drift_bound  coverage%  violation%")
    print(header)
    for r in rows:
        print(f"{r['profile']:<12} {r['accuracy_percent']:>9.3f}"
              f" {r['predicted_latency_ms']:>12.6f}"
              f" {r['weight_bytes']:>13d}"
              f" {r['drift_bound']:>12.6f}"
              f" {r['coverage_percent']:>10.3f}"
              f" {r['violation_percent']:>11.3f}")
        say("row", **r)

    if len(lattice.profiles) >= 2:
        diag = certificate.diagnostics(net, stats, list(lattice.profiles),
                                       xs, epsilon, mode, calib)
        say("diagnostics", epsilon=epsilon,
            coverage_percent=diag["coverage_percent"],
            pearson=diag["pearson_correlation"],
            correlation_defined=diag["correlation_defined"],
            mean_drift=diag["mean_drift"],
            delta_hat_p95=diag["delta_hat_p95"])
    audit = controller.audit_monotone(lattice)
    say("audit", pairs=audit.pairs, accuracy=audit.accuracy_events,
        latency=audit.latency_events, drift=audit.drift_events,
        violation_percent=audit.violation_percent)

    if args.out:
        import csv as _csv
        with open(args.out, "w", newline="") as fh:
            writer = _csv.DictWriter(fh, fieldnames=_REPORT_COLUMNS)
            writer.writeheader()
            for r in rows:
                writer.writerow({key: (repr(v) if isinstance(v, float)
                                       else v)
                                 for key, v in r.items()})
        say("csv", path=args.out)
    return EXIT_OK


def cmd_audit(args):
    doc = _read_doc(args.model)
    lattice = _stored_lattice(doc)
    audit = controller.audit_monotone(lattice)
    say("audit", pairs=audit.pairs, accuracy=audit.accuracy_events,
        latency=audit.latency_events, drift=audit.drift_events,
        violation_percent=audit.violation_percent)
    events = (audit.accuracy_events + audit.latency_events
              + audit.drift_events)
    return EXIT_AUDIT_VIOLATIONS if events else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_seed(p):
    p.add_argument("--seed", type=int, default=0,
                   help="seed for every stochastic choice (default 0)")


def _add_calib(p):
    p.add_argument("--calib", default=None, metavar="NPZ",
                   help="optional .npz with array 'x' of model inputs")
    p.add_argument("--calib-size", type=int, default=256,
                   help="synthesized probe count (default 256)")


def build_parser():
    parser = _Parser(prog="elastiq",
                     description="train-once, steer-at-test-time tensor "
                                 "compression toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train the synthetic task and export")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="JSON training config")
    p.add_argument("--stop-after", type=int, default=None,
                   help="pause after this many steps (checkpoint resumes)")
    p.add_argument("--resume", default=None, metavar="CKPT",
                   help="resume from a checkpoint (same config required)")
    _add_seed(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decompose", help="factorize a raw-weight manifest")
    p.add_argument("model", help="raw model manifest (json)")
    p.add_argument("--out", required=True, help="output manifest path")
    p.add_argument("--k-min", type=int, default=1,
                   help="smallest servable rank (default 1)")
    _add_seed(p)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("certify",
                       help="attach calibration stats and a drift ledger")
    p.add_argument("model", help="elastic model manifest")
    p.add_argument("--out", default=None,
                   help="output path (default: rewrite in place)")
    p.add_argument("--mode", choices=("conservative", "poweriter"),
                   default="conservative")
    p.add_argument("--epsilon", type=float, default=None,
                   help="drift tolerance recorded in the ledger")
    p.add_argument("--profiles", default=None, metavar="K[:BITS],...",
                   help="uniform-rank profiles to certify when the "
                        "manifest stores none")
    _add_calib(p)
    _add_seed(p)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("plan",
                       help="fit a cost model and build the profile lattice")
    p.add_argument("model", help="certified model manifest")
    p.add_argument("--out", default=None,
                   help="output path (default: rewrite in place)")
    p.add_argument("--device-csv", default=None,
                   help="measured device table (profile_id,latency_ms,"
                        "energy_mj) over the canonical probe grid")
    p.add_argument("--device", default=None,
                   help="device id (default synth0 / imported)")
    p.add_argument("--latency-ms", default=None,
                   help="comma-separated latency budgets, tightest first")
    p.add_argument("--bytes", default=None,
                   help="comma-separated weight-byte budgets")
    p.add_argument("--energy-mj", default=None,
                   help="comma-separated energy budgets")
    _add_calib(p)
    _add_seed(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("select",
                       help="pick the fastest stored profile for a budget")
    p.add_argument("model", help="planned model manifest")
    p.add_argument("--latency-ms", type=float, default=None)
    p.add_argument("--bytes", type=int, default=None)
    p.add_argument("--energy-mj", type=float, default=None)
    p.add_argument("--device", default=None,
                   help="budget device id (default: the lattice's)")
    p.add_argument("--epsilon", type=float, default=None,
                   help="drift tolerance (default: the ledger's)")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("report",
                       help="per-profile quality/cost/drift table")
    p.add_argument("model", help="planned model manifest")
    p.add_argument("--out", default=None, help="also write this CSV")
    p.add_argument("--epsilon", type=float, default=None,
                   help="drift tolerance (default: the ledger's)")
    p.add_argument("--probes", type=int, default=256,
                   help="evaluation probe count (default 256)")
    p.add_argument("--calib", default=None, metavar="NPZ",
                   help="optional .npz with array 'x' of eval inputs")
    _add_seed(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("audit",
                       help="scan the stored lattice for monotonicity "
                            "violations")
    p.add_argument("model", help="planned model manifest")
    p.set_defaults(func=cmd_audit)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_help()
            return EXIT_ERROR
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (manifest.ManifestError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
