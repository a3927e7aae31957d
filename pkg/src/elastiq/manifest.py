"""Self-describing export format for factorized networks.

A manifest is one JSON document carrying everything needed to load, serve,
and independently re-check a compressed model: the stored factors at full
precision, per-profile factor payloads (bit-packed integer codes plus
their quantizer scales, or float32 tensors where a profile keeps float
factors), the deployable profile lattice with predicted costs, the
drift-certificate ledger, calibration statistics, and provenance.

Binary tensor data is base64-embedded; once the total payload size
crosses ``SIDECAR_THRESHOLD`` bytes it is spilled to a single sidecar
file written next to the manifest (same name plus ``.bin``).

Rules that keep writes reproducible:

* every float is serialized as a 17-significant-digit decimal string,
  which round-trips IEEE binary64 exactly;
* JSON is emitted with sorted keys, two-space indentation, ASCII escapes,
  and a trailing newline; no timestamps or environment data are recorded;
* files are written to a temporary name in the target directory and
  atomically renamed into place;
* writing back what ``read_manifest`` returned produces byte-identical
  files.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import tempfile

import numpy as np

from . import certificate
from . import controller
from . import cost
from . import elastic
from . import linalg
from . import network
from . import quant

FORMAT = "elastiq-manifest"
VERSION = 1

KIND_RAW = "raw"
KIND_ELASTIC = "elastic"

SIDECAR_THRESHOLD = 1 << 20  # embedded payload budget, bytes

_EMBED = "b64"
_SIDECAR = "sidecar"

# payload dtype tags
_F64 = "f64"
_F32 = "f32"
_CODES = "codes"

_PAYLOAD_KEYS = frozenset(("dtype", "shape", "bytes", "sha256", "data"))
_FACTOR_NAMES = ("u", "core", "v")


class ManifestError(Exception):
    """Raised on malformed, corrupt, or inconsistent manifests."""


# ---------------------------------------------------------------------------
# float <-> decimal-string codec


def fmt_float(x):
    """Render a finite float as a decimal string that parses back exactly."""
    x = float(x)
    if not np.isfinite(x):
        raise ManifestError("manifests store finite floats only")
    return format(x, ".17g")


def parse_float(s):
    """Inverse of fmt_float."""
    return float(s)


def _fmt_list(values):
    return [fmt_float(v) for v in values]


def _parse_list(strings):
    return tuple(float(s) for s in strings)


def config_hash(obj):
    """Stable sha256 of a nested plain-python configuration object.

    Floats are rendered through the same 17-digit codec the manifest
    uses; tuples and lists are interchangeable; dict key order is
    irrelevant.
    """

    def plain(node):
        if isinstance(node, dict):
            return {str(k): plain(v) for k, v in node.items()}
        if isinstance(node, (list, tuple)):
            return [plain(v) for v in node]
        if isinstance(node, bool) or node is None:
            return node
        if isinstance(node, (int, np.integer)):
            return int(node)
        if isinstance(node, (float, np.floating)):
            return fmt_float(node)
        if isinstance(node, str):
            return node
        raise ManifestError(f"unhashable config element {type(node).__name__}")

    blob = json.dumps(plain(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("ascii")).hexdigest()


# ---------------------------------------------------------------------------
# bit-packed integer codes


def pack_codes(codes, bits):
    """Pack signed integer codes into bytes, `bits` per value.

    Values are written in C order as `bits`-wide two's-complement fields,
    most significant bit first, and the final byte is zero-padded. The
    result is exactly ceil(n * bits / 8) bytes long, matching the
    per-factor byte accounting of the cost model.
    """
    b = int(bits)
    if not 1 <= b <= 32:
        raise ManifestError("bit width must lie in [1, 32]")
    flat = np.asarray(codes).ravel(order="C")
    if flat.size == 0:
        raise ManifestError("cannot pack an empty code tensor")
    flat = flat.astype(np.int64)
    lo, hi = -(1 << (b - 1)), (1 << (b - 1)) - 1
    if flat.min() < lo or flat.max() > hi:
        raise ManifestError(f"codes overflow {b}-bit two's complement")
    unsigned = np.where(flat < 0, flat + (1 << b), flat).astype(np.uint64)
    shifts = np.arange(b - 1, -1, -1, dtype=np.uint64)
    bitmat = ((unsigned[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    return np.packbits(bitmat.ravel()).tobytes()


def unpack_codes(buf, bits, count):
    """Inverse of pack_codes; returns a flat int64 array of `count` values.

    The buffer length must be exactly ceil(count * bits / 8) and any
    padding bits in the final byte must be zero.
    """
    b = int(bits)
    if not 1 <= b <= 32:
        raise ManifestError("bit width must lie in [1, 32]")
    n = int(count)
    if n < 1:
        raise ManifestError("count must be positive")
    want = cost._tensor_bytes(n, b)
    if len(buf) != want:
        raise ManifestError(f"expected {want} packed bytes, got {len(buf)}")
    bitstream = np.unpackbits(np.frombuffer(buf, dtype=np.uint8))
    used = n * b
    if np.any(bitstream[used:]):
        raise ManifestError("padding bits past the last code must be zero")
    bitmat = bitstream[:used].reshape(n, b).astype(np.int64)
    weights = np.left_shift(np.int64(1), np.arange(b - 1, -1, -1,
                                                   dtype=np.int64))
    vals = bitmat @ weights
    vals = np.where(vals >= np.int64(1) << (b - 1), vals - (np.int64(1) << b),
                    vals)
    return vals.astype(np.int64)


# ---------------------------------------------------------------------------
# tensor payloads


def _new_payload(raw, dtype, shape, extra=None):
    payload = {
        "dtype": dtype,
        "shape": [int(s) for s in shape],
        "bytes": len(raw),
        "sha256": hashlib.sha256(raw).hexdigest(),
        "data": raw,
    }
    if extra:
        payload.update(extra)
    return payload


def encode_array(arr, dtype=_F64):
    """Payload for a float tensor stored raw (little-endian)."""
    if dtype not in (_F64, _F32):
        raise ManifestError(f"unknown float payload dtype {dtype!r}")
    np_dtype = "<f8" if dtype == _F64 else "<f4"
    a = np.ascontiguousarray(np.asarray(arr, dtype=np.float64)
                             .astype(np_dtype))
    return _new_payload(a.tobytes(), dtype, a.shape)


def encode_quantized(t, bits):
    """Payload for a tensor pushed through the serving quantizer.

    Calibration matches the serving reconstruction path: symmetric
    max-range per-tensor scales with nearest rounding, so dequantizing
    the stored codes reproduces the served factor values bit for bit.
    """
    t = np.asarray(t, dtype=np.float64)
    spec = quant.calibrate_scale(t, quant.QuantSpec(bits=int(bits)))
    qf = quant.quantize(t, spec)
    raw = pack_codes(qf.codes, spec.bits)
    extra = {
        "bits": int(spec.bits),
        "scales": _fmt_list(spec.scales),
        "granularity": spec.granularity,
        "channel_axis": int(spec.channel_axis),
    }
    return _new_payload(raw, _CODES, t.shape, extra)


def _is_payload(node):
    return isinstance(node, dict) and _PAYLOAD_KEYS <= set(node)


def _walk_payloads(node):
    """Yield payload dicts in a deterministic sorted-key depth-first order."""
    if _is_payload(node):
        yield node
        return
    if isinstance(node, dict):
        for key in sorted(node):
            yield from _walk_payloads(node[key])
    elif isinstance(node, (list, tuple)):
        for item in node:
            yield from _walk_payloads(item)


def decode_payload(payload):
    """Decode any payload back to a float64 array.

    Integer-code payloads are dequantized with their stored scales, which
    reproduces the serving-path factor values exactly.
    """
    raw = payload["data"]
    if not isinstance(raw, (bytes, bytearray)):
        raise ManifestError("payload data is not materialized bytes")
    if len(raw) != int(payload["bytes"]):
        raise ManifestError("payload byte count mismatch")
    if hashlib.sha256(raw).hexdigest() != payload["sha256"]:
        raise ManifestError("payload checksum mismatch")
    shape = tuple(int(s) for s in payload["shape"])
    dtype = payload["dtype"]
    if dtype in (_F64, _F32):
        np_dtype = "<f8" if dtype == _F64 else "<f4"
        flat = np.frombuffer(raw, dtype=np_dtype)
        if flat.size != int(np.prod(shape)):
            raise ManifestError("payload shape does not match its data")
        return flat.reshape(shape).astype(np.float64)
    if dtype == _CODES:
        qf = decode_codes(payload)
        return quant.dequantize(qf)
    raise ManifestError(f"unknown payload dtype {dtype!r}")


def decode_codes(payload):
    """Rebuild the QuantizedFactor held by an integer-code payload."""
    if payload["dtype"] != _CODES:
        raise ManifestError("payload holds no integer codes")
    shape = tuple(int(s) for s in payload["shape"])
    count = int(np.prod(shape))
    codes = unpack_codes(payload["data"], payload["bits"], count)
    spec = quant.QuantSpec(
        bits=int(payload["bits"]),
        granularity=payload["granularity"],
        channel_axis=int(payload["channel_axis"]),
        scales=_parse_list(payload["scales"]),
    )
    return quant.QuantizedFactor(codes.reshape(shape), spec)


# ---------------------------------------------------------------------------
# network <-> document


def _topology_layer(blk):
    lay = blk.elastic
    return {
        "kind": lay.kind,
        "in_features": int(lay.in_features),
        "out_features": int(lay.out_features),
        "k_min": int(lay.k_min),
        "k_max": int(lay.k_max),
        "group_id": lay.group_id,
        "activation": blk.activation,
        "residual": bool(blk.residual),
    }


def _model_layer(blk):
    lay = blk.elastic
    entry = {name: encode_array(arr)
             for name, arr in network._factor_arrays(lay)}
    if lay.bias is not None:
        entry["bias"] = encode_array(lay.bias)
    if blk.gamma is not None:
        entry["gamma"] = encode_array(blk.gamma)
        entry["beta"] = encode_array(blk.beta)
    return entry


def network_to_doc(net, seed=None, config_digest=None, source=None):
    """Base manifest document for a factorized network.

    Carries topology, full-precision factors, and the parameter
    fingerprint; profile payloads, lattice, certificate, and calibration
    sections are attached by the dedicated helpers.
    """
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "kind": KIND_ELASTIC,
        "topology": {"layers": [_topology_layer(b) for b in net.blocks]},
        "model": {"layers": [_model_layer(b) for b in net.blocks]},
        "fingerprint": certificate.network_fingerprint(net),
        "profiles": {},
        "provenance": {
            "seed": None if seed is None else int(seed),
            "config_hash": config_digest,
            "source": source,
        },
    }
    return doc


def _factors_from_entry(kind, entry):
    u = decode_payload(entry["u"])
    core = decode_payload(entry["core"])
    v = decode_payload(entry["v"])
    if kind == elastic.DENSE_SVD:
        return linalg.SvdFactors(u=u, sigma=core, v=v)
    if kind == elastic.DENSE_CP:
        return linalg.CpFactors(weights=core, a1=u, a2=v)
    if kind == elastic.CONV_TUCKER2:
        return linalg.Tucker2Factors(u_out=u, core=core, u_in=v)
    raise ManifestError(f"unknown layer kind {kind!r}")


def net_from_doc(doc, check_fingerprint=True):
    """Rebuild the full-precision network from an elastic manifest.

    With check_fingerprint the decoded parameters must hash back to the
    manifest's stored fingerprint; a mismatch refuses to load.
    """
    if doc.get("kind") != KIND_ELASTIC:
        raise ManifestError("manifest does not hold a factorized model")
    topo = doc["topology"]["layers"]
    model = doc["model"]["layers"]
    if len(topo) != len(model):
        raise ManifestError("topology and model layer counts differ")
    blocks = []
    for spec, entry in zip(topo, model):
        factors = _factors_from_entry(spec["kind"], entry)
        bias = decode_payload(entry["bias"]) if "bias" in entry else None
        lay = elastic.ElasticLayer(
            kind=spec["kind"], factors=factors,
            k_min=int(spec["k_min"]), k_max=int(spec["k_max"]),
            group_id=spec["group_id"], bias=bias)
        gamma = decode_payload(entry["gamma"]) if "gamma" in entry else None
        beta = decode_payload(entry["beta"]) if "beta" in entry else None
        blocks.append(network.Block(
            elastic=lay, activation=spec["activation"],
            gamma=gamma, beta=beta, residual=bool(spec["residual"])))
    net = network.Network(blocks=tuple(blocks))
    if check_fingerprint:
        got = certificate.network_fingerprint(net)
        if got != doc.get("fingerprint"):
            raise ManifestError(
                "decoded parameters do not match the stored fingerprint")
    return net


def raw_model_to_doc(weights, biases=None, activations=None, residuals=None,
                     seed=None, source=None):
    """Manifest document for an undecomposed model (decompose input).

    weights holds one 2-D (dense) or 4-D (conv) array per layer; biases,
    activations, and residual flags are optional per-layer sequences.
    """
    n = len(weights)
    if n == 0:
        raise ManifestError("raw model needs at least one layer")
    biases = [None] * n if biases is None else list(biases)
    activations = [network.IDENTITY] * n if activations is None \
        else list(activations)
    residuals = [False] * n if residuals is None else list(residuals)
    if not len(biases) == len(activations) == len(residuals) == n:
        raise ManifestError("per-layer sequences disagree on layer count")
    layers, payloads = [], []
    for w, b, act, res in zip(weights, biases, activations, residuals):
        w = np.asarray(w, dtype=np.float64)
        if w.ndim not in (2, 4):
            raise ManifestError("raw weights must be 2-D or 4-D")
        layers.append({
            "kind": "conv" if w.ndim == 4 else "dense",
            "activation": str(act),
            "residual": bool(res),
        })
        entry = {"weight": encode_array(w)}
        if b is not None:
            entry["bias"] = encode_array(np.asarray(b, dtype=np.float64))
        payloads.append(entry)
    return {
        "format": FORMAT,
        "version": VERSION,
        "kind": KIND_RAW,
        "topology": {"layers": layers},
        "model": {"layers": payloads},
        "provenance": {
            "seed": None if seed is None else int(seed),
            "config_hash": None,
            "source": source,
        },
    }


def raw_from_doc(doc):
    """Decode a raw manifest into per-layer weight/bias/metadata dicts."""
    if doc.get("kind") != KIND_RAW:
        raise ManifestError("manifest does not hold a raw model")
    out = []
    for spec, entry in zip(doc["topology"]["layers"],
                           doc["model"]["layers"]):
        out.append({
            "kind": spec["kind"],
            "weight": decode_payload(entry["weight"]),
            "bias": decode_payload(entry["bias"]) if "bias" in entry
            else None,
            "activation": spec["activation"],
            "residual": bool(spec["residual"]),
        })
    return out


# ---------------------------------------------------------------------------
# profile payloads


def pairs_to_doc(pairs):
    """Serialize per-layer (rank, bits) pairs; bits may be None, a width,
    or a (u, core, v) triple."""
    out = []
    for k, q in pairs:
        if q is None:
            enc = None
        elif isinstance(q, (tuple, list)):
            enc = [None if b is None else int(b) for b in q]
        else:
            enc = int(q)
        out.append([int(k), enc])
    return out


def pairs_from_doc(entries):
    pairs = []
    for k, q in entries:
        if isinstance(q, list):
            q = tuple(None if b is None else int(b) for b in q)
        elif q is not None:
            q = int(q)
        pairs.append((int(k), q))
    return tuple(pairs)


def _profile_slices(layer, k, q):
    """Factor slices served at (k, q): (name, values, bits) triples."""
    bu, bc, bv = elastic._split_bits(q)
    f = layer.factors
    if layer.kind == elastic.DENSE_SVD:
        k = elastic._check_k(layer, k)
        parts = (f.u[:, :k], f.sigma[:k], f.v[:, :k])
    elif layer.kind == elastic.DENSE_CP:
        k = elastic._check_k(layer, k)
        parts = (f.a1[:, :k], f.weights[:k], f.a2[:, :k])
    else:
        r_o, r_i = elastic.conv_rank_schedule(layer, k)
        parts = (f.u_out[:, :r_o], f.core[:r_o, :r_i], f.u_in[:, :r_i])
    return tuple(zip(_FACTOR_NAMES, parts, (bu, bc, bv)))


def add_profile(doc, net, name, pairs):
    """Attach deployable factor payloads for one named profile.

    Quantized factors ship as bit-packed codes plus scales; factors a
    profile keeps in float ship as float32 tensors. Byte sizes therefore
    agree exactly with the cost model's per-factor accounting.
    """
    entries = network.resolve_profile(net, list(pairs))
    layers = []
    for blk, (k, q) in zip(net.blocks, entries):
        entry = {}
        for fname, values, bits in _profile_slices(blk.elastic, k, q):
            if bits is None:
                entry[fname] = encode_array(values, _F32)
            else:
                entry[fname] = encode_quantized(values, bits)
        layers.append(entry)
    doc["profiles"][str(name)] = {
        "pairs": pairs_to_doc(entries),
        "layers": layers,
    }
    return doc


def profile_factors(doc, name):
    """Decode one profile's served factors: (u, core, v) float64 per layer."""
    sec = doc["profiles"][name]
    out = []
    for entry in sec["layers"]:
        out.append(tuple(decode_payload(entry[f]) for f in _FACTOR_NAMES))
    return out


def profile_weights(doc, name):
    """Compose each layer's served weight tensor from its stored payloads."""
    kinds = [lay["kind"] for lay in doc["topology"]["layers"]]
    weights = []
    for kind, (u, core, v) in zip(kinds, profile_factors(doc, name)):
        if kind == elastic.CONV_TUCKER2:
            weights.append(np.einsum("rshw,or,is->oihw", core, u, v))
        else:
            weights.append((u * core) @ v.T)
    return weights


# ---------------------------------------------------------------------------
# lattice / calibration / certificate sections


def lattice_to_doc(lattice):
    sec = {
        "device": lattice.device,
        "profiles": [{"name": p.name, "pairs": pairs_to_doc(p.pairs)}
                     for p in lattice.profiles],
        "predicted_latency": _fmt_list(lattice.predicted_latency),
        "weight_bytes": [int(b) for b in lattice.weight_bytes],
        "drift_bound": _fmt_list(lattice.drift_bound),
        "measured_latency": None if lattice.measured_latency is None
        else _fmt_list(lattice.measured_latency),
        "energy": None if lattice.energy is None
        else _fmt_list(lattice.energy),
    }
    return sec


def lattice_from_doc(sec):
    profiles = tuple(
        controller.Profile(pairs=pairs_from_doc(p["pairs"]), name=p["name"])
        for p in sec["profiles"])
    return controller.ProfileLattice(
        profiles=profiles,
        predicted_latency=_parse_list(sec["predicted_latency"]),
        weight_bytes=tuple(int(b) for b in sec["weight_bytes"]),
        drift_bound=_parse_list(sec["drift_bound"]),
        measured_latency=None if sec.get("measured_latency") is None
        else _parse_list(sec["measured_latency"]),
        energy=None if sec.get("energy") is None
        else _parse_list(sec["energy"]),
        device=sec.get("device"))


def stats_to_doc(stats):
    return {
        "alpha": _fmt_list(stats.alpha),
        "max_norm": _fmt_list(stats.max_norm),
        "count": int(stats.count),
        "fingerprint": stats.fingerprint,
    }


def stats_from_doc(sec):
    return certificate.CalibrationStats(
        alpha=_parse_list(sec["alpha"]),
        max_norm=_parse_list(sec["max_norm"]),
        count=int(sec["count"]),
        fingerprint=sec["fingerprint"])


def _mode_name(mode):
    return "conservative" if mode == certificate.CONSERVATIVE else "poweriter"


def certificate_section(net, stats, profiles, mode=certificate.CONSERVATIVE,
                        epsilon=None, calibration_inputs=None):
    """Drift-certificate ledger over named profiles.

    Stores, per profile, the per-layer sensitivity multipliers, the
    per-layer weight-change norms, and their alpha-weighted sum; the
    aggregate equals the expected-drift bound by construction. Only the
    conservative mode is marked certified — the sampled power-iteration
    proxy can undershoot and is recorded for reference only.
    """
    conservative = mode == certificate.CONSERVATIVE
    sec = {
        "mode": _mode_name(mode),
        "certified": bool(conservative),
        "epsilon": None if epsilon is None else fmt_float(epsilon),
        "alpha": _fmt_list(stats.alpha),
        "profiles": {},
    }
    for name, pairs in profiles.items():
        entries = network.resolve_profile(net, list(pairs))
        if conservative:
            sens = [certificate.lipschitz_proxy(net, i, mode,
                                                profile=list(entries))
                    for i in range(len(net.blocks))]
        else:
            sens = [certificate.lipschitz_proxy(net, i, mode,
                                                calibration_inputs)
                    for i in range(len(net.blocks))]
        change = [certificate.compression_gain(net, i, k, q)
                  for i, (k, q) in enumerate(entries)]
        delta = 0.0
        for m, d, a in zip(sens, change, stats.alpha):
            delta += m * d * float(a)
        sec["profiles"][str(name)] = {
            "pairs": pairs_to_doc(entries),
            "sensitivity": _fmt_list(sens),
            "weight_change": _fmt_list(change),
            "delta_hat": fmt_float(delta),
        }
    return sec


# ---------------------------------------------------------------------------
# canonical serialization


def _serializable(node, path="$"):
    """Deep-copy a document into strictly JSON-plain values.

    Raw floats are rejected everywhere — numbers that matter must already
    be 17-digit decimal strings — so a manifest can never pick up
    platform- or version-dependent float formatting.
    """
    if _is_payload(node):
        out = {}
        for key in node:
            out[key] = node[key] if key == "data" \
                else _serializable(node[key], f"{path}.{key}")
        return out
    if isinstance(node, dict):
        out = {}
        for key, value in node.items():
            if not isinstance(key, str):
                raise ManifestError(f"non-string key at {path}")
            out[key] = _serializable(value, f"{path}.{key}")
        return out
    if isinstance(node, (list, tuple)):
        return [_serializable(v, f"{path}[{i}]") for i, v in enumerate(node)]
    if isinstance(node, bool) or node is None:
        return node
    if isinstance(node, (int, np.integer)):
        return int(node)
    if isinstance(node, str):
        return node
    if isinstance(node, (float, np.floating)):
        raise ManifestError(
            f"raw float at {path}; serialize it with fmt_float")
    raise ManifestError(f"unserializable {type(node).__name__} at {path}")


def canonical_json(doc):
    """Render an already-encoded document (no raw payload bytes) to the
    canonical byte form: sorted keys, two-space indent, trailing newline."""
    return json.dumps(doc, sort_keys=True, indent=2,
                      ensure_ascii=True) + "\n"


def _atomic_write(path, data):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".manifest-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def sidecar_path(path):
    """The payload sidecar belonging to a manifest path."""
    return str(path) + ".bin"


def write_manifest(doc, path):
    """Write a manifest atomically; returns the list of files written.

    Payload bytes are base64-embedded while their total stays at or under
    SIDECAR_THRESHOLD; above it every payload moves to one sidecar file
    (the manifest path plus ".bin") and the JSON stores (offset, length)
    references. The encoding choice is a pure function of the payload
    bytes and the document never mentions its own filename, so rewriting
    a read manifest reproduces the original bytes exactly.
    """
    doc = _serializable(doc)
    payloads = list(_walk_payloads(doc))
    for p in payloads:
        raw = p["data"]
        if not isinstance(raw, (bytes, bytearray)):
            raise ManifestError("payload data must be bytes when writing")
        if len(raw) != int(p["bytes"]):
            raise ManifestError("payload byte count mismatch")
    total = sum(int(p["bytes"]) for p in payloads)
    path = str(path)
    side = sidecar_path(path)
    written = []
    if total > SIDECAR_THRESHOLD:
        blob = bytearray()
        for p in payloads:
            raw = bytes(p["data"])
            p["encoding"] = _SIDECAR
            p["data"] = {"offset": len(blob), "length": len(raw)}
            blob.extend(raw)
        _atomic_write(side, bytes(blob))
        written.append(side)
    else:
        for p in payloads:
            raw = bytes(p["data"])
            p["encoding"] = _EMBED
            p["data"] = base64.b64encode(raw).decode("ascii")
        if os.path.exists(side):
            os.unlink(side)
    _atomic_write(path, canonical_json(doc).encode("ascii"))
    written.append(path)
    return written


def read_manifest(path):
    """Load a manifest, rehydrating and checksum-verifying every payload."""
    path = str(path)
    try:
        with open(path, "rb") as fh:
            doc = json.loads(fh.read().decode("ascii"))
    except (OSError, ValueError) as exc:
        raise ManifestError(f"cannot read manifest: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise ManifestError("not a model manifest")
    if doc.get("version") != VERSION:
        raise ManifestError(f"unsupported manifest version "
                            f"{doc.get('version')!r}")
    blob = None
    for p in _walk_payloads(doc):
        encoding = p.get("encoding")
        if encoding == _EMBED:
            raw = base64.b64decode(p["data"], validate=True)
        elif encoding == _SIDECAR:
            if blob is None:
                try:
                    with open(sidecar_path(path), "rb") as fh:
                        blob = fh.read()
                except OSError as exc:
                    raise ManifestError(
                        f"cannot read payload sidecar: {exc}") from exc
            ref = p["data"]
            start, length = int(ref["offset"]), int(ref["length"])
            if start < 0 or start + length > len(blob):
                raise ManifestError("sidecar reference out of range")
            raw = blob[start:start + length]
        else:
            raise ManifestError(f"unknown payload encoding {encoding!r}")
        if len(raw) != int(p["bytes"]):
            raise ManifestError("payload byte count mismatch")
        if hashlib.sha256(raw).hexdigest() != p["sha256"]:
            raise ManifestError("payload checksum mismatch")
        p["data"] = raw
    return doc


# ---------------------------------------------------------------------------
# self-verification


def _close(a, b, tol):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def _verify_profile_payloads(doc, net, problems, tol):
    for name, sec in sorted(doc.get("profiles", {}).items()):
        pairs = pairs_from_doc(sec["pairs"])
        if len(pairs) != len(net.blocks):
            problems.append(f"profile {name}: wrong layer count")
            continue
        for i, ((k, q), entry) in enumerate(zip(pairs, sec["layers"])):
            lay = net.blocks[i].elastic
            total = 0
            for fname, values, bits in _profile_slices(lay, k, q):
                payload = entry[fname]
                got_shape = tuple(int(s) for s in payload["shape"])
                if got_shape != values.shape:
                    problems.append(
                        f"profile {name} layer {i} {fname}: shape "
                        f"{got_shape} != served {values.shape}")
                    continue
                width = cost.UNQUANTIZED_BITS if bits is None else bits
                want = cost._tensor_bytes(values.size, width)
                if int(payload["bytes"]) != want:
                    problems.append(
                        f"profile {name} layer {i} {fname}: {payload['bytes']}"
                        f" bytes, cost model says {want}")
                total += int(payload["bytes"])
                try:
                    decoded = decode_payload(payload)
                except ManifestError as exc:
                    problems.append(
                        f"profile {name} layer {i} {fname}: {exc}")
                    continue
                served = values if bits is None \
                    else elastic._round_trip(values, bits)
                scale = float(np.max(np.abs(served))) if served.size else 1.0
                err = float(np.max(np.abs(decoded - served)))
                limit = tol if bits is not None \
                    else 1e-6 * max(1.0, scale)
                if err > limit:
                    problems.append(
                        f"profile {name} layer {i} {fname}: decoded factor "
                        f"deviates from the serving path by {err:.3e}")
            want_total = cost.bytes_of(lay, k, q)
            if total != want_total:
                problems.append(
                    f"profile {name} layer {i}: {total} payload bytes, "
                    f"cost model says {want_total}")


def _verify_lattice(doc, net, problems, tol):
    sec = doc.get("lattice")
    if sec is None:
        return
    try:
        lattice = lattice_from_doc(sec)
    except (KeyError, ValueError, TypeError) as exc:
        problems.append(f"lattice: fails to reconstruct ({exc})")
        return
    for j, prof in enumerate(lattice.profiles):
        if prof.name not in doc.get("profiles", {}):
            problems.append(f"lattice profile {prof.name}: no factor "
                            f"payloads stored")
        else:
            stored = pairs_from_doc(doc["profiles"][prof.name]["pairs"])
            if stored != prof.pairs:
                problems.append(f"lattice profile {prof.name}: pairs "
                                f"disagree with its payload section")
        want = sum(cost.bytes_of(b.elastic, k, q)
                   for b, (k, q) in zip(net.blocks, prof.pairs))
        if int(lattice.weight_bytes[j]) != want:
            problems.append(
                f"lattice profile {prof.name}: weight_bytes "
                f"{lattice.weight_bytes[j]} != recomputed {want}")
    cert = doc.get("certificate")
    if cert is not None:
        for j, prof in enumerate(lattice.profiles):
            entry = cert["profiles"].get(prof.name)
            if entry is None:
                continue
            if not _close(lattice.drift_bound[j],
                          parse_float(entry["delta_hat"]), tol):
                problems.append(
                    f"lattice profile {prof.name}: drift bound disagrees "
                    f"with the certificate ledger")


def _verify_certificate(doc, net, problems, tol, calibration_inputs):
    sec = doc.get("certificate")
    if sec is None:
        return
    conservative = sec.get("mode") == "conservative"
    if bool(sec.get("certified")) != conservative:
        problems.append("certificate: only the conservative mode may be "
                        "marked certified")
    alpha = _parse_list(sec["alpha"])
    if len(alpha) != len(net.blocks):
        problems.append("certificate: alpha length mismatch")
        return
    calib = doc.get("calibration")
    if calib is not None and list(sec["alpha"]) != list(calib["alpha"]):
        problems.append("certificate: alpha differs from the calibration "
                        "section")
    mode = certificate.CONSERVATIVE if conservative \
        else certificate.PowerIter()
    for name, entry in sorted(sec["profiles"].items()):
        pairs = pairs_from_doc(entry["pairs"])
        sens = _parse_list(entry["sensitivity"])
        change = _parse_list(entry["weight_change"])
        if not len(pairs) == len(sens) == len(change) == len(net.blocks):
            problems.append(f"certificate {name}: ragged ledger row")
            continue
        total = 0.0
        for m, d, a in zip(sens, change, alpha):
            total += m * d * a
        if not _close(total, parse_float(entry["delta_hat"]), tol):
            problems.append(
                f"certificate {name}: delta_hat is not the sum of its "
                f"ledger rows")
        for i, (k, q) in enumerate(pairs):
            fresh = certificate.compression_gain(net, i, k, q)
            if not _close(fresh, change[i], tol):
                problems.append(
                    f"certificate {name} layer {i}: weight-change norm "
                    f"{change[i]!r} != recomputed {fresh!r}")
        if conservative:
            fresh_sens = [
                certificate.lipschitz_proxy(net, i, certificate.CONSERVATIVE,
                                            profile=list(pairs))
                for i in range(len(net.blocks))]
        elif calibration_inputs is not None:
            fresh_sens = [
                certificate.lipschitz_proxy(net, i, mode, calibration_inputs)
                for i in range(len(net.blocks))]
        else:
            continue
        for i, (got, fresh) in enumerate(zip(sens, fresh_sens)):
            if not _close(fresh, got, tol):
                problems.append(
                    f"certificate {name} layer {i}: sensitivity {got!r} "
                    f"!= recomputed {fresh!r}")


def verify_manifest(doc_or_path, calibration_inputs=None, tol=1e-10):
    """Independently re-check a manifest; returns a list of problems.

    An empty list means every check passed: payload checksums and byte
    counts, fingerprint round-trip, served-factor agreement, cost-model
    byte accounting, lattice consistency, and — for conservative
    certificates — full recomputation of every ledger quantity from the
    decoded parameters. Power-iteration ledgers are data-dependent, so
    their sensitivities are only recomputed when calibration inputs are
    supplied; their weight-change norms and aggregates are re-checked
    regardless.
    """
    problems = []
    if isinstance(doc_or_path, (str, os.PathLike)):
        try:
            doc = read_manifest(doc_or_path)
        except ManifestError as exc:
            return [str(exc)]
    else:
        doc = doc_or_path
    if doc.get("format") != FORMAT or doc.get("version") != VERSION:
        return ["unrecognized manifest format or version"]
    for i, p in enumerate(_walk_payloads(doc)):
        raw = p.get("data")
        if not isinstance(raw, (bytes, bytearray)):
            return [f"payload {i}: data not materialized (read the "
                    f"manifest from disk first)"]
        if len(raw) != int(p["bytes"]) \
                or hashlib.sha256(raw).hexdigest() != p["sha256"]:
            problems.append(f"payload {i}: checksum or size mismatch")
    if problems:
        return problems
    if doc.get("kind") == KIND_RAW:
        try:
            raw_from_doc(doc)
        except (ManifestError, KeyError, ValueError) as exc:
            problems.append(f"raw model: {exc}")
        return problems
    try:
        net = net_from_doc(doc, check_fingerprint=False)
    except (ManifestError, KeyError, ValueError, TypeError) as exc:
        return [f"model: fails to decode ({exc})"]
    fingerprint = certificate.network_fingerprint(net)
    if fingerprint != doc.get("fingerprint"):
        problems.append("fingerprint: decoded parameters hash differently")
    calib = doc.get("calibration")
    if calib is not None:
        try:
            stats = stats_from_doc(calib)
        except (KeyError, ValueError, TypeError) as exc:
            problems.append(f"calibration: fails to reconstruct ({exc})")
            stats = None
        if stats is not None and stats.fingerprint != fingerprint:
            problems.append("calibration: fingerprint does not match the "
                            "stored model")
    try:
        _verify_profile_payloads(doc, net, problems, tol)
        _verify_lattice(doc, net, problems, tol)
        _verify_certificate(doc, net, problems, tol, calibration_inputs)
    except (KeyError, ValueError, TypeError) as exc:
        problems.append(f"manifest structure: {exc}")
    return problems
