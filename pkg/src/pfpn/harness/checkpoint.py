"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"PFPN1"
    repeated until EOF:
        uint32   name length in bytes
        bytes    name (UTF-8)
        uint64   element count
        float64  elements, little-endian, row-major

Arrays are stored flat. The ``header`` section records what is needed to
rebuild the shapes::

    [format_version, variant_index, obs_dim, act_dim, n, n_hidden, *hidden,
     value_layers, *value_hidden]

``variant_index`` indexes :data:`pfpn.policy.VARIANTS`; ``value_layers`` is
``-1`` when no value network is stored. Policy sections are named ``trunk.<i>.W``,
``trunk.<i>.b``, ``final.W``, ``final.b``, ``particles.mu``, ``particles.log_xi``;
value sections ``value.W<i>`` / ``value.b<i>``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..numerics import MlpParams
from ..policy import VARIANTS, DiscreteHead, GaussianHead, GMMHead, PFPNHead, ParticleSet, PolicyHead

MAGIC = b"PFPN1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, section: str, reason: str):
        self.section = section
        super().__init__(f"checkpoint section {section!r}: {reason}")


def write_container(path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        flat = np.ascontiguousarray(arr, dtype="<f8").ravel()
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", flat.size))
        chunks.append(flat.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_container(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("magic", f"expected {MAGIC!r}, found {data[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}
    index = 0
    while pos < len(data):
        label = f"#{index}"
        if pos + 4 > len(data):
            raise CheckpointError(label, "truncated name length")
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + name_len + 8 > len(data):
            raise CheckpointError(label, "truncated name or element count")
        try:
            name = data[pos : pos + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(label, "name is not valid UTF-8") from exc
        pos += name_len
        (count,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        nbytes = 8 * count
        if pos + nbytes > len(data):
            raise CheckpointError(name, f"declares {count} elements but the file ends early")
        out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += nbytes
        index += 1
    return out


def head_header(head: PolicyHead, value_net: MlpParams | None) -> np.ndarray:
    hidden = head.hidden
    values = [FORMAT_VERSION, VARIANTS.index(head.variant), head.obs_dim, head.act_dim, head.n, len(hidden), *hidden]
    if value_net is None:
        values.append(-1)
    else:
        vh = value_net.sizes[1:-1]
        values += [len(vh), *vh]
    return np.array(values, dtype=np.float64)


def save_checkpoint(path, head: PolicyHead, value_net: MlpParams | None = None) -> None:
    arrays = {"header": head_header(head, value_net)}
    arrays.update(head.parameters())
    if value_net is not None:
        arrays.update(value_net.named("value"))
    write_container(path, arrays)


def _take(arrays, name, shape):
    if name not in arrays:
        raise CheckpointError(name, "missing")
    flat = arrays[name]
    expected = int(np.prod(shape))
    if flat.size != expected:
        raise CheckpointError(name, f"holds {flat.size} elements, expected {expected} for shape {shape}")
    if not np.all(np.isfinite(flat)):
        raise CheckpointError(name, "contains non-finite values")
    return flat.reshape(shape).copy()


def load_checkpoint(path) -> tuple[PolicyHead, MlpParams | None]:
    arrays = read_container(path)
    if "header" not in arrays:
        raise CheckpointError("header", "missing")
    h = arrays["header"]
    try:
        version, variant_idx, obs_dim, act_dim, n, n_hidden = (int(v) for v in h[:6])
        hidden = [int(v) for v in h[6 : 6 + n_hidden]]
        rest = h[6 + n_hidden :]
        value_layers = int(rest[0])
        value_hidden = [int(v) for v in rest[1 : 1 + value_layers]] if value_layers >= 0 else None
    except (ValueError, IndexError) as exc:
        raise CheckpointError("header", "malformed") from exc
    if version != FORMAT_VERSION:
        raise CheckpointError("header", f"unsupported format version {version}")
    if not 0 <= variant_idx < len(VARIANTS):
        raise CheckpointError("header", f"unknown variant index {variant_idx}")
    variant = VARIANTS[variant_idx]
    out_dim = {"pfpn": n * act_dim, "discrete": n * act_dim, "gmm": 3 * n * act_dim, "gaussian": 2 * act_dim}[variant]
    sizes = [obs_dim, *hidden, out_dim]
    weights, biases, acts = [], [], []
    for idx in range(len(sizes) - 1):
        prefix = "final" if idx == len(sizes) - 2 else f"trunk.{idx}"
        weights.append(_take(arrays, f"{prefix}.W", (sizes[idx + 1], sizes[idx])))
        biases.append(_take(arrays, f"{prefix}.b", (sizes[idx + 1],)))
        acts.append("identity" if prefix == "final" else "relu")
    net = MlpParams(weights, biases, acts)
    if variant == "pfpn":
        particles = ParticleSet(_take(arrays, "particles.mu", (n, act_dim)), _take(arrays, "particles.log_xi", (n, act_dim)))
        head = PFPNHead(net, particles)
    elif variant == "discrete":
        head = DiscreteHead(net, act_dim, n)
    elif variant == "gmm":
        head = GMMHead(net, act_dim, n)
    else:
        head = GaussianHead(net, act_dim)
    value_net = None
    if value_hidden is not None:
        vsizes = [obs_dim, *value_hidden, 1]
        vw, vb, va = [], [], []
        for idx in range(len(vsizes) - 1):
            vw.append(_take(arrays, f"value.W{idx}", (vsizes[idx + 1], vsizes[idx])))
            vb.append(_take(arrays, f"value.b{idx}", (vsizes[idx + 1],)))
            va.append("identity" if idx == len(vsizes) - 2 else "relu")
        value_net = MlpParams(vw, vb, va)
    return head, value_net
