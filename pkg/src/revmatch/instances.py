"""Problem instances: QAPLIB files, synthetic point-set matching, AFF1 files."""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import AffinityMatrix, ContractError, PartialSolution, Sense


class InstanceParseError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class InvalidInstanceError(ValueError):
    pass


class AffinityFormatError(ValueError):
    pass


class HeaderError(AffinityFormatError):
    pass


class DimensionMismatchError(AffinityFormatError):
    pass


class ChecksumError(AffinityFormatError):
    pass


@dataclass
class KBInstance:
    """Koopmans-Beckmann QAP: minimise ``sum_ij flow[i, j] * dist[s(i), s(j)]``."""

    n: int
    flow: np.ndarray
    dist: np.ndarray
    name: str = ""
    known_optimal: float | None = None

    def __post_init__(self):
        if self.n < 2:
            raise InvalidInstanceError(f"QAP size must be at least 2, got {self.n}")
        for m in (self.flow, self.dist):
            if m.shape != (self.n, self.n) or not np.all(np.isfinite(m)):
                raise InvalidInstanceError("flow/dist must be finite n x n matrices")


@dataclass
class Instance:
    """An affinity matrix with whatever side information is known about it."""

    K: AffinityMatrix
    gt: PartialSolution | None = None
    name: str = ""
    optimal: float | None = None
    meta: dict = field(default_factory=dict)


_TOKEN = re.compile(rb"\S+")


def parse_qaplib(text: str | bytes, name: str = "") -> KBInstance:
    """Parse ``n``, then ``n^2`` flow and ``n^2`` distance entries (row-major).

    Anything after the last entry is ignored if it starts with ``#``.
    """
    data = text.encode() if isinstance(text, str) else bytes(text)
    comment = data.find(b"#")
    body = data if comment < 0 else data[:comment]
    tokens = [(m.start(), m.group()) for m in _TOKEN.finditer(body)]
    if not tokens:
        raise InstanceParseError("empty QAPLIB input", 0)
    values = []
    for off, tok in tokens:
        try:
            values.append(float(tok))
        except ValueError:
            raise InstanceParseError(f"non-numeric token {tok.decode(errors='replace')!r}", off) from None
    n_val = values[0]
    if n_val != int(n_val):
        raise InstanceParseError(f"size must be an integer, got {n_val}", tokens[0][0])
    n = int(n_val)
    if n < 2:
        raise InvalidInstanceError(f"QAP size must be at least 2, got {n}")
    expected = 1 + 2 * n * n
    if len(values) != expected:
        off = tokens[expected][0] if len(values) > expected else len(body)
        raise InstanceParseError(f"expected {expected} numbers for n={n}, found {len(values)}", off)
    arr = np.array(values[1:], dtype=np.float64)
    flow = arr[: n * n].reshape(n, n)
    dist = arr[n * n :].reshape(n, n)
    return KBInstance(n, flow, dist, name=name)


def format_qaplib(kb: KBInstance) -> str:
    def fmt(m):
        return "\n".join(" ".join(_num(v) for v in row) for row in m)

    return f"{kb.n}\n\n{fmt(kb.flow)}\n\n{fmt(kb.dist)}\n"


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() and abs(v) < 2**53 else repr(float(v))


def read_qaplib(path: str | Path) -> KBInstance:
    """Read a ``.dat`` file plus an optional optimum sidecar.

    The sidecar is ``<stem>.opt`` holding a single number, or a QAPLIB
    ``<stem>.sln`` whose first line is ``n optimum``.
    """
    path = Path(path)
    kb = parse_qaplib(path.read_bytes(), name=path.stem)
    opt_file = path.with_suffix(".opt")
    sln_file = path.with_suffix(".sln")
    if opt_file.exists():
        kb.known_optimal = float(opt_file.read_text().split()[0])
    elif sln_file.exists():
        head = sln_file.read_text().split()
        if len(head) >= 2:
            kb.known_optimal = float(head[1])
    return kb


def kb_objective(kb: KBInstance, perm) -> float:
    perm = np.asarray(perm)
    return float((kb.flow * kb.dist[np.ix_(perm, perm)]).sum())


def kb_to_lawler(kb: KBInstance) -> AffinityMatrix:
    """``K[ia, jb] = flow[i, j] * dist[a, b]`` (a Kronecker product), minimised."""
    k = np.kron(kb.flow, kb.dist)
    return AffinityMatrix(kb.n, kb.n, (k + k.T) / 2.0, Sense.MINIMIZE)


def qaplib_instance(kb: KBInstance) -> Instance:
    return Instance(kb_to_lawler(kb), name=kb.name, optimal=kb.known_optimal)


@dataclass(frozen=True)
class SyntheticSpec:
    n_inliers: int
    n_outliers1: int = 0
    n_outliers2: int = 0
    delta_s: float = 0.0
    sigma1: float = 0.05
    rng_seed: int = 0
    scale_mode: str = "point"  # "point": one factor per point; "global": one per graph

    def __post_init__(self):
        if self.n_inliers < 1:
            raise ContractError("need at least one inlier")
        if self.n_outliers1 < 0 or self.n_outliers2 < 0:
            raise ContractError("outlier counts must be non-negative")
        if not 0.0 <= self.delta_s <= 0.5:
            raise ContractError(f"delta_s must lie in [0, 0.5], got {self.delta_s}")
        if not self.sigma1 > 0:
            raise ContractError("sigma1 must be positive")
        if self.scale_mode not in ("point", "global"):
            raise ContractError(f"unknown scale mode {self.scale_mode!r}")


def point_sets(spec: SyntheticSpec):
    """Return shuffled point sets ``(P1, P2)`` and the ground-truth node pairs."""
    rng = np.random.default_rng(spec.rng_seed)
    m = spec.n_inliers
    inliers = rng.uniform(0.0, 1.0, size=(m, 2))
    out1 = rng.uniform(0.0, 1.0, size=(spec.n_outliers1, 2))
    if spec.scale_mode == "point":
        scale = rng.uniform(1.0 - spec.delta_s, 1.0 + spec.delta_s, size=(m, 1))
    else:
        scale = np.full((m, 1), rng.uniform(1.0 - spec.delta_s, 1.0 + spec.delta_s))
    out2 = rng.uniform(0.0, 1.0, size=(spec.n_outliers2, 2))
    p1 = np.vstack([inliers, out1])
    p2 = np.vstack([inliers * scale, out2])
    perm1 = rng.permutation(len(p1))
    perm2 = rng.permutation(len(p2))
    # node perm[k] of the shuffled graph is original node k
    shuffled1 = np.empty_like(p1)
    shuffled1[perm1] = p1
    shuffled2 = np.empty_like(p2)
    shuffled2[perm2] = p2
    pairs = [(int(perm1[k]), int(perm2[k])) for k in range(m)]
    return shuffled1, shuffled2, pairs


def edge_length_affinity(p1: np.ndarray, p2: np.ndarray, sigma1: float) -> np.ndarray:
    """``K[ia, jb] = exp(-(d1[i, j] - d2[a, b])^2 / sigma1)`` for ``i != j``, ``a != b``."""
    n1, n2 = len(p1), len(p2)
    d1 = np.linalg.norm(p1[:, None, :] - p1[None, :, :], axis=-1)
    d2 = np.linalg.norm(p2[:, None, :] - p2[None, :, :], axis=-1)
    diff = d1[:, None, :, None] - d2[None, :, None, :]
    k = np.exp(-(diff**2) / sigma1)
    mask = (np.eye(n1, dtype=bool)[:, None, :, None]) | (np.eye(n2, dtype=bool)[None, :, None, :])
    k[np.broadcast_to(mask, k.shape)] = 0.0
    return k.reshape(n1 * n2, n1 * n2)


def gen_synthetic(spec: SyntheticSpec) -> tuple[AffinityMatrix, PartialSolution]:
    p1, p2, pairs = point_sets(spec)
    k = edge_length_affinity(p1, p2, spec.sigma1)
    K = AffinityMatrix(len(p1), len(p2), k, Sense.MAXIMIZE)
    gt = PartialSolution.from_pairs(K.n1, K.n2, pairs)
    return K, gt


def synthetic_instance(spec: SyntheticSpec, name: str = "") -> Instance:
    K, gt = gen_synthetic(spec)
    return Instance(K, gt, name=name, meta={"seed": spec.rng_seed})


# --- AFF1 ------------------------------------------------------------------

AFF_MAGIC = "AFF1"


def _aff_body(K: AffinityMatrix, gt: PartialSolution | None, meta: dict | None) -> str:
    lines = [f"{AFF_MAGIC} {K.n1} {K.n2} {int(gt is not None)} {K.sense.value}"]
    if meta:
        lines.append("META " + json.dumps(meta, sort_keys=True))
    for row in K.k:
        lines.append(" ".join(repr(float(v)) for v in row))
    if gt is not None:
        for i, a in sorted(gt.pairs()):
            lines.append(f"{i} {a}")
    return "\n".join(lines) + "\n"


def dumps_affinity(K: AffinityMatrix, gt: PartialSolution | None = None, meta: dict | None = None) -> str:
    body = _aff_body(K, gt, meta)
    crc = zlib.crc32(body.encode("utf-8")) & 0xFFFFFFFF
    return body + f"CRC {crc:08x}\n"


def loads_affinity(text: str) -> tuple[AffinityMatrix, PartialSolution | None, dict]:
    cut = text.rstrip("\n").rfind("\n")
    if cut < 0 or not text[cut + 1 :].startswith("CRC "):
        raise ChecksumError("missing CRC trailer")
    body, trailer = text[: cut + 1], text[cut + 1 :].split()
    try:
        expected = int(trailer[1], 16)
    except (IndexError, ValueError):
        raise ChecksumError("malformed CRC trailer") from None
    if zlib.crc32(body.encode("utf-8")) & 0xFFFFFFFF != expected:
        raise ChecksumError("CRC mismatch")

    lines = body.split("\n")[:-1]
    head = lines[0].split()
    if len(head) != 5 or head[0] != AFF_MAGIC:
        raise HeaderError(f"bad AFF1 header {lines[0]!r}")
    try:
        n1, n2, has_gt = int(head[1]), int(head[2]), int(head[3])
        sense = Sense.parse(head[4])
    except ValueError as exc:
        raise HeaderError(f"bad AFF1 header {lines[0]!r}: {exc}") from None
    if n1 <= 0 or n2 <= 0 or has_gt not in (0, 1):
        raise HeaderError(f"bad AFF1 header {lines[0]!r}")
    pos = 1
    meta = {}
    if pos < len(lines) and lines[pos].startswith("META "):
        meta = json.loads(lines[pos][5:])
        pos += 1

    size = n1 * n2
    tokens: list[str] = []
    while pos < len(lines) and len(tokens) < size * size:
        tokens.extend(lines[pos].split())
        pos += 1
    rest = [ln.split() for ln in lines[pos:] if ln.strip()]
    if len(tokens) != size * size or (rest and len(rest[0]) != 2):
        raise DimensionMismatchError(f"expected {size * size} affinity entries for {n1}x{n2}")
    if rest and not has_gt:
        raise DimensionMismatchError("trailing data after affinity entries")
    try:
        k = np.array([float(t) for t in tokens], dtype=np.float64).reshape(size, size)
    except ValueError as exc:
        raise AffinityFormatError(f"non-numeric affinity entry: {exc}") from None
    K = AffinityMatrix(n1, n2, k, sense)
    gt = None
    if has_gt:
        try:
            gt = PartialSolution.from_pairs(n1, n2, [(int(i), int(a)) for i, a in rest])
        except (ValueError, ContractError) as exc:
            raise AffinityFormatError(f"invalid ground truth: {exc}") from None
    return K, gt, meta


def write_affinity(path, K: AffinityMatrix, gt: PartialSolution | None = None, meta: dict | None = None):
    Path(path).write_text(dumps_affinity(K, gt, meta), encoding="utf-8")


def read_affinity(path) -> tuple[AffinityMatrix, PartialSolution | None, dict]:
    return loads_affinity(Path(path).read_text(encoding="utf-8"))


def load_instance(path) -> Instance:
    """Load an ``.aff`` (AFF1) or ``.dat`` (QAPLIB) file."""
    path = Path(path)
    if path.suffix == ".dat":
        return qaplib_instance(read_qaplib(path))
    K, gt, meta = read_affinity(path)
    return Instance(K, gt, name=meta.get("name", path.stem), optimal=meta.get("optimal"), meta=meta)
