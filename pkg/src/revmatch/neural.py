"""Association-graph embedding and dueling Q head with explicit backprop.

Embedding, iterated ``T`` times from ``E = 0``::

    E <- relu(x θ1ᵀ + (A E / deg) θ2 + (A f / deg) θ3ᵀ + (s / deg) θ4)
    s[p, k] = sum_{q ~ p} relu(w[p, q] θ5[k])

Dueling head::

    h5 = relu(E θ6 + b1);  v = mean_p(h5) · θ7 + b2;  adv = h5 θ8 + b3
    Q = v + adv - mean(adv)

All arrays carry a leading batch axis; every instance in a batch must have
the same ``(n1, n2)``.

Two switches select alternative readings of the embedding:

* ``h2_mode="affinity"`` aggregates neighbour embeddings weighted by the edge
  affinities ``w`` instead of the plain adjacency ``A``.
* ``h4_mode="rowsum"`` lifts the scalar row sum ``sum_q w[p, q]`` through
  ``relu(· θ5)`` instead of summing per-edge lifts.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ContractError, adjacency_mask

PARAM_FIELDS = ("theta1", "theta2", "theta3", "theta4", "theta5", "theta6",
                "theta7", "theta8", "b1", "b2", "b3")
H2_MODES = ("adjacency", "affinity")
H4_MODES = ("edge", "rowsum")
CKPT_MAGIC = "RGMCKPT1"


@dataclass
class QNetParams:
    theta1: np.ndarray  # (d,)
    theta2: np.ndarray  # (d, d)
    theta3: np.ndarray  # (d,)
    theta4: np.ndarray  # (d, d)
    theta5: np.ndarray  # (d,)
    theta6: np.ndarray  # (d, dh)
    theta7: np.ndarray  # (dh,)
    theta8: np.ndarray  # (dh,)
    b1: np.ndarray  # (dh,)
    b2: np.ndarray  # ()
    b3: np.ndarray  # ()
    T: int = 3
    h2_mode: str = "adjacency"
    h4_mode: str = "edge"
    dueling: bool = True

    @property
    def d(self) -> int:
        return self.theta1.shape[0]

    @property
    def dh(self) -> int:
        return self.theta6.shape[1]

    def tensors(self):
        return [(name, getattr(self, name)) for name in PARAM_FIELDS]

    def copy(self) -> "QNetParams":
        return self.map(np.copy)

    def map(self, fn, *others: "QNetParams") -> "QNetParams":
        values = {name: fn(getattr(self, name), *(getattr(o, name) for o in others)) for name in PARAM_FIELDS}
        return QNetParams(**values, T=self.T, h2_mode=self.h2_mode, h4_mode=self.h4_mode,
                          dueling=self.dueling)

    def zeros_like(self) -> "QNetParams":
        return self.map(np.zeros_like)

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v)) for _, v in self.tensors())))

    def validate(self):
        d, dh = self.d, self.dh
        shapes = {"theta1": (d,), "theta2": (d, d), "theta3": (d,), "theta4": (d, d),
                  "theta5": (d,), "theta6": (d, dh), "theta7": (dh,), "theta8": (dh,),
                  "b1": (dh,), "b2": (), "b3": ()}
        for name, value in self.tensors():
            if value.shape != shapes[name]:
                raise ContractError(f"{name} has shape {value.shape}, expected {shapes[name]}")
            if not np.all(np.isfinite(value)):
                raise ContractError(f"{name} has non-finite entries")
        if self.T < 0:
            raise ContractError("T must be non-negative")
        if self.h2_mode not in H2_MODES or self.h4_mode not in H4_MODES:
            raise ContractError(f"unknown network variant {self.h2_mode}/{self.h4_mode}")

    def arch(self) -> tuple:
        return (self.d, self.dh, self.T, self.h2_mode, self.h4_mode, self.dueling)

    def equals(self, other: "QNetParams") -> bool:
        return self.arch() == other.arch() and all(
            np.array_equal(a, b) for (_, a), (_, b) in zip(self.tensors(), other.tensors())
        )


def init_params(d: int = 128, T: int = 3, rng_seed: int = 0, dh: int | None = None,
                h2_mode: str = "adjacency", h4_mode: str = "edge", dueling: bool = True) -> QNetParams:
    """Weights i.i.d. ``U(-1/sqrt(d), 1/sqrt(d))``, biases zero."""
    if d < 1:
        raise ContractError("hidden size must be at least 1")
    dh = d if dh is None else dh
    rng = np.random.default_rng(rng_seed)
    bound = 1.0 / np.sqrt(d)
    u = lambda *shape: rng.uniform(-bound, bound, size=shape)  # noqa: E731
    params = QNetParams(
        theta1=u(d), theta2=u(d, d), theta3=u(d), theta4=u(d, d), theta5=u(d),
        theta6=u(d, dh), theta7=u(dh), theta8=u(dh),
        b1=np.zeros(dh), b2=np.zeros(()), b3=np.zeros(()),
        T=T, h2_mode=h2_mode, h4_mode=h4_mode, dueling=dueling,
    )
    params.validate()
    return params


def sgd_step(params: QNetParams, grads: QNetParams, lr: float) -> QNetParams:
    return params.map(lambda p, g: p - lr * g, grads)


@dataclass
class AdamState:
    m: QNetParams
    v: QNetParams
    t: int = 0


def adam_step(params: QNetParams, grads: QNetParams, lr: float, state: AdamState | None,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update; returns ``(params, state)``. Optional alternative to ``sgd_step``."""
    if state is None:
        state = AdamState(params.zeros_like(), params.zeros_like())
    t = state.t + 1
    m = state.m.map(lambda m_, g: beta1 * m_ + (1 - beta1) * g, grads)
    v = state.v.map(lambda v_, g: beta2 * v_ + (1 - beta2) * g * g, grads)
    c1, c2 = 1 - beta1**t, 1 - beta2**t
    new = params.map(lambda p, m_, v_: p - lr * (m_ / c1) / (np.sqrt(v_ / c2) + eps), m, v)
    return new, AdamState(m, v, t)


# --- inputs ------------------------------------------------------------------


@dataclass
class NetInput:
    """Per-vertex features for a batch of states on ``n1 x n2`` association graphs.

    ``wpos``/``wneg`` are the sums of the positive/negative edge weights over
    each vertex's neighbours; ``w`` (only needed for ``h2_mode="affinity"``)
    holds the edge weights with non-adjacent pairs zeroed.
    """

    n1: int
    n2: int
    x: np.ndarray  # (B, n)
    nbr_f: np.ndarray  # (B, n), neighbour-averaged vertex weight
    wpos: np.ndarray  # (B, n)
    wneg: np.ndarray  # (B, n)
    w: np.ndarray | None = None  # (B, n, n)

    @property
    def batch(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.n1 * self.n2

    @property
    def degree(self) -> int:
        return max((self.n1 - 1) * (self.n2 - 1), 1)

    @staticmethod
    def stack(items: list["NetInput"]) -> "NetInput":
        first = items[0]
        if any((it.n1, it.n2) != (first.n1, first.n2) for it in items):
            raise ContractError("cannot batch association graphs of different sizes")
        w = None if first.w is None else np.concatenate([it.w for it in items])
        return NetInput(first.n1, first.n2,
                        np.concatenate([it.x for it in items]),
                        np.concatenate([it.nbr_f for it in items]),
                        np.concatenate([it.wpos for it in items]),
                        np.concatenate([it.wneg for it in items]), w)


class GraphFeatures:
    """State-independent features of one affinity matrix, reusable across steps.

    ``features(x, shift, scale)`` describes the matrix
    ``scale * (K - shift[0] * ones - shift[1] * I)``, the form taken by the
    regularised affinity.
    """

    def __init__(self, k: np.ndarray, n1: int, n2: int):
        self.n1, self.n2 = n1, n2
        self.adj = adjacency_mask(n1, n2)
        self.f = np.diag(k).copy()
        self.w_adj = np.where(self.adj, k, 0.0)
        self.true_degree = (n1 - 1) * (n2 - 1)
        self.degree = max(self.true_degree, 1)
        self.nbr_f_base = aggregate(self.f[None, :, None], n1, n2)[0, :, 0] / self.degree
        self._base = {}

    def features(self, x: np.ndarray, shift: tuple[float, float] | None = None, scale: float = 1.0,
                 need_w: bool = False) -> NetInput:
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        alpha, beta = shift if shift is not None else (0.0, 0.0)
        key = (alpha, beta, scale, need_w)
        cached = self._base.get(key)
        if cached is None:
            nbr_f = scale * (self.nbr_f_base - (alpha + beta) * self.true_degree / self.degree)
            if alpha == 0.0:
                w = scale * self.w_adj
            else:
                w = scale * np.where(self.adj, self.w_adj - alpha, 0.0)
            wpos = np.maximum(w, 0.0).sum(axis=1)
            wneg = np.minimum(w, 0.0).sum(axis=1)
            cached = (nbr_f[None], wpos[None], wneg[None], w[None] if need_w else None)
            # only unshifted features are worth keeping; shifted ones change every step
            if shift is None:
                self._base[key] = cached
        nbr_f, wpos, wneg, w = cached
        return NetInput(self.n1, self.n2, x, nbr_f, wpos, wneg, w)


def net_input(k: np.ndarray, n1: int, n2: int, x, need_w: bool = False) -> NetInput:
    return GraphFeatures(np.asarray(k, dtype=np.float64), n1, n2).features(x, need_w=need_w)


def aggregate(E: np.ndarray, n1: int, n2: int) -> np.ndarray:
    """``A @ E`` for the implicit association adjacency, batched over axis 0.

    Uses ``A E = total - row-group sums - column-group sums + E``.
    """
    B, n, d = E.shape
    G = E.reshape(B, n1, n2, d)
    total = G.sum(axis=(1, 2))
    rows = G.sum(axis=2)
    cols = G.sum(axis=1)
    out = total[:, None, None, :] - rows[:, :, None, :] - cols[:, None, :, :] + G
    return out.reshape(B, n, d)


def _relu(z):
    return np.maximum(z, 0.0)


# --- forward / backward ------------------------------------------------------


@dataclass
class ForwardCache:
    inp: NetInput
    s: np.ndarray  # edge-feature aggregate, (B, n, d)
    s_pre: np.ndarray | None  # rowsum variant pre-activation
    agg: list  # neighbour aggregates per iteration, each (B, n, d)
    pre: list  # pre-activations per iteration
    E: np.ndarray
    z: np.ndarray
    h5: np.ndarray
    ha: np.ndarray


def _neighbour(E: np.ndarray, inp: NetInput, mode: str) -> np.ndarray:
    if mode == "adjacency":
        return aggregate(E, inp.n1, inp.n2)
    return np.matmul(inp.w, E)


def embed_forward(inp: NetInput, params: QNetParams):
    """Return ``(E, partial cache)``; ``E`` has shape ``(B, n, d)``."""
    deg = inp.degree
    th5 = params.theta5
    if params.h4_mode == "edge":
        # sum_q relu(w θ5) splits by the sign of θ5
        s = inp.wpos[..., None] * np.maximum(th5, 0.0) + inp.wneg[..., None] * np.minimum(th5, 0.0)
        s_pre = None
    else:
        s_pre = (inp.wpos + inp.wneg)[..., None] * th5
        s = _relu(s_pre)
    if params.h2_mode == "affinity" and inp.w is None:
        raise ContractError("h2_mode='affinity' needs edge weights in the input")
    const = (inp.x[..., None] * params.theta1 + inp.nbr_f[..., None] * params.theta3
             + (s / deg) @ params.theta4)
    E = np.zeros(const.shape)
    aggs, pres = [], []
    for t in range(params.T):
        agg = _neighbour(E, inp, params.h2_mode) / deg if t else np.zeros_like(E)
        pre = const + agg @ params.theta2
        aggs.append(agg)
        pres.append(pre)
        E = _relu(pre)
    return E, (inp, s, s_pre, aggs, pres)


def q_forward(E: np.ndarray, params: QNetParams):
    """Dueling head; returns ``Q`` of shape ``(B, n)`` and its intermediates."""
    n = E.shape[1]
    z = E @ params.theta6 + params.b1
    h5 = _relu(z)
    hv = h5.sum(axis=1) @ params.theta7 / n + params.b2
    ha = h5 @ params.theta8 + params.b3
    if not params.dueling:
        return ha, (z, h5, ha)
    Q = hv[:, None] + ha - ha.mean(axis=1, keepdims=True)
    return Q, (z, h5, ha)


def forward(inp: NetInput, params: QNetParams, keep_cache: bool = False):
    E, emb = embed_forward(inp, params)
    Q, head = q_forward(E, params)
    if not keep_cache:
        return Q, None
    inp_, s, s_pre, aggs, pres = emb
    z, h5, ha = head
    return Q, ForwardCache(inp_, s, s_pre, aggs, pres, E, z, h5, ha)


def backward(gQ: np.ndarray, cache: ForwardCache, params: QNetParams) -> QNetParams:
    """Gradients of ``sum(gQ * Q)`` with respect to every parameter tensor."""
    if cache is None:
        raise ContractError("backward needs the cache from forward(..., keep_cache=True)")
    inp = cache.inp
    B, n = gQ.shape
    deg = inp.degree
    g = params.zeros_like()

    if params.dueling:
        ga = gQ - gQ.mean(axis=1, keepdims=True)
        ghv = gQ.sum(axis=1)
    else:
        ga, ghv = gQ, np.zeros(B)
    g.b3 = np.asarray(ga.sum())
    g.b2 = np.asarray(ghv.sum())
    g.theta8 = np.einsum("bnk,bn->k", cache.h5, ga)
    g.theta7 = np.einsum("b,bk->k", ghv, cache.h5.sum(axis=1)) / n
    gh5 = ga[..., None] * params.theta8 + (ghv[:, None, None] / n) * params.theta7
    gz = gh5 * (cache.z > 0)
    g.b1 = gz.sum(axis=(0, 1))
    E = cache.E
    g.theta6 = E.reshape(-1, E.shape[-1]).T @ gz.reshape(-1, gz.shape[-1])
    gE = gz @ params.theta6.T

    d = params.d
    gconst = np.zeros_like(E)
    g.theta2 = np.zeros((d, d))
    for t in reversed(range(params.T)):
        gpre = gE * (cache.pre[t] > 0)
        gconst += gpre
        if t == 0:
            break
        agg = cache.agg[t]
        g.theta2 += agg.reshape(-1, d).T @ gpre.reshape(-1, d)
        gagg = gpre @ params.theta2.T / deg
        if params.h2_mode == "adjacency":
            gE = aggregate(gagg, inp.n1, inp.n2)  # A is symmetric
        else:
            gE = np.matmul(np.swapaxes(inp.w, 1, 2), gagg)

    g.theta1 = np.einsum("bn,bnk->k", inp.x, gconst)
    g.theta3 = np.einsum("bn,bnk->k", inp.nbr_f, gconst)
    s_scaled = cache.s / deg
    g.theta4 = s_scaled.reshape(-1, d).T @ gconst.reshape(-1, d)
    gs = gconst @ params.theta4.T / deg
    if params.h4_mode == "edge":
        th5 = params.theta5
        g.theta5 = (np.einsum("bnk,bn->k", gs, inp.wpos) * (th5 > 0)
                    + np.einsum("bnk,bn->k", gs, inp.wneg) * (th5 < 0))
    else:
        g.theta5 = np.einsum("bnk,bn->k", gs * (cache.s_pre > 0), inp.wpos + inp.wneg)
    return g


# --- checkpoints -------------------------------------------------------------


def dumps_params(params: QNetParams) -> str:
    head = "dueling" if params.dueling else "plain"
    lines = [f"{CKPT_MAGIC} {params.d} {params.T} {params.h2_mode} {params.h4_mode} {head}"]
    for name, value in params.tensors():
        tokens = [name, str(value.ndim), *map(str, value.shape), *(repr(float(v)) for v in np.ravel(value))]
        lines.append(" ".join(tokens))
    text = "\n".join(lines) + "\n"
    crc = zlib.crc32(text.encode()) & 0xFFFFFFFF
    return text + f"CRC {crc:08x}\n"


class CheckpointError(ValueError):
    pass


def loads_params(text: str) -> QNetParams:
    try:
        return _loads_params(text)
    except CheckpointError:
        raise
    except (ValueError, IndexError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None


def _loads_params(text: str) -> QNetParams:
    cut = text.rstrip("\n").rfind("\n")
    trailer = text[cut + 1 :].split()
    if cut < 0 or len(trailer) != 2 or trailer[0] != "CRC":
        raise CheckpointError("missing CRC trailer")
    body = text[: cut + 1]
    if zlib.crc32(body.encode()) & 0xFFFFFFFF != int(trailer[1], 16):
        raise CheckpointError("checkpoint CRC mismatch")
    lines = body.split("\n")[:-1]
    head = lines[0].split()
    if len(head) < 3 or head[0] != CKPT_MAGIC:
        raise CheckpointError(f"not a checkpoint header: {lines[0]!r}")
    d, T = int(head[1]), int(head[2])
    h2_mode = head[3] if len(head) > 3 else "adjacency"
    h4_mode = head[4] if len(head) > 4 else "edge"
    dueling = head[5] != "plain" if len(head) > 5 else True
    values = {}
    for line, name in zip(lines[1:], PARAM_FIELDS):
        tok = line.split()
        if tok[0] != name:
            raise CheckpointError(f"expected tensor {name}, found {tok[0]}")
        ndim = int(tok[1])
        shape = tuple(int(s) for s in tok[2 : 2 + ndim])
        data = np.array([float(v) for v in tok[2 + ndim :]], dtype=np.float64)
        values[name] = data.reshape(shape)
    if len(values) != len(PARAM_FIELDS):
        raise CheckpointError("checkpoint is missing tensors")
    params = QNetParams(**values, T=T, h2_mode=h2_mode, h4_mode=h4_mode, dueling=dueling)
    params.validate()
    if params.d != d:
        raise CheckpointError("header hidden size disagrees with tensors")
    return params


def save_params(path, params: QNetParams):
    Path(path).write_text(dumps_params(params))


def load_params(path) -> QNetParams:
    return loads_params(Path(path).read_text())

