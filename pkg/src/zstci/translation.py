"""Residual translation between adjacent embedding spaces and prototype memory.

After task ``t`` is trained, two residual maps are fitted on current-task data
only: ``g_old`` acts on features of the previous network, ``g_cur`` on
features of the current one, and both land in a shared space.  Stored
prototypes of earlier classes are then pushed through ``g_old`` and the new
classes' prototypes through ``g_cur``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import numeric as nc
from .embedding import embed, minibatches
from .errors import ConfigError, DataError, DimensionError, ProtocolError

PROTO_NEGATIVES = ("random", "all")
CHAIN_MODES = ("identify", "invert")


def compute_prototypes(model, task):
    """Per-class mean of the embedded training samples (not re-normalized)."""
    z = embed(model, task.x_train)
    protos = []
    for c in task.classes:
        mask = task.y_train == c
        if not mask.any():
            raise DataError(f"task {task.index}: class {c} has no training samples")
        protos.append((c, z[mask].mean(axis=0)))
    return protos


class PrototypeMemory:
    """Class id -> (prototype, origin task).

    The entry table is replaced wholesale on every write, so a reader holding
    ``snapshot()`` never observes a half-applied update.
    """

    def __init__(self, entries=None, log=None):
        self._entries = dict(entries or {})
        self._log = tuple(log if log is not None else self._entries)
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, c):
        return c in self._entries

    def __getitem__(self, c):
        return self._entries[c]

    @property
    def classes(self):
        return tuple(sorted(self._entries))

    @property
    def insertion_log(self):
        return self._log

    @property
    def dim(self):
        if not self._entries:
            return None
        return len(next(iter(self._entries.values()))[0])

    def snapshot(self):
        return dict(self._entries)

    def vector(self, c):
        return self._entries[c][0]

    def as_arrays(self, order="id"):
        """``(class_ids, vectors)``; ``order`` is ``"id"`` or ``"insertion"``."""
        entries = self._entries
        ids = sorted(entries) if order == "id" else [c for c in self._log if c in entries]
        if not ids:
            return np.zeros(0, dtype=np.int64), np.zeros((0, 0))
        return np.asarray(ids), np.stack([entries[c][0] for c in ids])

    def swap(self, entries, log):
        for c, (vec, _) in entries.items():
            if not np.all(np.isfinite(vec)):
                raise DataError(f"prototype for class {c} is not finite")
        dims = {len(v) for v, _ in entries.values()}
        if len(dims) > 1:
            raise DimensionError(f"prototype dimensions differ: {sorted(dims)}")
        with self._lock:
            self._entries, self._log = dict(entries), tuple(log)

    def insert(self, protos, origin_task):
        entries = self.snapshot()
        log = list(self._log)
        for c, vec in protos:
            if c in entries:
                raise ProtocolError(f"class {c} is already in prototype memory")
            entries[c] = (np.array(vec, copy=True), origin_task)
            log.append(c)
        self.swap(entries, log)
        return self


@dataclass(frozen=True)
class TranslationPair:
    g_old: nc.ParamSet
    g_cur: nc.ParamSet
    arch: tuple
    activation: str = "relu"

    def __post_init__(self):
        if self.arch[0] != self.arch[-1]:
            raise DimensionError("residual maps need equal input and output dimensions")
        if not self.g_old.same_layout(self.g_cur):
            raise DimensionError("g_old and g_cur must share an architecture")

    def as_params(self):
        data = {f"old/{k}": v for k, v in self.g_old.items()}
        data.update({f"cur/{k}": v for k, v in self.g_cur.items()})
        return nc.ParamSet(data)

    def split(self, params):
        """Graph-leaf dicts ``(old, cur)`` from a combined parameter mapping."""
        old = {k[4:]: v for k, v in params.items() if k.startswith("old/")}
        cur = {k[4:]: v for k, v in params.items() if k.startswith("cur/")}
        return old, cur

    def with_params(self, params):
        old, cur = self.split(params)
        return TranslationPair(nc.ParamSet(old), nc.ParamSet(cur), self.arch, self.activation)

    def map_old(self, v):
        return translate(self.g_old, v, self.arch, self.activation)

    def map_cur(self, v):
        return translate(self.g_cur, v, self.arch, self.activation)


def init_pair(embed_dim, hidden, rng, activation="relu", dtype=np.float64):
    """Two residual maps whose output layers start at zero, i.e. the identity."""
    arch = (int(embed_dim), int(hidden), int(embed_dim))
    g_old = nc.init_mlp(arch, rng, zero_last=True, dtype=dtype)
    g_cur = nc.init_mlp(arch, rng, zero_last=True, dtype=dtype)
    return TranslationPair(g_old, g_cur, arch, activation)


def translate_graph(g, v, arch, activation="relu"):
    v = nc.as_var(v)
    return v + nc.mlp_graph(g, v, arch, activation)


def translate(g, v, arch, activation="relu"):
    """``v + g(v)`` for one vector or a batch of row vectors."""
    v = np.asarray(v)
    single = v.ndim == 1
    out = translate_graph(g, v[None, :] if single else v, arch, activation).value
    return out[0] if single else out


def invert_translation(g, v, arch, activation="relu", iters=50):
    """Approximate pre-image of ``v`` under ``x -> x + g(x)`` by fixed-point iteration."""
    v = np.atleast_2d(np.asarray(v))
    x = v.copy()
    for _ in range(iters):
        x = v - nc.mlp_forward(g, x, arch, activation)
    return x


def align_loss(old_feats, cur_feats, pair, params=None):
    """Mean over rows of the L1 distance between translated old and current features."""
    old_feats, cur_feats = nc.as_var(old_feats), nc.as_var(cur_feats)
    if old_feats.shape != cur_feats.shape:
        raise ProtocolError(f"feature batches differ in shape: {old_feats.shape} vs {cur_feats.shape}")
    g_old, g_cur = pair.split(params) if params is not None else (pair.g_old, pair.g_cur)
    m_old = translate_graph(g_old, old_feats, pair.arch, pair.activation)
    m_cur = translate_graph(g_cur, cur_feats, pair.arch, pair.activation)
    return nc.scale(nc.sum_(nc.absolute(m_old - m_cur)), 1.0 / old_feats.shape[0])


@dataclass(frozen=True)
class TransitionConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 0.002
    gamma_tri: float = 1000.0
    beta: float = 100.0
    delta: float = 100.0
    align_weight: float = 1.0
    margin: float = 0.3
    hidden: int = 1024
    activation: str = "relu"
    proto_negatives: str = "random"
    chain: str = "identify"

    def __post_init__(self):
        for name in ("gamma_tri", "beta", "delta", "align_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not self.margin > 0:
            raise ConfigError("margin must be positive")
        if self.epochs < 0 or self.batch_size < 2 or self.hidden < 1:
            raise ConfigError("epochs >= 0, batch_size >= 2 and hidden >= 1 required")
        if self.proto_negatives not in PROTO_NEGATIVES:
            raise ConfigError(f"proto_negatives must be one of {PROTO_NEGATIVES}")
        if self.chain not in CHAIN_MODES:
            raise ConfigError(f"chain must be one of {CHAIN_MODES}")
        if self.activation not in nc.ACTIVATIONS:
            raise ConfigError(f"activation must be one of {nc.ACTIVATIONS}")


def _same_class_pairs(labels):
    labels = np.asarray(labels)
    same = (labels[:, None] == labels[None, :]) & ~np.eye(len(labels), dtype=bool)
    return np.nonzero(same)


def unified_triplet_loss(m_batch, m_tilde_batch, labels, old_protos, cfg, rng=None):
    """Weighted sum of three prototype-aware triplet terms in the shared space.

    * current features as anchors: same-class positive, translated old
      prototype as negative (weight ``gamma_tri``);
    * old-network features as anchors, same construction (weight ``beta``);
    * translated old prototypes as anchors with themselves as positive, so
      the term is ``max(0, margin - d(u, m))`` against current features
      (weight ``delta``).

    With ``cfg.proto_negatives == "random"`` one prototype (resp. one batch
    feature) is drawn per anchor-positive pair (resp. per prototype);
    ``"all"`` averages over every choice instead.
    """
    u = nc.as_var(old_protos)
    if u.value.ndim != 2 or u.shape[0] == 0:
        raise ProtocolError("no old prototypes; translation only applies from the second task on")
    m, mt = nc.as_var(m_batch), nc.as_var(m_tilde_batch)
    n, k = m.shape[0], u.shape[0]
    if mt.shape != m.shape or u.shape[1] != m.shape[1]:
        raise DimensionError("feature and prototype dimensions disagree")
    randomize = cfg.proto_negatives == "random"
    if randomize and rng is None:
        raise ConfigError("random prototype negatives need an rng")
    a, p = _same_class_pairs(labels)
    margin = cfg.margin
    total = nc.Var(np.asarray(0.0, dtype=m.value.dtype), op="const")

    def anchor_term(feats):
        if len(a) == 0:
            return None
        d_ff = nc.pairwise_sqdist(feats, feats)
        d_fu = nc.pairwise_sqdist(feats, u)
        if randomize:
            neg = rng.integers(k, size=len(a))
            aa, pp = a, p
        else:
            aa, pp, neg = np.repeat(a, k), np.repeat(p, k), np.tile(np.arange(k), len(a))
        return nc.mean(nc.hinge(nc.take2d(d_ff, aa, pp) - nc.take2d(d_fu, aa, neg) + margin))

    if cfg.gamma_tri > 0:
        term = anchor_term(m)
        if term is not None:
            total = total + nc.scale(term, cfg.gamma_tri)
    if cfg.beta > 0:
        term = anchor_term(mt)
        if term is not None:
            total = total + nc.scale(term, cfg.beta)
    if cfg.delta > 0:
        d_fu = nc.pairwise_sqdist(m, u)
        if randomize:
            rows, cols = rng.integers(n, size=k), np.arange(k)
        else:
            rows, cols = np.tile(np.arange(n), k), np.repeat(np.arange(k), n)
        term = nc.mean(nc.hinge(margin - nc.take2d(d_fu, rows, cols)))
        total = total + nc.scale(term, cfg.delta)
    return total


def transition_loss(params, pair, z_old, z_cur, labels, protos, cfg, rng):
    g_old, g_cur = pair.split(params)
    loss = nc.Var(np.asarray(0.0, dtype=np.asarray(z_cur).dtype), op="const")
    if cfg.align_weight > 0:
        loss = loss + nc.scale(align_loss(z_old, z_cur, pair, params), cfg.align_weight)
    if cfg.gamma_tri > 0 or cfg.beta > 0 or cfg.delta > 0:
        m = translate_graph(g_cur, z_cur, pair.arch, pair.activation)
        mt = translate_graph(g_old, z_old, pair.arch, pair.activation)
        u = translate_graph(g_old, protos, pair.arch, pair.activation)
        loss = loss + unified_triplet_loss(m, mt, labels, u, cfg, rng)
    return loss


def stored_prototypes_for(memory, prev_pair=None, cfg=None):
    """Old prototypes in the coordinates ``g_old`` is trained on.

    In ``identify`` mode the stored vectors are used directly.  In ``invert``
    mode the previous transition's ``g_cur`` is undone first, returning them
    to the raw previous-network space.
    """
    ids, vecs = memory.as_arrays()
    if cfg is not None and cfg.chain == "invert" and prev_pair is not None and len(ids):
        vecs = invert_translation(prev_pair.g_cur, vecs, prev_pair.arch, prev_pair.activation)
    return ids, vecs


def train_transition(prev_model, cur_model, task, memory, cfg, rng, prev_pair=None, dtype=None):
    """Fit ``(g_old, g_cur)`` on current-task data; both embedding models stay frozen."""
    if len(memory) == 0:
        raise ProtocolError("no transition exists before the second task (prototype memory is empty)")
    if prev_model.embed_dim != cur_model.embed_dim:
        raise DimensionError("previous and current embeddings differ in dimension")
    z_old = embed(prev_model, task.x_train)
    z_cur = embed(cur_model, task.x_train)
    _, protos = stored_prototypes_for(memory, prev_pair, cfg)
    dtype = dtype or z_cur.dtype
    pair = init_pair(cur_model.embed_dim, cfg.hidden, rng, cfg.activation, dtype=dtype)
    params = pair.as_params()
    state = nc.AdamState.zeros_like(params)
    labels = task.y_train
    for _ in range(cfg.epochs):
        for idx in minibatches(len(labels), cfg.batch_size, rng):
            rec = nc.grad(
                lambda p, idx=idx: transition_loss(p, pair, z_old[idx], z_cur[idx], labels[idx], protos, cfg, rng),
                params,
            )
            params = nc.adam_step(params, rec, state, cfg.lr)
    return pair.with_params(params)


def update_memory(memory, pair, new_protos, origin_task, prev_pair=None, cfg=None):
    """Re-map stored prototypes with ``g_old`` and insert new ones through ``g_cur``.

    The complete new table is built first and swapped in with one assignment.
    """
    entries = memory.snapshot()
    for c, _ in new_protos:
        if c in entries:
            raise ProtocolError(f"class {c} is already in prototype memory")
    ids, vecs = stored_prototypes_for(memory, prev_pair, cfg)
    if len(ids):
        mapped = pair.map_old(vecs)
        for c, vec in zip(ids.tolist(), mapped):
            entries[c] = (vec, entries[c][1])
    log = list(memory.insertion_log)
    if new_protos:
        mapped_new = pair.map_cur(np.stack([v for _, v in new_protos]))
        for (c, _), vec in zip(new_protos, mapped_new):
            entries[c] = (vec, origin_task)
            log.append(c)
    memory.swap(entries, log)
    return memory
