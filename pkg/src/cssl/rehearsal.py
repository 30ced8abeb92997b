"""Rehearsal buffer selection by clustering first-domain embeddings.

Pipeline: cluster D1 embeddings into K groups, locate the D2 centre with a
two-way clustering of D1 + D2, rank the K clusters by distance to that
centre, cut the ranking into three contiguous groups (nearest first) and
fill T buffer slots from the groups in gamma proportions, taking the samples
nearest to their own cluster centre first.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidArgument

log = logging.getLogger(__name__)

_CHUNK_ELEMS = 1 << 22


@dataclass
class Clustering:
    K: int
    assignments: np.ndarray
    centers: np.ndarray
    inertia: float
    n_iter: int = 0
    inertia_history: list = field(default_factory=list, repr=False)

    def members(self, k):
        return np.flatnonzero(self.assignments == k)


@dataclass
class GroupPartition:
    ordering: np.ndarray  # cluster indices, ascending distance
    groups: list  # three arrays of cluster indices, each in ascending distance
    distances: np.ndarray  # L_i indexed by cluster

    def group_of(self, cluster):
        for g, members in enumerate(self.groups):
            if cluster in members:
                return g
        raise KeyError(cluster)


@dataclass
class BufferEntry:
    sample_id: int
    cluster: int
    group: int  # 1..3, or 0 for uniformly sampled buffers
    distance_to_center: float | None
    cluster_distance: float | None


@dataclass
class RehearsalBuffer:
    entries: list
    header: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    @property
    def sample_ids(self):
        return [e.sample_id for e in self.entries]

    @property
    def T(self):
        return len(self.entries)

    def group_counts(self):
        counts = [0, 0, 0]
        for e in self.entries:
            if e.group:
                counts[e.group - 1] += 1
        return tuple(counts)


# ---------------------------------------------------------------------------
# k-means


def _sq_dists(X, C):
    """Exact pairwise squared distances, chunked over rows."""
    N, d = X.shape
    out = np.empty((N, len(C)))
    step = max(1, _CHUNK_ELEMS // max(1, len(C) * d))
    for s in range(0, N, step):
        diff = X[s:s + step, None, :] - C[None, :, :]
        out[s:s + step] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _plus_plus_init(X, K, rng):
    N = len(X)
    chosen = [int(rng.integers(N))]
    d2 = _sq_dists(X, X[chosen[-1]][None])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(N, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(N), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(X, X[nxt][None])[:, 0])
    return X[chosen].copy()


def kmeans(embeddings, K, seed=0, max_iter=300, tol=1e-6):
    """Lloyd's algorithm from k-means++ seeding.

    Stops when no centre moves by ``tol`` or more, or after ``max_iter``
    iterations. An empty cluster is re-seeded at the point farthest from its
    current centre. ``inertia_history`` holds the inertia after every
    assignment step and never increases.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidArgument("embeddings must be an N x d matrix")
    N = len(X)
    if not 1 <= K <= N:
        raise InvalidArgument(f"need 1 <= K <= N, got K={K}, N={N}")
    if not np.isfinite(X).all():
        raise InvalidArgument("embeddings contain non-finite values")

    rng = np.random.default_rng(seed)
    centers = _plus_plus_init(X, K, rng)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _sq_dists(X, centers)
        labels = d2.argmin(axis=1)
        own = d2[np.arange(N), labels]
        history.append(float(own.sum()))

        new = centers.copy()
        taken = set()
        for k in range(K):
            idx = labels == k
            if idx.any():
                new[k] = X[idx].mean(axis=0)
        for k in range(K):
            if not (labels == k).any():
                for far in np.argsort(-own, kind="stable"):
                    if int(far) not in taken:
                        break
                taken.add(int(far))
                new[k] = X[far]
                own[far] = 0.0
                log.debug("re-seeded empty cluster %d at point %d", k, far)
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break

    d2 = _sq_dists(X, centers)
    labels = d2.argmin(axis=1)
    diff = X - centers[labels]
    inertia = float(np.einsum("nd,nd->", diff, diff))
    history.append(inertia)
    return Clustering(K, labels, centers, inertia, n_iter, history)


# ---------------------------------------------------------------------------
# distances and grouping


def d2_class_center(emb_d1, emb_d2, seed=0):
    """Centre of the two-way cluster that holds the D2 majority."""
    e1 = np.asarray(emb_d1, dtype=np.float64)
    e2 = np.asarray(emb_d2, dtype=np.float64)
    if not len(e1) or not len(e2):
        raise InvalidArgument("both embedding sets must be non-empty")
    cl = kmeans(np.vstack([e1, e2]), 2, seed=seed)
    from_d2 = np.zeros(len(e1) + len(e2), dtype=bool)
    from_d2[len(e1):] = True

    def key(k):
        members = cl.assignments == k
        n2 = int((members & from_d2).sum())
        frac = n2 / members.sum() if members.any() else 0.0
        return (-n2, -frac, k)

    best = min(range(2), key=key)
    return cl.centers[best].copy()


def cluster_distances(centers, q):
    centers = np.asarray(centers, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[1] != q.shape[-1]:
        raise InvalidArgument("centers and q disagree in dimension")
    diff = centers - q
    return np.sqrt(np.einsum("kd,kd->k", diff, diff))


def group_sizes(K):
    s1 = -(-K // 3)
    s2 = -(-(K - s1) // 2)
    return s1, s2, K - s1 - s2


def partition_groups(clustering, L):
    L = np.asarray(L, dtype=np.float64)
    K = len(L)
    if K != clustering.K:
        raise InvalidArgument("distance vector length differs from cluster count")
    if K < 3:
        raise InvalidArgument(f"three groups need K >= 3, got K={K}")
    order = np.lexsort((np.arange(K), L))
    s1, s2, _ = group_sizes(K)
    groups = [order[:s1], order[s1:s1 + s2], order[s1 + s2:]]
    return GroupPartition(order, groups, L)


# ---------------------------------------------------------------------------
# selection


def apportion(total, weights):
    """Largest-remainder split of ``total`` by non-negative ``weights``.

    Ties in the fractional parts go to the lower index.
    """
    w = [Fraction(x) for x in weights]
    if any(x < 0 for x in w) or sum(w) == 0:
        raise InvalidArgument(f"weights must be non-negative and not all zero: {weights}")
    exact = [total * x / sum(w) for x in w]
    floors = [math.floor(e) for e in exact]
    left = total - sum(floors)
    order = sorted(range(len(w)), key=lambda i: (-(exact[i] - floors[i]), i))
    for i in order[:left]:
        floors[i] += 1
    return tuple(floors)


def _capped_quotas(T, gamma, capacity):
    """Apportion T over groups, re-apportioning anything a group cannot hold."""
    quotas = [0, 0, 0]
    weights = list(gamma)
    remaining = T
    while remaining:
        open_ = [g for g in range(3) if capacity[g] - quotas[g] > 0]
        w = [weights[g] if g in open_ else 0 for g in range(3)]
        if sum(w) == 0:
            # only zero-weight groups still have room; fall back to their free space
            w = [capacity[g] - quotas[g] if g in open_ else 0 for g in range(3)]
        share = apportion(remaining, w)
        remaining = 0
        for g in range(3):
            room = capacity[g] - quotas[g]
            take = min(share[g], room)
            quotas[g] += take
            remaining += share[g] - take
    plain = apportion(T, gamma)
    if tuple(quotas) != plain:
        log.warning("group capacities %s cannot hold quotas %s; redistributing to %s",
                    tuple(capacity), plain, tuple(quotas))
    return tuple(quotas)


def select_buffer(sample_ids, embeddings, clustering, partition, T, gamma):
    """Fill T slots from groups G1..G3 in gamma proportions.

    Within a group the clusters are visited round-robin in ascending distance
    order; each visit takes that cluster's next sample nearest its own centre.
    """
    ids = np.asarray(sample_ids)
    X = np.asarray(embeddings, dtype=np.float64)
    N1 = len(ids)
    if len(X) != N1 or len(clustering.assignments) != N1:
        raise InvalidArgument("sample_ids, embeddings and clustering disagree in length")
    if not 0 <= T <= N1:
        raise InvalidArgument(f"T={T} must lie in [0, N1={N1}]")
    if len(gamma) != 3 or min(gamma) < 0 or sum(gamma) <= 0:
        raise InvalidArgument(f"gamma needs three non-negative weights, not all zero: {gamma}")

    own = np.sqrt(((X - clustering.centers[clustering.assignments]) ** 2).sum(axis=1))
    queues = {}
    for k in range(clustering.K):
        members = clustering.members(k)
        queues[k] = list(members[np.lexsort((members, own[members]))])

    capacity = [sum(len(queues[k]) for k in grp) for grp in partition.groups]
    quotas = _capped_quotas(T, gamma, capacity) if T else (0, 0, 0)

    entries = []
    for g, (grp, quota) in enumerate(zip(partition.groups, quotas)):
        rotation = [int(k) for k in grp if queues[int(k)]]
        cursor = {k: 0 for k in rotation}
        taken = 0
        while taken < quota and rotation:
            still = []
            for k in rotation:
                if taken == quota:
                    still.append(k)
                    continue
                i = queues[k][cursor[k]]
                cursor[k] += 1
                entries.append(BufferEntry(int(ids[i]), k, g + 1, float(own[i]),
                                           float(partition.distances[k])))
                taken += 1
                if cursor[k] < len(queues[k]):
                    still.append(k)
            rotation = still
    return RehearsalBuffer(entries)


def random_buffer(sample_ids, T, seed=0):
    """Uniformly sampled buffer, the ablation baseline for the clustered selection."""
    ids = np.asarray(sample_ids)
    if not 0 <= T <= len(ids):
        raise InvalidArgument(f"T={T} must lie in [0, N1={len(ids)}]")
    pick = np.random.default_rng(seed).choice(len(ids), size=T, replace=False)
    return RehearsalBuffer([BufferEntry(int(ids[i]), -1, 0, None, None) for i in np.sort(pick)])


def derive_buffer_params(N1, alpha, beta):
    """K = floor(N1 * alpha) clusters and T = floor(N1 * beta) buffer slots."""
    if not (0 < alpha <= 1 and 0 < beta <= 1):
        raise InvalidArgument(f"alpha and beta must lie in (0, 1], got {alpha}, {beta}")
    K = math.floor(N1 * alpha + 1e-9)
    T = math.floor(N1 * beta + 1e-9)
    if K < 3:
        raise InvalidArgument(f"N1={N1}, alpha={alpha} gives K={K} < 3 clusters")
    if T < 1:
        raise InvalidArgument(f"N1={N1}, beta={beta} gives an empty buffer")
    return K, T


# ---------------------------------------------------------------------------
# orchestration


@torch.no_grad()
def embed_dataset(model, ds, batch_size=256):
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for s in range(0, len(ds), batch_size):
        out.append(model.embed_image(ds.batch(range(s, min(s + batch_size, len(ds))), dtype).data))
    if not out:
        return np.zeros((0, model.cfg.d_enc))
    return torch.cat(out).double().numpy()


def build_buffer(model, d1, d2, alpha, beta, gamma, seed=0, strategy="kmeans"):
    """Select the rehearsal buffer from ``d1`` using M1 embeddings of both domains."""
    K, T = derive_buffer_params(len(d1), alpha, beta)
    header = {"K": K, "T": T, "gamma": list(gamma), "alpha": alpha, "beta": beta,
              "seed": seed, "strategy": strategy, "N1": len(d1), "N2": len(d2)}
    if strategy == "random":
        buf = random_buffer(d1.sample_ids, T, seed)
        buf.header = header
        return buf
    if strategy != "kmeans":
        raise InvalidArgument(f"unknown buffer strategy {strategy!r}")
    e1 = embed_dataset(model, d1)
    e2 = embed_dataset(model, d2)
    clustering = kmeans(e1, K, seed=seed)
    q = d2_class_center(e1, e2, seed=seed)
    L = cluster_distances(clustering.centers, q)
    part = partition_groups(clustering, L)
    buf = select_buffer(d1.sample_ids, e1, clustering, part, T, gamma)
    buf.header = header
    log.info("buffer: K=%d T=%d group counts %s", K, T, buf.group_counts())
    return buf


def write_buffer_manifest(buf, path):
    """Header line ``{"header": {...}}`` followed by one JSON record per entry."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps({"header": buf.header}) + "\n")
        for e in buf.entries:
            fh.write(json.dumps(asdict(e)) + "\n")
    return path


def read_buffer_manifest(path):
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or "header" not in lines[0]:
        raise InvalidArgument(f"{path} has no buffer header line")
    return RehearsalBuffer([BufferEntry(**rec) for rec in lines[1:]], lines[0]["header"])
