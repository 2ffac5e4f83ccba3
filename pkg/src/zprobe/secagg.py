"""Three-round masked secure aggregation with dropout recovery and ZK hooks.

Clients and the server are explicit state machines driven by
:func:`run_aggregation`. All messages pass through an in-process log with a
fixed byte layout so a run can be persisted and replayed.
"""

from __future__ import annotations

import enum
import math
import random
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from zprobe.field import P, FixedVec, vec_add, vec_sub
from zprobe.primitives import (
    PRG_MULS,
    KeyPair,
    ShamirShare,
    default_threshold,
    derive_seed,
    key_agree,
    prg_vector,
    random_field,
    shamir_reconstruct,
    shamir_share,
)
from zprobe.robust import sample_indices
from zprobe.zk import ProofVerdict, ZKSession, correctness_circuit, correctness_cost

SERVER = 0


class ProtocolError(RuntimeError):
    pass


class ProtocolAbort(ProtocolError):
    """Not enough shares survived to unmask; ``client`` names the culprit."""

    def __init__(self, client: int, message: str):
        super().__init__(message)
        self.client = client


class PrivacyViolation(AssertionError):
    """The server asked for both seed shares and key shares of one client."""


# -- neighbor graph -----------------------------------------------------------

@dataclass(frozen=True)
class NeighborGraph:
    adjacency: dict[int, tuple[int, ...]]
    mode: str

    @property
    def nodes(self) -> list[int]:
        return sorted(self.adjacency)

    @property
    def n(self) -> int:
        return len(self.adjacency)

    @property
    def k(self) -> int:
        return max((len(v) for v in self.adjacency.values()), default=0)

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self.adjacency[i]

    def relabel(self, ids: Sequence[int]) -> NeighborGraph:
        """Map node ``m`` (1-based) to ``ids[m-1]``."""
        ids = list(ids)
        if len(ids) != self.n:
            raise ValueError("relabel needs one id per node")
        name = {m: ids[m - 1] for m in self.nodes}
        adj = {name[m]: tuple(sorted(name[x] for x in nb)) for m, nb in self.adjacency.items()}
        return NeighborGraph(adj, self.mode)

    def is_connected(self) -> bool:
        nodes = self.nodes
        if not nodes:
            return True
        seen, todo = {nodes[0]}, deque([nodes[0]])
        while todo:
            for j in self.adjacency[todo.popleft()]:
                if j not in seen:
                    seen.add(j)
                    todo.append(j)
        return len(seen) == len(nodes)


def default_degree(n: int) -> int:
    """``2 * ceil(log2 n)``, or ``n - 1`` once that covers everyone."""
    k = 2 * math.ceil(math.log2(max(n, 2)))
    return n - 1 if k >= n - 1 else k


def build_neighbor_graph(n: int, k: int | None = None, seed: int = 0, mode: str = "neighbor",
                         max_tries: int = 100) -> NeighborGraph:
    """Complete graph, or a random connected k-regular graph on nodes ``1..n``.

    Neighbor mode relabels the nodes by a random permutation and joins each
    node to the ones ``d`` steps ahead and behind for ``k/2`` distinct random
    offsets ``d < n/2``. Each offset contributes an edge-disjoint 2-factor
    (a Hamiltonian cycle when ``gcd(d, n) = 1``); draws are retried until the
    union is connected.
    """
    if n < 2:
        raise ValueError("need at least two clients")
    if mode == "full" or k == n - 1:
        nodes = range(1, n + 1)
        return NeighborGraph({i: tuple(j for j in nodes if j != i) for i in nodes}, "full")
    if mode != "neighbor":
        raise ValueError(f"unknown graph mode {mode!r}")
    if k is None:
        k = default_degree(n)
        if k == n - 1:
            return build_neighbor_graph(n, k, seed, "full")
    if k < 1 or k >= n or (k * n) % 2 or k % 2:
        raise ValueError(f"no {k}-regular neighbor graph on {n} nodes (k must be even and < n)")
    rng = np.random.default_rng(seed)
    offsets_pool = np.arange(1, (n - 1) // 2 + 1)
    for _ in range(max_tries):
        perm = rng.permutation(n) + 1
        offsets = rng.choice(offsets_pool, size=k // 2, replace=False)
        adj: dict[int, set[int]] = {i: set() for i in range(1, n + 1)}
        for d in offsets:
            for pos in range(n):
                a, b = int(perm[pos]), int(perm[(pos + d) % n])
                adj[a].add(b)
                adj[b].add(a)
        graph = NeighborGraph({i: tuple(sorted(v)) for i, v in adj.items()}, "neighbor")
        if graph.is_connected():
            return graph
    raise ValueError(f"could not draw a connected {k}-regular graph on {n} nodes")


# -- messages -----------------------------------------------------------------

class MsgKind(enum.IntEnum):
    PUBKEY = 1
    NEIGHBOR_KEYS = 2
    SHARES = 3
    AUTH = 4
    MASKED = 5
    SAMPLE = 6
    PROOF = 7
    VERDICT = 8
    SHARE_REQUEST = 9
    SHARE_RESPONSE = 10
    AGGREGATE = 11
    BOUNDS = 12
    ROBUST_SAMPLE = 13
    ROBUST_PROOF = 14
    ROBUST_VERDICT = 15


class ShareKind(enum.IntEnum):
    SEED = 1  # b_i, for surviving clients
    KEY = 2   # sk_i, for dropped clients


_HEADER = struct.Struct("<BIII")


@dataclass(frozen=True)
class Message:
    kind: MsgKind
    sender: int
    receiver: int
    payload: tuple[int, ...] = ()

    def to_bytes(self) -> bytes:
        body = struct.pack(f"<{len(self.payload)}Q", *self.payload)
        return _HEADER.pack(int(self.kind), self.sender, self.receiver, len(body)) + body

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple[Message, int]:
        if len(buf) - offset < _HEADER.size:
            raise ValueError(f"truncated message header at byte {offset}")
        kind, sender, receiver, length = _HEADER.unpack_from(buf, offset)
        offset += _HEADER.size
        if length % 8 or len(buf) - offset < length:
            raise ValueError(f"truncated message payload at byte {offset}")
        payload = struct.unpack_from(f"<{length // 8}Q", buf, offset)
        return cls(MsgKind(kind), sender, receiver, tuple(payload)), offset + length


def split_pk(pk: int) -> tuple[int, int]:
    return pk & ((1 << 64) - 1), pk >> 64


def join_pk(lo: int, hi: int) -> int:
    return lo | (hi << 64)


# -- client ---------------------------------------------------------------------

class Stage(enum.IntEnum):
    R1 = 1
    R2 = 2
    R3 = 3
    DONE = 4


class DropStage(str, enum.Enum):
    AFTER_R1 = "after_r1"
    AFTER_R2 = "after_r2"
    AFTER_PROOF = "after_proof"


class Client:
    """Honest client. Adversaries subclass and override one hook."""

    kind = "honest"

    def __init__(self, cid: int, update: FixedVec, neighbors: Sequence[int], seed: int):
        self.id = cid
        self.update = update
        self.neighbors = tuple(neighbors)
        self.rng = random.Random(seed)
        self.keypair = KeyPair.generate(self.rng)
        self.b = random_field(self.rng)
        self.stage = Stage.R1
        self.pair_seeds: dict[int, int] = {}
        self.received: dict[int, tuple[int, int]] = {}
        self.masked: FixedVec | None = None
        self.mul_count = 0

    # -- hooks -----------------------------------------------------------------
    def mask_seed(self) -> int:
        """Seed used to expand the individual mask."""
        return self.b

    def compute_masked(self) -> FixedVec:
        l = len(self.update)
        v = vec_add(self.update.coords, prg_vector(self.mask_seed(), l))
        for j, a in self.pair_seeds.items():
            m = prg_vector(a, l)
            v = vec_sub(v, m) if j < self.id else vec_add(v, m)
        self.mul_count += PRG_MULS * l * (len(self.pair_seeds) + 1)
        return FixedVec(v, self.update.scale_bits)

    def present_update(self, wires: Mapping[int, Any]) -> Mapping[int, Any]:
        """Authenticated update wires handed to the robustness proof."""
        return wires

    # -- rounds ------------------------------------------------------------------
    def _require(self, stage: Stage) -> None:
        if self.stage != stage:
            raise ProtocolError(f"client {self.id} in {self.stage.name}, expected {stage.name}")

    def round1_mask_gen(self, neighbor_pks: Mapping[int, int], t: int) -> list[Message]:
        self._require(Stage.R1)
        missing = [j for j in self.neighbors if j not in neighbor_pks]
        if missing:
            raise ProtocolError(f"client {self.id} missing public keys of {missing}")
        for j in self.neighbors:
            self.pair_seeds[j] = key_agree(self.keypair.sk, neighbor_pks[j])
        sk_shares = shamir_share(self.keypair.sk, t, self.neighbors, self.rng)
        b_shares = shamir_share(self.b, t, self.neighbors, self.rng)
        self.mul_count += 2 * len(self.neighbors) * (t - 1)
        self.stage = Stage.R2
        return [Message(MsgKind.SHARES, self.id, s.index, (s.value, bs.value))
                for s, bs in zip(sk_shares, b_shares)]

    def receive_shares(self, sender: int, sk_share: int, b_share: int) -> None:
        self.received[sender] = (sk_share, b_share)

    def round2_mask_update(self, session: ZKSession | None = None,
                           commit_indices: Iterable[int] | None = None) -> list[Message]:
        """Mask the update; authenticate it into ``session`` unless already done."""
        self._require(Stage.R2)
        out = []
        if session is not None and not session.has("u"):
            idx = range(len(self.update)) if commit_indices is None else commit_indices
            session.commit("u", {k: self.update[k] for k in idx})
            out.append(Message(MsgKind.AUTH, self.id, SERVER, tuple(session.flush_transcript())))
        self.masked = self.compute_masked()
        self.stage = Stage.R3
        out.append(Message(MsgKind.MASKED, self.id, SERVER, tuple(self.masked.tolist())))
        return out

    def prove_correctness(self, session: ZKSession, indices: Sequence[int]) -> ProofVerdict:
        seed_b = session.authenticate(self.b)
        pair = {j: session.authenticate(a) for j, a in self.pair_seeds.items()}
        self.mul_count += correctness_cost(len(indices), len(pair))
        return correctness_circuit(session, self.id, seed_b, pair, session.committed("u"),
                                   self.masked.coords, indices)

    def share_for(self, target: int, kind: ShareKind) -> int:
        sk_share, b_share = self.received[target]
        return b_share if kind == ShareKind.SEED else sk_share


def honest_factory(cid: int, update: FixedVec, neighbors: Sequence[int], seed: int) -> Client:
    return Client(cid, update, neighbors, seed)


# -- server -------------------------------------------------------------------

class Server:
    def __init__(self, graph: NeighborGraph, t: int, length: int, scale_bits: int):
        self.graph = graph
        self.t = t
        self.length = length
        self.scale_bits = scale_bits
        self.pks: dict[int, int] = {}
        self.masked: dict[int, FixedVec] = {}
        self.verdicts: dict[int, ProofVerdict] = {}
        self.ledger: dict[int, ShareKind] = {}
        self.survivors: list[int] = []
        self.dropped: list[int] = []

    def request(self, target: int, kind: ShareKind) -> None:
        prior = self.ledger.get(target)
        if prior is not None and prior != kind:
            raise PrivacyViolation(f"both share kinds requested for client {target}")
        self.ledger[target] = kind

    def partition(self, participants: Iterable[int], responsive: set[int]) -> None:
        ok = {i for i in self.masked if i in responsive
              and (i not in self.verdicts or self.verdicts[i].passed)}
        self.survivors = sorted(ok)
        self.dropped = sorted(set(participants) - ok)

    def round3_unmask(self, shares: Mapping[int, list[ShamirShare]]) -> FixedVec:
        """Remove individual masks of survivors and dangling pairwise masks of dropped clients."""
        agg = np.zeros(self.length, dtype=np.uint64)
        for i in self.survivors:
            agg = vec_add(agg, self.masked[i].coords)
        surviving = set(self.survivors)
        for i in self.survivors:
            b = self._reconstruct(i, shares)
            agg = vec_sub(agg, prg_vector(b, self.length))
        for i in self.dropped:
            live = [j for j in self.graph.neighbors(i) if j in surviving]
            if not live:
                continue
            sk = self._reconstruct(i, shares)
            for j in live:
                m = prg_vector(key_agree(sk, self.pks[j]), self.length)
                agg = vec_add(agg, m) if i < j else vec_sub(agg, m)
        return FixedVec(agg, self.scale_bits)

    def _reconstruct(self, target: int, shares: Mapping[int, list[ShamirShare]]) -> int:
        got = shares.get(target, [])
        if len(got) < self.t:
            raise ProtocolAbort(target, f"client {target}: {len(got)} shares, threshold {self.t}")
        return shamir_reconstruct(got, self.t)


# -- transcript ---------------------------------------------------------------

@dataclass
class RoundTranscript:
    messages: list[Message] = field(default_factory=list)
    aggregate: FixedVec | None = None
    verdicts: dict[int, ProofVerdict] = field(default_factory=dict)
    survivors: list[int] = field(default_factory=list)
    dropped: list[int] = field(default_factory=list)
    inputs: dict = field(default_factory=dict)
    mul_counts: dict[int, int] = field(default_factory=dict)
    ledger: dict[int, ShareKind] = field(default_factory=dict)

    def log(self, msg: Message) -> Message:
        self.messages.append(msg)
        return msg

    def to_bytes(self) -> bytes:
        return b"".join(m.to_bytes() for m in self.messages)


def audit_share_requests(messages: Iterable[Message]) -> list[int]:
    """Clients for which both share kinds were requested (should be empty).

    Each aggregation instance ends with its AGGREGATE message and uses fresh
    keys, so the rule is checked per instance.
    """
    bad: set[int] = set()
    kinds: dict[int, set[int]] = {}
    for m in messages:
        if m.kind == MsgKind.SHARE_REQUEST:
            kinds.setdefault(m.payload[0], set()).add(m.payload[1])
        elif m.kind == MsgKind.AGGREGATE:
            bad.update(c for c, ks in kinds.items() if len(ks) > 1)
            kinds = {}
    bad.update(c for c, ks in kinds.items() if len(ks) > 1)
    return sorted(bad)


ClientFactory = Callable[[int, FixedVec, Sequence[int], int], Client]


def run_aggregation(updates: Mapping[int, FixedVec], *, seed: int,
                    graph: NeighborGraph | None = None, mode: str = "neighbor",
                    degree: int | None = None, threshold: int | None = None, q: int = 0,
                    sessions: Mapping[int, ZKSession] | None = None,
                    factories: Mapping[int, ClientFactory] | None = None,
                    dropouts: Mapping[int, DropStage] | None = None,
                    commit_indices: Callable[[int], Iterable[int]] | None = None,
                    transcript: RoundTranscript | None = None) -> RoundTranscript:
    """Run rounds 1-3 (with sampled correctness proofs when ``q > 0``).

    ``updates`` maps client id to its encoded update. Clients whose proof
    fails are treated as dropped. Raises :class:`ProtocolAbort` when some
    needed secret has fewer than ``t`` surviving shares.
    """
    ids = sorted(updates)
    if not ids:
        raise ProtocolError("no participants")
    first = updates[ids[0]]
    length, scale_bits = len(first), first.scale_bits
    if len(ids) == 1:
        graph = NeighborGraph({ids[0]: ()}, "full")
    elif graph is None:
        graph = build_neighbor_graph(len(ids), degree, derive_seed(seed, 1), mode).relabel(ids)
    if sorted(graph.nodes) != ids:
        raise ProtocolError("graph nodes do not match participants")
    k = graph.k
    t = threshold if threshold is not None else default_threshold(k)
    if k and not 1 <= t <= k:
        raise ProtocolError(f"threshold {t} invalid for degree {k}")
    dropouts = dict(dropouts or {})
    factories = factories or {}
    owned_sessions = sessions is None
    sessions = dict(sessions or {})
    tr = transcript if transcript is not None else RoundTranscript()
    log = tr.log

    clients = {i: factories.get(i, honest_factory)(i, updates[i], graph.neighbors(i),
                                                   derive_seed(seed, 2, i)) for i in ids}
    server = Server(graph, t, length, scale_bits)
    for i in ids:
        if i not in sessions and (q > 0 or owned_sessions):
            sessions[i] = ZKSession(derive_seed(seed, 3, i))

    # round 0: key advertisement
    for i, c in clients.items():
        pk = c.keypair.pk
        log(Message(MsgKind.PUBKEY, i, SERVER, split_pk(pk)))
        server.pks[i] = pk
    for i, c in clients.items():
        words = []
        for j in c.neighbors:
            words.extend((j, *split_pk(server.pks[j])))
        log(Message(MsgKind.NEIGHBOR_KEYS, SERVER, i, tuple(words)))

    # round 1: pairwise seeds and shares
    for i, c in clients.items():
        pks = {j: server.pks[j] for j in c.neighbors}
        for msg in c.round1_mask_gen(pks, t) if c.neighbors else []:
            log(msg)
            clients[msg.receiver].receive_shares(i, *msg.payload)
        if not c.neighbors:
            c.stage = Stage.R2
    active = [i for i in ids if dropouts.get(i) != DropStage.AFTER_R1]

    # round 2: masked updates, authenticated inputs
    for i in active:
        c, sess = clients[i], sessions.get(i)
        if sess is not None and not sess.has("u"):
            n_commit = length if commit_indices is None else len(list(commit_indices(i)))
            sess.preprocess(randoms=n_commit)
        idx = None if commit_indices is None else list(commit_indices(i))
        for msg in c.round2_mask_update(sess, idx):
            log(msg)
        server.masked[i] = c.masked
    active = [i for i in active if dropouts.get(i) != DropStage.AFTER_R2]

    # correctness proofs on server-sampled coordinates
    if q > 0:
        q_eff = min(q, length)
        for i in active:
            c, sess = clients[i], sessions[i]
            idx = sample_indices(length, q_eff, derive_seed(seed, 4), i)
            log(Message(MsgKind.SAMPLE, SERVER, i, tuple(idx)))
            gates = correctness_cost(q_eff, len(c.neighbors))
            sess.preprocess(randoms=1 + len(c.neighbors) + gates, triples=gates)
            verdict = c.prove_correctness(sess, idx)
            log(Message(MsgKind.PROOF, i, SERVER, tuple(sess.flush_transcript())))
            log(Message(MsgKind.VERDICT, SERVER, i, (int(verdict.passed),)))
            server.verdicts[i] = verdict
    responsive = {i for i in active if dropouts.get(i) != DropStage.AFTER_PROOF}
    server.partition(ids, responsive)

    # round 3: collect shares and unmask
    surviving = set(server.survivors)
    shares: dict[int, list[ShamirShare]] = {}
    wanted = [(i, ShareKind.SEED) for i in server.survivors]
    wanted += [(i, ShareKind.KEY) for i in server.dropped
               if any(j in surviving for j in graph.neighbors(i))]
    # clients rejected by a proof are still online and answer share requests
    for target, kind in wanted:
        server.request(target, kind)
        for j in graph.neighbors(target):
            if j not in responsive:
                continue
            log(Message(MsgKind.SHARE_REQUEST, SERVER, j, (target, int(kind))))
            value = clients[j].share_for(target, kind)
            log(Message(MsgKind.SHARE_RESPONSE, j, SERVER, (target, int(kind), value)))
            shares.setdefault(target, []).append(ShamirShare(j, value))
    if len(ids) == 1 and server.survivors:
        # a lone client has no share holders; its seed is its own to reveal
        only = server.survivors[0]
        shares[only] = [ShamirShare(1, clients[only].b)]
        server.t = 1
    aggregate = server.round3_unmask(shares)
    for c in clients.values():
        c.stage = Stage.DONE
    log(Message(MsgKind.AGGREGATE, SERVER, SERVER, tuple(aggregate.tolist())))

    tr.aggregate = aggregate
    tr.verdicts = dict(server.verdicts)
    tr.survivors = list(server.survivors)
    tr.dropped = list(server.dropped)
    tr.mul_counts = {i: c.mul_count for i, c in clients.items()}
    tr.inputs = {
        "seed": seed, "mode": graph.mode, "degree": degree, "threshold": t, "q": q,
        "ids": ids, "dropouts": {str(i): s.value for i, s in dropouts.items()},
    }
    tr.ledger = dict(server.ledger)
    return tr
