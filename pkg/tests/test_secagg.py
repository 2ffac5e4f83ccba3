import random

import numpy as np
import pytest

from zprobe.attacks import WrongMaskedCompute
from zprobe.field import FixedVec, P, vec_sum
from zprobe.primitives import ShamirShare, prg_vector, shamir_reconstruct
from zprobe.secagg import (
    Client, DropStage, Message, MsgKind, NeighborGraph, PrivacyViolation, ProtocolAbort,
    ProtocolError, Server, ShareKind, audit_share_requests, build_neighbor_graph, default_degree,
    run_aggregation,
)


def updates(n, length=6, seed=0):
    rng = np.random.default_rng(seed)
    return {i: FixedVec.from_real(rng.normal(size=length)) for i in range(1, n + 1)}


def plain_sum(ups, ids=None):
    ids = sorted(ups) if ids is None else ids
    return vec_sum([ups[i].coords for i in ids], len(ups[ids[0]]))


def test_full_graph_small():
    g = build_neighbor_graph(4, mode="full")
    assert all(len(g.neighbors(i)) == 3 for i in g.nodes)


def test_regular_connected_graph():
    g = build_neighbor_graph(50, 8, seed=1)
    assert {len(g.neighbors(i)) for i in g.nodes} == {8}
    assert g.is_connected()
    for i in g.nodes:
        assert i not in g.neighbors(i)
        assert all(i in g.neighbors(j) for j in g.neighbors(i))
    assert build_neighbor_graph(50, 8, seed=1).adjacency == g.adjacency


@pytest.mark.parametrize("n, k", [(8, 3), (10, 10), (5, 0)])
def test_graph_rejects_bad_degree(n, k):
    with pytest.raises(ValueError):
        build_neighbor_graph(n, k, mode="neighbor")


@pytest.mark.parametrize("n, k", [(2, 1), (8, 6), (64, 12), (256, 16)])
def test_default_degree(n, k):
    assert default_degree(n) == k


def test_pair_seed_symmetry_two_clients():
    ups = updates(2)
    c1, c2 = Client(1, ups[1], (2,), 1), Client(2, ups[2], (1,), 2)
    c1.round1_mask_gen({2: c2.keypair.pk}, 1)
    c2.round1_mask_gen({1: c1.keypair.pk}, 1)
    assert c1.pair_seeds[2] == c2.pair_seeds[1]


def test_round1_emits_one_share_pair_per_neighbor():
    ups = updates(9)
    peers = {j: Client(j, ups[j], (), j) for j in range(2, 10)}
    c = Client(1, ups[1], tuple(range(2, 10)), 1)
    msgs = c.round1_mask_gen({j: p.keypair.pk for j, p in peers.items()}, 6)
    assert len(msgs) == 8 and {m.receiver for m in msgs} == set(range(2, 10))
    b_shares = [ShamirShare(m.receiver, m.payload[1]) for m in msgs]
    assert shamir_reconstruct(random.Random(0).sample(b_shares, 6), 6) == c.b


def test_pairwise_masks_cancel_with_zero_updates():
    zero = FixedVec.zeros(1)
    c1, c2 = Client(1, zero, (2,), 11), Client(2, zero, (1,), 12)
    c1.round1_mask_gen({2: c2.keypair.pk}, 1)
    c2.round1_mask_gen({1: c1.keypair.pk}, 1)
    c1.round2_mask_update()
    c2.round2_mask_update()
    total = (c1.masked.coords.astype(object) + c2.masked.coords.astype(object)
             - prg_vector(c1.b, 1).astype(object) - prg_vector(c2.b, 1).astype(object)) % P
    assert total.tolist() == [0]


def test_single_client_masked_is_update_plus_mask():
    u = updates(1)[1]
    c = Client(1, u, (), 3)
    c.stage = c.stage.R2
    c.round2_mask_update()
    expect = (u.coords.astype(object) + prg_vector(c.b, len(u)).astype(object)) % P
    assert c.masked.coords.tolist() == expect.tolist()


@pytest.mark.parametrize("n, mode", [(2, "full"), (3, "full"), (5, "neighbor"), (20, "neighbor"),
                                     (33, "neighbor")])
def test_aggregate_equals_field_sum(n, mode):
    ups = updates(n, seed=n)
    tr = run_aggregation(ups, seed=n, mode=mode, q=2)
    assert all(v.passed for v in tr.verdicts.values())
    assert tr.aggregate.coords.tolist() == plain_sum(ups).tolist()


def test_single_participant():
    ups = updates(1)
    tr = run_aggregation(ups, seed=1, q=1)
    assert tr.aggregate == ups[1]


@pytest.mark.parametrize("stage", list(DropStage))
def test_dropout_leaves_survivor_sum(stage):
    ups = updates(5, seed=9)
    tr = run_aggregation(ups, seed=4, mode="full", q=2, dropouts={3: stage})
    assert tr.dropped == [3]
    assert tr.aggregate.coords.tolist() == plain_sum(ups, [1, 2, 4, 5]).tolist()
    assert audit_share_requests(tr.messages) == []


def test_dropout_monotonicity():
    ups = updates(12, seed=2)
    one = run_aggregation(ups, seed=8, q=1, dropouts={4: DropStage.AFTER_R2})
    two = run_aggregation(ups, seed=8, q=1, dropouts={4: DropStage.AFTER_R2, 9: DropStage.AFTER_R2})
    diff = (one.aggregate - two.aggregate).coords
    assert diff.tolist() == ups[9].coords.tolist()


def test_too_many_dropouts_abort():
    ups = updates(8)
    drops = {i: DropStage.AFTER_R2 for i in (1, 2, 3)}
    with pytest.raises(ProtocolAbort):
        run_aggregation(ups, seed=1, mode="full", dropouts=drops)


def test_failed_proof_client_is_excluded():
    ups = updates(6, seed=5)

    def cheat(cid, update, neighbors, seed):
        return WrongMaskedCompute(cid, update, neighbors, seed, s_m=1.0, attack_seed=7)

    tr = run_aggregation(ups, seed=3, mode="full", q=2, factories={4: cheat})
    assert not tr.verdicts[4].passed
    assert 4 in tr.dropped and 4 not in tr.survivors
    assert tr.aggregate.coords.tolist() == plain_sum(ups, [1, 2, 3, 5, 6]).tolist()


def test_transcript_is_deterministic():
    ups = updates(10, seed=1)
    a = run_aggregation(ups, seed=5, q=2, dropouts={2: DropStage.AFTER_R1})
    b = run_aggregation(ups, seed=5, q=2, dropouts={2: DropStage.AFTER_R1})
    assert a.to_bytes() == b.to_bytes()


def test_server_refuses_both_share_kinds():
    g = NeighborGraph({1: (2,), 2: (1,)}, "full")
    s = Server(g, 1, 1, 16)
    s.request(1, ShareKind.SEED)
    s.request(1, ShareKind.SEED)
    with pytest.raises(PrivacyViolation):
        s.request(1, ShareKind.KEY)


def test_message_round_trip_and_truncation():
    m = Message(MsgKind.MASKED, 3, 0, (1, P - 1, 2**40))
    buf = m.to_bytes()
    back, end = Message.from_bytes(buf)
    assert back == m and end == len(buf)
    with pytest.raises(ValueError):
        Message.from_bytes(buf[:-1])


def test_client_stage_order_enforced():
    c = Client(1, updates(1)[1], (2,), 0)
    with pytest.raises(ProtocolError):
        c.round2_mask_update()



def test_audit_is_per_instance():
    req = lambda c, k: Message(MsgKind.SHARE_REQUEST, 0, 9, (c, int(k)))
    end = Message(MsgKind.AGGREGATE, 0, 0, ())
    assert audit_share_requests([req(1, ShareKind.SEED), end, req(1, ShareKind.KEY), end]) == []
    assert audit_share_requests([req(1, ShareKind.SEED), req(1, ShareKind.KEY), end]) == [1]
