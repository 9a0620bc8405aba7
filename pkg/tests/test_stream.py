import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import INTRINSICS, make_gaussians
from splatstream.codec import QuantParams, encode_payload, sh_vectors, train_codebook
from splatstream.core import Camera, RenderConfig
from splatstream.exceptions import ContractViolation, ProtocolError
from splatstream.harness.trajectory import orbit
from splatstream.scene import tree_from_parents
from splatstream.stream import (
    ChannelModel, ClientSession, ClientSubgraph, CloudSession, DeltaCut, ManagementTable, MessageType,
    SimulatedLink, WireMessage, bandwidth_report, channel_send, client_apply, client_select_queue, cloud_update,
    connect, decode_frame, decode_frames, decode_varints, encode_varints, serve_once,
)
from splatstream.stream.wire import (
    decode_id_block, decode_link_block, encode_id_block, encode_link_block, hello, parse_hello, parse_pose,
    pose_message,
)


class TestManagementTable:
    def test_set_difference(self):
        t = ManagementTable.from_dict({1: 0, 2: 0, 3: 0})
        delta, evicted = cloud_update(t, [2, 3, 4])
        assert delta == [4] and evicted == []
        assert t.as_dict() == {1: 4, 2: 0, 3: 0, 4: 0}

    def test_threshold_eviction(self):
        t = ManagementTable.from_dict({7: 32}, reuse_threshold=32, frame_interval=4)
        delta, evicted = cloud_update(t, [8])
        assert evicted == [7] and delta == [8]

    def test_window_reaching_threshold_survives(self):
        t = ManagementTable.from_dict({7: 28}, reuse_threshold=32, frame_interval=4)
        cloud_update(t, [8])
        assert t.as_dict()[7] == 32

    def test_steady_state(self):
        t = ManagementTable()
        cloud_update(t, [1, 5, 9])
        for _ in range(20):
            assert cloud_update(t, [1, 5, 9]) == ([], [])

    @given(st.lists(st.sets(st.integers(0, 40), max_size=15), min_size=1, max_size=30), st.integers(1, 8),
           st.integers(1, 40))
    def test_matches_dict_model(self, cuts, w, thresh):
        t = ManagementTable(thresh, w)
        model: dict[int, int] = {}
        for cut in cuts:
            delta, evicted = cloud_update(t, sorted(cut))
            expect_delta = sorted(cut - model.keys())
            model = {k: (0 if k in cut else v + w) for k, v in model.items()}
            model.update({k: 0 for k in expect_delta})
            expect_evicted = sorted(k for k, v in model.items() if v > thresh)
            model = {k: v for k, v in model.items() if v <= thresh}
            assert delta == expect_delta and evicted == expect_evicted
            assert t.as_dict() == model


class TestWire:
    @given(st.lists(st.integers(0, 2**62), max_size=50))
    def test_varint_round_trip(self, values):
        data = encode_varints(values)
        back, end = decode_varints(data, len(values))
        assert back == values and end == len(data)

    def test_varint_sizes(self):
        assert encode_varints([0, 127, 128, 16383, 16384]) == bytes([0, 127, 0x80, 1, 0xFF, 0x7F, 0x80, 0x80, 1])

    def test_truncated_varint(self):
        with pytest.raises(ProtocolError):
            decode_varints(bytes([0x80, 0x80]), 1)

    @given(st.sets(st.integers(0, 2**31 - 1), max_size=60))
    def test_id_block(self, ids):
        ids = sorted(ids)
        back, end = decode_id_block(encode_id_block(ids), len(ids))
        assert back.tolist() == ids

    def test_link_block(self):
        data = encode_link_block([0, 3, 9], [-1, 0, 3])
        ids, parents, end = decode_link_block(data)
        assert ids.tolist() == [0, 3, 9] and parents.tolist() == [-1, 0, 3] and end == len(data)

    def test_frame_layout(self):
        msg = WireMessage(MessageType.ACK, b"\x07\0\0\0")
        assert msg.encode() == b"\x04\0\0\0\x05\x07\0\0\0"
        assert decode_frame(msg.encode()) == (msg, 9)

    def test_bad_frames(self):
        with pytest.raises(ProtocolError, match="unknown message type"):
            decode_frame(b"\0\0\0\0\x09")
        with pytest.raises(ProtocolError, match="payload bytes"):
            decode_frame(b"\x08\0\0\0\x03abc")
        with pytest.raises(ProtocolError, match="header"):
            decode_frame(b"\x01")

    def test_stream_of_frames(self):
        msgs = [hello(42), pose_message([1, 2, 3], [1, 0, 0, 0], 5)]
        back = decode_frames(b"".join(m.encode() for m in msgs))
        assert back == msgs
        assert parse_hello(back[0].payload)[1] == 42
        pos, quat, frame = parse_pose(back[1].payload)
        assert pos.tolist() == [1, 2, 3] and frame == 5

    def test_delta_cut_round_trip(self):
        dc = DeltaCut(3, np.array([1, 4, 9]), np.array([0, 2]), np.array([-1, 0]), b"payload")
        back = DeltaCut.parse(dc.encode().payload)
        assert back.round_id == 3 and back.cut_ids.tolist() == [1, 4, 9]
        assert back.link_parents.tolist() == [-1, 0] and back.codec_payload == b"payload"


class TestChannel:
    def test_energy(self):
        assert channel_send(ChannelModel(), 1_000_000).energy == 0.1

    def test_transfer_time(self):
        d = channel_send(ChannelModel(rate_bps=100e6, latency_s=0.01), 1_000_000)
        assert d.arrival_time == 0.09

    def test_zero_bytes(self):
        d = channel_send(ChannelModel(latency_s=0.01), b"")
        assert d.energy == 0 and d.arrival_time == 0.01

    def test_framed_size_counted(self):
        ch = ChannelModel()
        d = channel_send(ch, WireMessage(MessageType.ACK, b"1234"))
        assert d.bytes == 9 and ch.bytes_sent == 9 and ch.energy_spent == 9 * 100e-9

    def test_bandwidth(self):
        rep = bandwidth_report([1_000_000], 4, 90.0)
        assert rep.rates_bps[0] == 180e6

    def test_empty_round(self):
        assert bandwidth_report([0], 4).rates_bps[0] == 0.0
        assert bandwidth_report([]).mean_bps == 0.0

    def test_w_linearity(self):
        a = bandwidth_report([123_457] * 3, 8).rates_bps
        b = bandwidth_report([123_457] * 3, 4).rates_bps
        assert np.array_equal(b, 2 * a)

    def test_negative_count(self):
        with pytest.raises(ContractViolation):
            channel_send(ChannelModel(), -1)


def chain_subgraph():
    # 0 -> 1 -> {2, 3}: a small chain with two leaves
    pos = [[0, 0, 10], [0, 0, 10], [-0.2, 0, 10], [0.2, 0, 10]]
    gs = make_gaussians(pos, scales=[[1.0] * 3, [0.5] * 3, [0.01] * 3, [0.01] * 3], degree=1)
    tree = tree_from_parents(gs, [-1, 0, 1, 1])
    book = train_codebook(sh_vectors(tree.gaussians), 4)
    params = QuantParams.from_gaussians(tree.gaussians)
    sub = ClientSubgraph(params, book, reuse_threshold=8, frame_interval=4)
    return tree, sub, params, book


def delta_message(tree, sub, round_id, cut, new, links=()):
    new = np.asarray(new, dtype=np.int64)
    links = np.asarray(links, dtype=np.int64)
    payload = encode_payload(tree.gaussians.take(new), sub.params, sub.codebook, tree.parent[new],
                             tree.child_count[new] == 0)
    return DeltaCut(round_id, np.asarray(cut), links, tree.parent[links], payload)


class TestClient:
    cam = Camera(np.eye(3), np.zeros(3), focal=100.0, principal=(32.0, 32.0), width=64, height=64, near=0.5)

    def test_empty_queue(self):
        _, sub, _, _ = chain_subgraph()
        assert len(client_select_queue(sub, self.cam, 2.0)) == 0

    def test_parent_child_exclusive(self):
        tree, sub, _, _ = chain_subgraph()
        client_apply(sub, delta_message(tree, sub, 0, [1], [1], links=[0]))
        client_apply(sub, delta_message(tree, sub, 1, [2, 3], [2, 3]))
        assert sub.stored_ids.tolist() == [1, 2, 3]
        q_coarse = client_select_queue(sub, self.cam, 1000.0)
        q_fine = client_select_queue(sub, self.cam, 0.5)
        assert q_coarse.tolist() == [1]
        assert q_fine.tolist() == [2, 3]

    def test_orphan_still_renders(self):
        tree, sub, _, _ = chain_subgraph()
        client_apply(sub, delta_message(tree, sub, 0, [1], [1], links=[0]))
        client_apply(sub, delta_message(tree, sub, 1, [2, 3], [2, 3]))
        for r in range(2, 5):
            client_apply(sub, delta_message(tree, sub, r, [2, 3], []))
        assert sub.stored_ids.tolist() == [2, 3]
        assert client_select_queue(sub, self.cam, 1000.0).tolist() == [2, 3]

    def test_steady_state(self):
        tree, sub, _, _ = chain_subgraph()
        client_apply(sub, delta_message(tree, sub, 0, [0], [0]))
        before = sub.gaussians
        client_apply(sub, delta_message(tree, sub, 1, [0], []))
        assert sub.gaussians.equals(before)
        assert sub.table.as_dict() == {0: 0}

    def test_wrong_records_rejected(self):
        tree, sub, _, _ = chain_subgraph()
        with pytest.raises(ProtocolError, match="do not match"):
            client_apply(sub, delta_message(tree, sub, 0, [0, 1], [0]))

    def test_round_order_enforced(self):
        tree, sub, _, _ = chain_subgraph()
        with pytest.raises(ProtocolError, match="expected round 0"):
            client_apply(sub, delta_message(tree, sub, 3, [0], [0]))


def run_rounds(tree, traj, rounds, w=4, wr=32):
    book = train_codebook(sh_vectors(tree.gaussians), 256)
    cloud = CloudSession(tree, book, INTRINSICS, RenderConfig(), w, wr)
    client = ClientSession(INTRINSICS, RenderConfig())
    link = SimulatedLink()
    link.client.send(client.hello())
    for m in cloud.handle(link.cloud.recv()):
        link.cloud.send(m)
    while link.client.pending():
        client.handle(link.client.recv())
    resident = []
    for k in range(rounds):
        pose = traj[k % len(traj)]
        cam = pose.camera(**INTRINSICS)
        link.client.send(client.pose(cam, k))
        for m in cloud.handle(link.cloud.recv()):
            link.cloud.send(m)
        for m in client.handle(link.client.recv()):
            link.client.send(m)
        assert cloud.handle(link.cloud.recv()) == []
        assert np.array_equal(cloud.table.keys, client.subgraph.stored_ids), f"round {k}"
        resident.append(len(client.subgraph))
        yield cloud, client, cam, resident


class TestSession:
    def test_queue_matches_cut_at_lod_pose(self, city_tree):
        traj = orbit((30, 30, 0), 30, 8, 40, deg_per_frame=1.0)
        for cloud, client, cam, _ in run_rounds(city_tree, traj, 10):
            queue = client.select(cam)
            cut = cloud.log[-1].cut.members
            assert np.array_equal(queue, np.intersect1d(cut, client.subgraph.stored_ids))
            assert np.array_equal(queue, cut)

    def test_looping_trajectory_bounded(self, city_tree):
        traj = orbit((30, 30, 0), 30, 8, 60, deg_per_frame=6.0)
        sizes = None
        for cloud, client, _, sizes in run_rounds(city_tree, traj, 180):
            pass
        assert max(sizes[120:]) <= max(sizes[:120])

    def test_handshake_required(self):
        client = ClientSession(INTRINSICS)
        with pytest.raises(ProtocolError, match="before the codebook"):
            client.handle(DeltaCut(0, np.array([0]), np.zeros(0, np.int64), np.zeros(0, np.int64), b"").encode())


def test_socket_transport_matches_simulation(city_tree):
    from splatstream.harness.cli import run_client

    book = train_codebook(sh_vectors(city_tree.gaussians), 64)
    cloud = CloudSession(city_tree, book, INTRINSICS)
    port = []
    ready = threading.Event()

    def on_ready(p):
        port.append(p)
        ready.set()

    server = threading.Thread(target=serve_once, args=(cloud,), kwargs=dict(ready=on_ready), daemon=True)
    server.start()
    assert ready.wait(10)
    traj = orbit((30, 30, 0), 30, 8, 12)
    csv = run_client(connect("127.0.0.1", port[0]), traj, INTRINSICS, RenderConfig())
    server.join(10)
    rows = csv.strip().splitlines()[1:]
    assert len(rows) == 12 and len(cloud.log) == 3
    sim = CloudSession(city_tree, book, INTRINSICS)
    for k, entry in enumerate(cloud.log):
        msg, _ = sim.round(traj[4 * k].camera(**INTRINSICS), traj[4 * k].frame)
        assert msg.frame_size == entry.message_bytes
        assert int(rows[4 * k].split(",")[2]) == entry.message_bytes
