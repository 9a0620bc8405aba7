"""Two transports behind one send/recv interface; both carry identical frame bytes."""

from __future__ import annotations

import collections
import socket

from ..exceptions import ProtocolError
from .channel import ChannelModel, Delivery, channel_send
from .wire import FRAME_HEADER, WireMessage, decode_frame


class SimulatedEndpoint:
    def __init__(self, outbox: collections.deque, inbox: collections.deque, channel: ChannelModel, log: list):
        self._out = outbox
        self._in = inbox
        self.channel = channel
        self.deliveries: list[Delivery] = log
        self.clock = 0.0

    def send(self, msg: WireMessage) -> Delivery:
        frame = msg.encode()
        d = channel_send(self.channel, frame, self.clock)
        self.deliveries.append(d)
        self._out.append(frame)
        return d

    def recv(self) -> WireMessage | None:
        if not self._in:
            return None
        msg, end = decode_frame(self._in.popleft())
        return msg

    def pending(self) -> int:
        return len(self._in)


class SimulatedLink:
    """In-process FIFO pair with a channel model per direction (deterministic)."""

    def __init__(self, downlink: ChannelModel | None = None, uplink: ChannelModel | None = None):
        c2s: collections.deque = collections.deque()
        s2c: collections.deque = collections.deque()
        self.downlink = downlink or ChannelModel()
        self.uplink = uplink or ChannelModel()
        self.cloud = SimulatedEndpoint(s2c, c2s, self.downlink, [])
        self.client = SimulatedEndpoint(c2s, s2c, self.uplink, [])


class SocketTransport:
    """Length-prefixed frames over a stream socket."""

    def __init__(self, sock: socket.socket, channel: ChannelModel | None = None):
        self.sock = sock
        self.channel = channel or ChannelModel()
        self.deliveries: list[Delivery] = []

    def send(self, msg: WireMessage) -> Delivery:
        frame = msg.encode()
        self.sock.sendall(frame)
        d = channel_send(self.channel, frame)
        self.deliveries.append(d)
        return d

    def _read_exact(self, n: int) -> bytes | None:
        chunks = []
        got = 0
        while got < n:
            part = self.sock.recv(n - got)
            if not part:
                if got == 0:
                    return None
                raise ProtocolError(f"connection closed mid-frame after {got} of {n} bytes", got)
            chunks.append(part)
            got += len(part)
        return b"".join(chunks)

    def recv(self) -> WireMessage | None:
        head = self._read_exact(FRAME_HEADER.size)
        if head is None:
            return None
        length, _ = FRAME_HEADER.unpack(head)
        body = self._read_exact(length) if length else b""
        if body is None:
            raise ProtocolError("connection closed before frame payload", FRAME_HEADER.size)
        msg, _ = decode_frame(head + body)
        return msg

    def close(self) -> None:
        self.sock.close()


def serve_once(cloud, host: str = "127.0.0.1", port: int = 0, ready=None) -> int:
    """Accept one client and answer its messages until it disconnects; returns rounds served."""
    with socket.create_server((host, port)) as server:
        if ready is not None:
            ready(server.getsockname()[1])
        conn, _ = server.accept()
        transport = SocketTransport(conn)
        with conn:
            while True:
                msg = transport.recv()
                if msg is None:
                    break
                for reply in cloud.handle(msg):
                    transport.send(reply)
    return len(cloud.log)


def connect(host: str, port: int, timeout: float = 30.0) -> SocketTransport:
    return SocketTransport(socket.create_connection((host, port), timeout=timeout))
