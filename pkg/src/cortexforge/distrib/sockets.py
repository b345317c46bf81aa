"""TCP transport: a threaded shard server and a retrying replica-side client."""

import logging
import socket
import socketserver
import struct
import time

from cortexforge.distrib import wire

log = logging.getLogger(__name__)


def parse_endpoint(text):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {text!r}")
    return host, int(port)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        actor = self.server.actor
        sock = self.request
        while True:
            try:
                frame = wire.read_frame(sock)
            except (ConnectionError, OSError):
                return
            except wire.WireError as exc:
                log.warning("closing connection: %s", exc)
                return
            try:
                reply = actor.handle_frame(frame)
            except (wire.WireError, KeyError, ValueError, struct.error) as exc:
                log.warning("malformed request from %s, closing: %s", self.client_address, exc)
                return
            try:
                sock.sendall(reply)
            except OSError:
                return


class ShardServer(socketserver.ThreadingTCPServer):
    """Serves one :class:`ShardActor`; the actor's lock serializes all updates."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, actor):
        super().__init__(address, _Handler)
        self.actor = actor

    @property
    def endpoint(self):
        host, port = self.server_address[:2]
        return f"{host}:{port}"


class SocketTransport:
    """Blocking request/response per shard with timeout, retry and backoff.

    A request that still fails after ``retries`` attempts returns ``None``;
    the replica then carries on with what it has.
    """

    def __init__(self, endpoints, timeout=5.0, retries=3, backoff=0.05):
        self.endpoints = [parse_endpoint(e) if isinstance(e, str) else tuple(e) for e in endpoints]
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._socks = {}
        self.sent = 0

    def _sock(self, shard_id):
        sock = self._socks.get(shard_id)
        if sock is None:
            sock = socket.create_connection(self.endpoints[shard_id], timeout=self.timeout)
            sock.settimeout(self.timeout)
            self._socks[shard_id] = sock
        return sock

    def _drop(self, shard_id):
        sock = self._socks.pop(shard_id, None)
        if sock is not None:
            sock.close()

    def request(self, shard_id, msg):
        delay = self.backoff
        for attempt in range(self.retries):
            try:
                sock = self._sock(shard_id)
                wire.send_message(sock, msg)
                self.sent += 1
                return wire.recv_message(sock)
            except (OSError, ConnectionError, wire.WireError) as exc:
                log.warning("shard %d request failed (attempt %d): %s", shard_id, attempt + 1, exc)
                self._drop(shard_id)
                time.sleep(delay)
                delay *= 2
        return None

    def fetch(self, shard_id, keys):
        return self.request(shard_id, wire.FetchParams(shard_id, list(keys)))

    def push(self, shard_id, msg):
        return self.request(shard_id, msg)

    def close(self):
        for shard_id in list(self._socks):
            self._drop(shard_id)
