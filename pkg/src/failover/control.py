"""Client side of the controller protocol over a simulated channel.

Requests and replies travel on one channel per client, on fixed tags; a
request id echoed in each reply lets a client drop replies to calls that were
interrupted before the answer came back.
"""

from __future__ import annotations

import itertools

import simpy

from .errors import InitError, ProtocolError
from .lccl.tags import TagKind, pack_tag
from .transport import CTRL_MAX_PAYLOAD, Message, Priority
from .wire import Kind, decode, encode

REQUEST_TAG = pack_tag(TagKind.CTRL, 0, 0, 0, 1)
REPLY_TAG = pack_tag(TagKind.CTRL, 0, 0, 0, 2)
PUSH_TAG = pack_tag(TagKind.CTRL, 0, 0, 0, 3)


def frame_message(source: str, dest: str, tag: int, data: bytes) -> Message:
    # index lists may outgrow the control class; they ride as STATE traffic then
    prio = Priority.CTRL if len(data) <= CTRL_MAX_PAYLOAD else Priority.STATE
    return Message(prio, source, dest, tag, data)


class SimControlClient:
    def __init__(self, env: simpy.Environment, net, endpoint: str, controller: str,
                 *, timeout: float | None = None):
        self.env = env
        self.endpoint = endpoint
        self.controller = controller
        self.channel = net.open_channel(endpoint, controller)
        self.timeout = timeout
        self._lock = simpy.Resource(env, capacity=1)
        self._rid = itertools.count(1)
        self._outstanding = None  # recv left behind by an abandoned call

    def notify(self, kind: Kind, body=None) -> None:
        self.channel.send(frame_message(self.endpoint, self.controller, REQUEST_TAG,
                                        encode(kind, body)))

    def call(self, kind: Kind, body: dict | None = None, wait=None):
        """Send a request and return the reply body (use with ``yield from``).

        ``wait`` wraps every blocking event, e.g. ``ctx.wait`` to make the call
        interruptible.
        """
        wait = wait or (lambda ev: ev)
        body = dict(body or {})
        rid = next(self._rid)
        body["rid"] = rid
        with self._lock.request() as req:
            yield wait(req)
            self.channel.send(frame_message(self.endpoint, self.controller, REQUEST_TAG,
                                            encode(kind, body)))
            while True:
                ev = self._outstanding or self.channel.recv(self.endpoint, REPLY_TAG)
                self._outstanding = ev
                if self.timeout is not None:
                    timer = self.env.timeout(self.timeout)
                    fired = yield wait(self.env.any_of([ev, timer]))
                    if ev not in fired:
                        raise InitError(f"controller {self.controller} did not answer "
                                        f"{kind.name} within {self.timeout}s")
                    msg = fired[ev]
                else:
                    msg = yield wait(ev)
                self._outstanding = None
                frame = decode(msg.payload)
                if frame.body.get("rid") != rid:
                    continue  # reply to an abandoned call
                if frame.kind == Kind.ERROR:
                    raise ProtocolError(frame.body.get("error", "controller error"))
                return frame.body

    def next_push(self):
        """Event yielding the next server-initiated message (decode its payload)."""
        return self.channel.recv(self.endpoint, PUSH_TAG)
