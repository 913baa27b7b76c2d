"""Prioritized message channels with a simulated and a socket backend."""

from .base import CTRL_MAX_PAYLOAD, DEFAULT_CHUNK, Direction, LinkModel, LinkStats, Message, Priority
from .sim import Completion, SimChannel, SimNetwork
from .sockets import SocketChannel, SocketNetwork

__all__ = [
    "CTRL_MAX_PAYLOAD", "DEFAULT_CHUNK", "Completion", "Direction", "LinkModel", "LinkStats",
    "Message", "Priority", "SimChannel", "SimNetwork", "SocketChannel", "SocketNetwork",
]
