import socket
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from memq.synthetic import GenSpec, generate_corpus  # noqa: E402


class NetworkBlocked(RuntimeError):
    pass


@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    """Any attempt to open a socket connection fails the test."""

    def guard(*args, **kwargs):
        raise NetworkBlocked("network access attempted during tests")

    monkeypatch.setattr(socket.socket, "connect", guard)
    monkeypatch.setattr(socket.socket, "connect_ex", guard)
    monkeypatch.setattr(socket, "create_connection", guard)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(GenSpec(seed=7, n_characters=5, qa_per_char=12))


@pytest.fixture(scope="session")
def full_corpus():
    return generate_corpus(GenSpec(seed=42, n_characters=20))
