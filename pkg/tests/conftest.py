import pytest

from cascadetrace import ServerConfig, TraceClient, TraceServer


@pytest.fixture
def server():
    srv = TraceServer(ServerConfig(port=0))
    srv.start()
    yield srv
    srv.shutdown()


@pytest.fixture
def client(server):
    c = TraceClient(server.url)
    yield c
    c.close()
