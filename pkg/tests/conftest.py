import pytest

from estemd.broker import Broker
from estemd.eql.session import QueryEngine
from estemd.wire import Client, WireServer


@pytest.fixture
def broker():
    b = Broker()
    yield b
    b.close()


@pytest.fixture
def engine(broker):
    e = QueryEngine(broker)
    yield e
    e.close()


@pytest.fixture
def server(broker, engine):
    srv = WireServer(broker, engine, host="127.0.0.1", port=0).start()
    yield srv
    srv.shutdown()


@pytest.fixture
def client(server):
    host, port = server.address
    c = Client(host, port, timeout=5.0)
    yield c
    c.close()
