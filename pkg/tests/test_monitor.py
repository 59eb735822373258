import pytest

from msek.core import SystemConfig
from msek.monitor import PROBE_ORDER, collect_context, drain_event_log
from msek.service import LocalClient, ProtocolError, ProtocolHandler, TcpClient
from msek.sim import Simulator, constant_trace

PROBE_REPLIES = {
    "get_dimmer": "0.8",
    "get_active_servers": "2",
    "get_max_servers": "3",
    "get_utilization": "0.89261",
    "get_basic_rt": "0.35951825050096935",
    "get_arrival_rate": "42.9667",
    "get_time": "3000",
    "reset_window": "OK",
}


class ScriptedClient:
    def __init__(self, replies):
        self.replies = dict(replies)
        self.commands = []

    def request(self, command):
        self.commands.append(command)
        return self.replies[command]


class TestCollectContext:
    def test_worked_example_values_verbatim(self, busy_snapshot):
        client = ScriptedClient(PROBE_REPLIES)
        snapshot = collect_context(client)
        assert snapshot == busy_snapshot
        assert snapshot.avg_response_time == 0.35951825050096935
        assert snapshot.utilization == 0.89261

    def test_probe_order_fixed_and_reset_last(self):
        client = ScriptedClient(PROBE_REPLIES)
        collect_context(client)
        assert client.commands == list(PROBE_ORDER) + ["reset_window"]
        assert client.commands.count("reset_window") == 1

    def test_idle_system_snapshot(self):
        sim = Simulator(SystemConfig(), constant_trace(0.0, 1000.0), initial_servers=2)
        client = LocalClient(ProtocolHandler(sim))
        sim.step_until(200.0)
        snapshot = collect_context(client)
        assert snapshot.avg_response_time == 0.0
        assert snapshot.arrival_rate == 0.0
        assert snapshot.sim_time == 200.0

    def test_non_numeric_reply_is_protocol_error(self):
        replies = dict(PROBE_REPLIES, get_dimmer="abc")
        with pytest.raises(ProtocolError):
            collect_context(ScriptedClient(replies))

    def test_error_reply_is_protocol_error(self):
        replies = dict(PROBE_REPLIES, get_utilization="error: unknown command")
        with pytest.raises(ProtocolError):
            collect_context(ScriptedClient(replies))

    def test_collection_is_read_only_for_adaptation_state(self):
        sim = Simulator(
            SystemConfig(),
            constant_trace(20.0, 1000.0),
            seed=3,
            initial_servers=2,
            initial_dimmer=0.7,
        )
        client = LocalClient(ProtocolHandler(sim))
        sim.step_until(100.0)
        before = (client.request("get_dimmer"), client.request("get_active_servers"))
        collect_context(client)
        after = (client.request("get_dimmer"), client.request("get_active_servers"))
        assert before == after

    def test_reset_starts_new_window(self):
        sim = Simulator(SystemConfig(), constant_trace(20.0, 1000.0), seed=3, initial_servers=2)
        client = LocalClient(ProtocolHandler(sim))
        sim.step_until(100.0)
        first = collect_context(client)
        assert first.arrival_rate > 0
        second = collect_context(client)  # zero-length window right after reset
        assert second.arrival_rate == 0.0

    def test_over_tcp_stub_round_trip(self, busy_snapshot):
        # a scripted telemetry endpoint speaking the sim protocol
        import socket
        import threading

        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.bind(("127.0.0.1", 0))
        sock.listen(1)
        host, port = sock.getsockname()

        def serve_one():
            conn, _ = sock.accept()
            with conn:
                f = conn.makefile("r")
                for _ in range(8):
                    cmd = f.readline().strip()
                    conn.sendall((PROBE_REPLIES[cmd] + "\n").encode())
            sock.close()

        t = threading.Thread(target=serve_one, daemon=True)
        t.start()
        client = TcpClient(host, port, timeout=5.0)
        snapshot = collect_context(client)
        client.close()
        t.join(timeout=5)
        assert snapshot == busy_snapshot


class TestEventLogCapture:
    def test_local_client_exposes_log(self):
        sim = Simulator(SystemConfig(), constant_trace(30.0, 1000.0), seed=2, initial_servers=2)
        client = LocalClient(ProtocolHandler(sim))
        sim.step_until(10.0)
        lines = drain_event_log(client)
        assert lines and all(isinstance(ln, str) for ln in lines)

    def test_metrics_only_transport_yields_nothing(self):
        assert drain_event_log(ScriptedClient(PROBE_REPLIES)) == []
