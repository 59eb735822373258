"""Probe/effector service for the simulator: a line-oriented ASCII protocol
served over TCP (one client at a time, one reply line per command) or consumed
in-process through the same handler.

Commands: get_dimmer, get_active_servers, get_max_servers, get_utilization,
get_basic_rt, get_arrival_rate, get_time, set_dimmer <v>, add_server,
remove_server, reset_window, advance <seconds>. Replies are a decimal number,
"OK", or "error: <reason>".
"""

from __future__ import annotations

import socket
import threading

from .core import format_number
from .sim import BadDimmer, EffectorError, Simulator

PROBE_METRICS = (
    "dimmer",
    "active_servers",
    "max_servers",
    "utilization",
    "basic_rt",
    "arrival_rate",
    "time",
)


class ProtocolHandler:
    """Maps protocol lines onto a Simulator. Strictly serial by construction."""

    def __init__(self, sim: Simulator):
        self.sim = sim

    def handle_line(self, line: str) -> str:
        parts = line.strip().split()
        if not parts:
            return "error: unknown command"
        cmd, args = parts[0], parts[1:]
        if cmd.startswith("get_") and not args:
            metric = cmd[4:]
            if metric in PROBE_METRICS:
                return format_number(self.sim.read_probe(metric))
            return "error: unknown command"
        if cmd == "set_dimmer":
            if len(args) != 1:
                return "error: bad dimmer"
            try:
                value = float(args[0])
            except ValueError:
                return "error: bad dimmer"
            try:
                self.sim.set_dimmer(value)
            except BadDimmer:
                return "error: bad dimmer"
            return "OK"
        if cmd == "add_server" and not args:
            try:
                self.sim.add_server()
            except EffectorError as exc:
                return f"error: {exc}"
            return "OK"
        if cmd == "remove_server" and not args:
            try:
                self.sim.remove_server()
            except EffectorError as exc:
                return f"error: {exc}"
            return "OK"
        if cmd == "reset_window" and not args:
            self.sim.reset_window()
            return "OK"
        if cmd == "advance":
            if len(args) != 1:
                return "error: bad advance"
            try:
                seconds = float(args[0])
            except ValueError:
                return "error: bad advance"
            if seconds < 0:
                return "error: bad advance"
            self.sim.step_until(self.sim.clock + seconds)
            return "OK"
        return "error: unknown command"


class ProbeTimeout(Exception):
    pass


class ProtocolError(Exception):
    pass


class LocalClient:
    """In-process client speaking the same protocol as the TCP one."""

    def __init__(self, handler: ProtocolHandler):
        self.handler = handler

    def request(self, command: str) -> str:
        return self.handler.handle_line(command)

    def drain_events(self) -> list[str]:
        return self.handler.sim.drain_events()

    def close(self):
        pass


class TcpClient:
    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.settimeout(timeout)
        self._reader = self.sock.makefile("r", encoding="ascii", newline="\n")

    def request(self, command: str) -> str:
        try:
            self.sock.sendall((command + "\n").encode("ascii"))
            reply = self._reader.readline()
        except socket.timeout:
            raise ProbeTimeout(f"no reply to {command!r}") from None
        except OSError as exc:
            raise ProtocolError(f"connection lost during {command!r}: {exc}") from None
        if not reply:
            raise ProtocolError(f"connection closed during {command!r}")
        return reply.rstrip("\n")

    def close(self):
        try:
            self._reader.close()
            self.sock.close()
        except OSError:
            pass


class SimServer:
    """Serves one client at a time; commands from a connection are handled in
    arrival order and each gets exactly one reply line."""

    def __init__(self, handler: ProtocolHandler, host: str = "127.0.0.1", port: int = 4242):
        self.handler = handler
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(1)
        self._sock.settimeout(0.2)
        self.host, self.port = self._sock.getsockname()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _serve(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            with conn:
                conn.settimeout(0.2)
                buf = b""
                while not self._stop.is_set():
                    try:
                        chunk = conn.recv(4096)
                    except socket.timeout:
                        continue
                    except OSError:
                        break
                    if not chunk:
                        break
                    buf += chunk
                    while b"\n" in buf:
                        line, buf = buf.split(b"\n", 1)
                        reply = self.handler.handle_line(line.decode("ascii", "replace"))
                        try:
                            conn.sendall((reply + "\n").encode("ascii"))
                        except OSError:
                            break
        self._sock.close()

    def start(self):
        self._thread = threading.Thread(target=self._serve, name="msek-sim", daemon=True)
        self._thread.start()

    def serve_forever(self):
        self._stop.clear()
        self._serve()

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
