"""JSON-lines protocol that lets an external process drive EnvInput agents.

One JSON object per line. A session is::

    client: hello            server: hello (protocol, layout)
    client: reset            server: observation(tick 0)
    client: action(tick t)   server: result(tick t+1) [+ observation(tick t+1)]
    ...                      (after a result with done=true: reset or bye)
    client: bye              server: bye

Protocol violations get an ``error`` message and the session is closed.
"""
from __future__ import annotations

import json
import math
import os
import queue
import socket
import socketserver
import sys
import threading
import uuid
from dataclasses import replace
from typing import Callable

from . import sensing
from .engine import SimConfig, reset, step
from .errors import ProtocolError, ScenforgeError
from .metrics import ABORTED, RUNNING

PROTOCOL = "sfb/1"
DEFAULT_TIMEOUT = 30.0
KINDS = ("hello", "reset", "observation", "action", "result", "bye", "error")


def describe_observation(cfg: SimConfig | None = None) -> dict:
    cfg = cfg or SimConfig()
    layout = sensing.observation_layout(cfg)
    return {"fields": layout, "size": sum(f["size"] for f in layout)}


def encode(msg: dict) -> bytes:
    return (json.dumps(msg, separators=(",", ":"), allow_nan=False) + "\n").encode("utf-8")


def decode(line: bytes | str) -> dict:
    if isinstance(line, bytes):
        line = line.decode("utf-8", errors="replace")
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError("malformed", f"not a JSON document: {exc}") from None
    if not isinstance(msg, dict) or msg.get("kind") not in KINDS:
        raise ProtocolError("malformed", "message must be an object with a known 'kind'")
    return msg


def _floats(vec) -> list[float]:
    return [float(x) for x in vec]


def _nodelay(sock) -> None:
    # result and observation go out as two writes; don't let Nagle hold the second
    try:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    except OSError:
        pass


class Channel:
    """Line transport with a receive timeout."""

    def recv(self, timeout: float) -> bytes | None:
        raise NotImplementedError

    def send(self, msg: dict) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass


class SocketChannel(Channel):
    def __init__(self, sock: socket.socket):
        self.sock = sock
        _nodelay(sock)
        self.rfile = sock.makefile("rb")
        self.lock = threading.Lock()

    def recv(self, timeout):
        self.sock.settimeout(timeout)
        try:
            line = self.rfile.readline()
        except (socket.timeout, TimeoutError):
            raise ProtocolError("timeout", f"no message within {timeout} s") from None
        except OSError:
            return None
        return line or None

    def send(self, msg):
        with self.lock:
            try:
                self.sock.sendall(encode(msg))
            except OSError:
                pass

    def close(self):
        try:
            self.rfile.close()
            self.sock.close()
        except OSError:
            pass


class StreamChannel(Channel):
    """Binary streams (e.g. stdin/stdout); a reader thread feeds a queue."""

    def __init__(self, rstream, wstream):
        self.w = wstream
        self.q: queue.Queue = queue.Queue()
        t = threading.Thread(target=self._pump, args=(rstream,), daemon=True)
        t.start()

    def _pump(self, r):
        # raw reads: a thread parked inside a buffered readline aborts interpreter shutdown
        try:
            fd = r.fileno()
        except (AttributeError, OSError):
            fd = None
        if fd is None:
            for line in iter(r.readline, b""):
                self.q.put(line)
        else:
            buf = b""
            while chunk := os.read(fd, 65536):
                *lines, buf = (buf + chunk).split(b"\n")
                for line in lines:
                    self.q.put(line + b"\n")
            if buf:
                self.q.put(buf)
        self.q.put(None)

    def recv(self, timeout):
        try:
            return self.q.get(timeout=timeout)
        except queue.Empty:
            raise ProtocolError("timeout", f"no message within {timeout} s") from None

    def send(self, msg):
        self.w.write(encode(msg))
        self.w.flush()


class Session:
    """Runs one client conversation against a private world."""

    def __init__(self, channel: Channel, scenarios: Callable[[str | None, int], object],
                 cfg: SimConfig, timeout: float = DEFAULT_TIMEOUT, on_episode=None):
        self.ch = channel
        self.scenarios = scenarios
        self.cfg = cfg
        self.timeout = timeout
        self.on_episode = on_episode
        self.sid = uuid.uuid4().hex[:12]
        self.world = None
        self.episodes = 0

    def send(self, kind, **payload):
        self.ch.send({"kind": kind, "session": self.sid, **payload})

    def expect(self, *kinds) -> dict:
        line = self.ch.recv(self.timeout)
        if line is None:
            raise ProtocolError("closed", "client closed the stream")
        msg = decode(line)
        if msg["kind"] not in kinds:
            raise ProtocolError("unexpected", f"expected {'/'.join(kinds)}, got {msg['kind']}")
        return msg

    def run(self) -> None:
        try:
            hello = self.expect("hello")
            if hello.get("protocol", PROTOCOL) != PROTOCOL:
                raise ProtocolError("version", f"unsupported protocol {hello.get('protocol')!r}")
            self.send("hello", protocol=PROTOCOL, observation=describe_observation(self.cfg))
            while True:
                msg = self.expect("reset", "bye")
                if msg["kind"] == "bye":
                    self.send("bye")
                    return
                self.episode(msg)
        except ProtocolError as exc:
            self.abort()
            if exc.code != "closed":
                self.send("error", code=exc.code, message=str(exc))
        except ScenforgeError as exc:
            self.abort()
            self.send("error", code="simulation", message=str(exc))
        finally:
            self.ch.close()

    def abort(self):
        w = self.world
        if w is not None and not w.done:
            for a in w.agents.values():
                if a.status == RUNNING:
                    a.status = ABORTED
            w.done = True
            self.finish()

    def finish(self):
        if self.on_episode is not None and self.world is not None:
            self.on_episode(self.world)

    def episode(self, msg: dict) -> None:
        mode = msg.get("mode", self.cfg.mode)
        if mode not in ("single", "multi"):
            raise ProtocolError("malformed", f"unknown mode {mode!r}")
        seed = msg.get("seed", self.cfg.noise_seed)
        if not isinstance(seed, int):
            raise ProtocolError("malformed", "seed must be an integer")
        try:
            scenario = self.scenarios(msg.get("scenario_id"), self.episodes)
        except KeyError as exc:
            raise ProtocolError("unknown_scenario", str(exc)) from None
        cfg = replace(self.cfg, mode=mode, noise_seed=seed, ego_policy="env", observations=True,
                      reward=None if mode != self.cfg.mode else self.cfg.reward)
        self.world, obs = reset(scenario, cfg=cfg)
        self.episodes += 1
        w = self.world
        self.send("observation", tick=w.tick, scenario_id=scenario.scenario_id,
                  agents={k: _floats(v) for k, v in obs.items()})
        while not w.done:
            act = self.expect("action")
            tick = act.get("tick")
            if not isinstance(tick, int):
                raise ProtocolError("malformed", "action needs an integer tick")
            if tick < w.tick:
                raise ProtocolError("stale_tick", f"action for tick {tick}, current tick is {w.tick}")
            if tick > w.tick:
                raise ProtocolError("future_tick", f"action for tick {tick}, current tick is {w.tick}")
            actions, warnings = self.parse_actions(act)
            obs, rewards, terms, info = step(w, actions)
            agent_info = {k: v for k, v in info.items() if not k.startswith("__")}
            self.send("result", tick=w.tick, rewards=rewards, terminations=terms, info=agent_info,
                      done=w.done, warnings=warnings)
            if not w.done:
                self.send("observation", tick=w.tick, agents={k: _floats(v) for k, v in obs.items()})
        self.finish()

    def parse_actions(self, msg: dict) -> tuple[dict, list[str]]:
        w = self.world
        live = w.live_controlled()
        raw = msg.get("actions")
        if raw is None and "action" in msg and len(live) == 1:
            raw = {live[0]: msg["action"]}
        if not isinstance(raw, dict):
            raise ProtocolError("malformed", "action message needs an 'actions' object")
        out, warnings = {}, []
        for aid, a in raw.items():
            if aid not in live:
                raise ProtocolError("unknown_agent", f"no live agent '{aid}'")
            if (not isinstance(a, list) or len(a) != 2
                    or not all(isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) for x in a)):
                raise ProtocolError("malformed", f"action for '{aid}' must be [steer, accel]")
            out[aid] = (float(a[0]), float(a[1]))
        missing = [aid for aid in live if aid not in out]
        if missing:
            if w.cfg.mode != "multi":
                raise ProtocolError("missing_action", f"no action for {missing}")
            for aid in missing:
                out[aid] = (0.0, 0.0)
                warnings.append(f"missing action for '{aid}' defaulted to (0, 0)")
        return out, warnings


def scenario_source(items) -> Callable[[str | None, int], object]:
    """Resolve scenarios by id (or round-robin by episode count) from a Database or a list."""
    from .database import Database

    if isinstance(items, Database):
        ids = items.ids

        def get(sid, k):
            if sid is None:
                sid = ids[k % len(ids)]
            if sid not in items:
                raise KeyError(f"unknown scenario '{sid}'")
            return items.read(sid)
        return get
    table = {s.scenario_id: s for s in items}
    order = list(table)

    def get_list(sid, k):
        if sid is None:
            sid = order[k % len(order)]
        if sid not in table:
            raise KeyError(f"unknown scenario '{sid}'")
        return table[sid]
    return get_list


class BridgeServer(socketserver.ThreadingTCPServer):
    """TCP listener; each connection gets its own thread and world."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, scenarios, cfg: SimConfig | None = None,
                 timeout: float = DEFAULT_TIMEOUT, on_episode=None):
        self.source = scenarios if callable(scenarios) else scenario_source(scenarios)
        self.cfg = cfg or SimConfig()
        self.client_timeout = timeout
        self.on_episode = on_episode
        super().__init__(address, _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        srv = self.server
        Session(SocketChannel(self.request), srv.source, srv.cfg, srv.client_timeout, srv.on_episode).run()


def parse_endpoint(endpoint: str) -> tuple[str, int] | None:
    """``host:port`` or ``-`` for standard streams (returns None)."""
    if endpoint == "-":
        return None
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must be host:port or '-', got {endpoint!r}")
    return host or "127.0.0.1", int(port)


def serve(scenarios, endpoint: str, cfg: SimConfig | None = None, timeout: float = DEFAULT_TIMEOUT,
          max_sessions: int | None = None, on_episode=None, ready=None) -> None:
    """Serve sessions on ``endpoint`` until interrupted (or ``max_sessions`` completed)."""
    cfg = cfg or SimConfig()
    addr = parse_endpoint(endpoint)
    source = scenarios if callable(scenarios) else scenario_source(scenarios)
    if addr is None:
        Session(StreamChannel(sys.stdin.buffer, sys.stdout.buffer), source, cfg, timeout, on_episode).run()
        return
    with BridgeServer(addr, source, cfg, timeout, on_episode) as srv:
        if ready is not None:
            ready(srv)
        if max_sessions is None:
            srv.serve_forever()
            return
        threads = []
        for _ in range(max_sessions):
            conn, _ = srv.socket.accept()
            t = threading.Thread(target=lambda c=conn: Session(SocketChannel(c), source, cfg, timeout,
                                                               on_episode).run())
            t.start()
            threads.append(t)
        for t in threads:
            t.join()


class BridgeClient:
    """Minimal reference client."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, timeout: float = 60.0, sock=None):
        self.sock = sock or socket.create_connection((host, port), timeout=timeout)
        self.sock.settimeout(timeout)
        _nodelay(self.sock)
        self.rfile = self.sock.makefile("rb")
        self.session = None
        self.layout = None

    def send(self, msg: dict) -> None:
        self.sock.sendall(encode(msg))

    def send_raw(self, data: bytes) -> None:
        self.sock.sendall(data)

    def recv(self) -> dict | None:
        line = self.rfile.readline()
        return json.loads(line) if line else None

    def hello(self) -> dict:
        self.send({"kind": "hello", "protocol": PROTOCOL})
        msg = self.recv()
        self.session = msg.get("session")
        self.layout = msg.get("observation")
        return msg

    def reset(self, scenario_id: str | None = None, mode: str = "single", seed: int = 0) -> dict:
        msg = {"kind": "reset", "mode": mode, "seed": seed}
        if scenario_id is not None:
            msg["scenario_id"] = scenario_id
        self.send(msg)
        return self.recv()

    def act(self, tick: int, actions: dict) -> tuple[dict, dict | None]:
        self.send({"kind": "action", "tick": tick,
                   "actions": {k: [float(a[0]), float(a[1])] for k, a in actions.items()}})
        result = self.recv()
        if result is None or result["kind"] != "result" or result["done"]:
            return result, None
        return result, self.recv()

    def bye(self) -> dict | None:
        self.send({"kind": "bye"})
        return self.recv()

    def close(self) -> None:
        try:
            self.rfile.close()
            self.sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_client_episode(client: BridgeClient, policy, scenario_id=None, mode="single", seed=0):
    """Drive one episode: ``policy(tick, observation_msg) -> actions``. Returns the message list."""
    obs = client.reset(scenario_id, mode, seed)
    stream = [obs]
    while obs is not None and obs["kind"] == "observation":
        result, obs = client.act(obs["tick"], policy(obs["tick"], obs))
        stream.append(result)
        if obs is not None:
            stream.append(obs)
    return stream


__all__ = ["PROTOCOL", "describe_observation", "serve", "BridgeServer", "BridgeClient", "Session",
           "scenario_source", "run_client_episode", "parse_endpoint"]
