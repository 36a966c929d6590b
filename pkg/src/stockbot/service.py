"""HTTP service exposing the running simulation: job dispatch, state
snapshots, sim control, and a server-push event stream.

The sim loop owns the world on its own thread; handlers interact only
through the serialized command queue and published snapshots, so a slow
client can never stall the behavior tree's tick rate.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .events import LOG_SCHEMA_VERSION, canonical_json
from .orchestration import JobError, MissionRunner

API_SCHEMA_VERSION = 1
EVENT_BUFFER_LIMIT = 4096


class SimService:
    """Background sim loop + thread-safe views for the HTTP handlers."""

    def __init__(self, runner: MissionRunner, tick_hz: float | None = None):
        self.runner = runner
        self.world = runner.world
        self._lock = threading.Lock()
        self._commands: queue.Queue = queue.Queue()
        self._paused = True
        self._stop = False
        self._snapshot = {}
        self._jobs_snapshot = []
        self._event_cursor = 0
        self._subscribers: list[queue.Queue] = []
        self._tick_sleep = 0.0 if tick_hz is None else 1.0 / tick_hz
        self._publish()
        self._thread = threading.Thread(target=self._loop, name="sim-loop", daemon=True)
        self._thread.start()

    # -- sim loop -------------------------------------------------------------

    def _loop(self):
        while not self._stop:
            self._drain_commands()
            if self._paused:
                time.sleep(0.01)
                continue
            self.runner.tick_once()
            self._publish()
            if self._tick_sleep:
                time.sleep(self._tick_sleep)

    def _drain_commands(self):
        while True:
            try:
                fn = self._commands.get_nowait()
            except queue.Empty:
                return
            try:
                fn()
            finally:
                self._publish()

    def _publish(self):
        world = self.world
        with self._lock:
            snap = world.snapshot()
            snap["active_bt_path"] = list(self.runner.bb.active_path)
            snap["paused"] = self._paused
            job = self.runner.queue.active()
            snap["active_job"] = job.id if job else None
            self._snapshot = snap
            self._jobs_snapshot = self.runner.queue.snapshot()
            events = world.events
            new = events[self._event_cursor:]
            self._event_cursor = len(events)
        for record in new:
            payload = canonical_json(record)
            for sub in list(self._subscribers):
                try:
                    sub.put_nowait(payload)
                except queue.Full:
                    sub.put_nowait(None)  # overflow notice; client dropped

    # -- thread-safe API -------------------------------------------------------

    def submit_job(self, kind: str, sku: str):
        result: queue.Queue = queue.Queue()

        def do():
            try:
                job = self.runner.queue.submit(kind, sku)
                result.put({"id": job.id})
            except JobError as exc:
                result.put({"error": exc.tag})

        self._commands.put(do)
        return result.get(timeout=10.0)

    def control(self, action: str, value=None):
        result: queue.Queue = queue.Queue()

        def do():
            if action == "pause":
                self._paused = True
            elif action == "resume":
                self._paused = False
            elif action == "step":
                self.runner.tick_once()
            elif action == "reset":
                self._reset(seed=value)
            elif action == "seed":
                self._reset(seed=value)
            else:
                result.put({"error": "bad-action"})
                return
            result.put({"ok": True, "paused": self._paused})

        self._commands.put(do)
        return result.get(timeout=30.0)

    def _reset(self, seed=None):
        from .camera import CameraModel
        from .orchestration import Services, TaskConfig
        from .scene import NoiseConfig, default_supply_room
        from .world import World

        old = self.world
        noise_seed = seed if seed is not None else old.noise.seed
        import dataclasses

        noise = dataclasses.replace(old.noise, seed=int(noise_seed))
        scene, _ = default_supply_room(noise)
        world = World(scene, noise, chain=old.chain, camera=old.camera)
        self.runner = MissionRunner(world, Services(world, self.runner.services.config))
        self.world = world
        with self._lock:
            self._event_cursor = 0

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self._snapshot)

    def jobs(self) -> list:
        with self._lock:
            return list(self._jobs_snapshot)

    def scene_doc(self) -> dict:
        from .scene import scene_to_dict

        world = self.world
        return scene_to_dict(world.scene, world.noise)

    def subscribe(self) -> queue.Queue:
        sub: queue.Queue = queue.Queue(maxsize=EVENT_BUFFER_LIMIT)
        with self._lock:
            backlog = [canonical_json(e) for e in self.world.events[-200:]]
        for payload in backlog:
            sub.put_nowait(payload)
        self._subscribers.append(sub)
        return sub

    def unsubscribe(self, sub):
        try:
            self._subscribers.remove(sub)
        except ValueError:
            pass

    def shutdown(self):
        self._stop = True
        self._thread.join(timeout=2.0)


def make_handler(service: SimService, static_dir: Path | None = None):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):
            pass

        def _json(self, code: int, payload):
            body = (canonical_json(payload) + "\n").encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path == "/state":
                snap = service.snapshot()
                snap["schema_version"] = API_SCHEMA_VERSION
                self._json(200, snap)
            elif self.path == "/jobs":
                self._json(200, {"schema_version": API_SCHEMA_VERSION, "jobs": service.jobs()})
            elif self.path == "/scene":
                doc = service.scene_doc()
                doc["api_schema_version"] = API_SCHEMA_VERSION
                self._json(200, doc)
            elif self.path == "/events":
                self._stream_events()
            else:
                self._static()

        def _static(self):
            if static_dir is None:
                self._json(404, {"error": "not-found"})
                return
            rel = self.path.lstrip("/") or "index.html"
            target = (static_dir / rel).resolve()
            if not str(target).startswith(str(static_dir.resolve())) or not target.is_file():
                self._json(404, {"error": "not-found"})
                return
            body = target.read_bytes()
            ctype = {
                ".html": "text/html", ".js": "text/javascript", ".css": "text/css",
                ".map": "application/json",
            }.get(target.suffix, "application/octet-stream")
            self.send_response(200)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _stream_events(self):
            sub = service.subscribe()
            try:
                self.send_response(200)
                self.send_header("Content-Type", "text/event-stream")
                self.send_header("Cache-Control", "no-cache")
                self.send_header("Access-Control-Allow-Origin", "*")
                self.end_headers()
                while True:
                    try:
                        payload = sub.get(timeout=1.0)
                    except queue.Empty:
                        self.wfile.write(b": keepalive\n\n")
                        self.wfile.flush()
                        continue
                    if payload is None:
                        self.wfile.write(b"event: overflow\ndata: {}\n\n")
                        self.wfile.flush()
                        break
                    self.wfile.write(f"data: {payload}\n\n".encode())
                    self.wfile.flush()
            except (BrokenPipeError, ConnectionResetError, OSError):
                pass
            finally:
                service.unsubscribe(sub)

        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            try:
                payload = json.loads(self.rfile.read(length) or b"{}")
            except json.JSONDecodeError:
                self._json(400, {"error": "bad-json"})
                return
            if self.path == "/jobs":
                kind = payload.get("kind")
                sku = payload.get("sku")
                if kind not in ("retrieve", "restock") or not isinstance(sku, str):
                    self._json(400, {"error": "bad-request"})
                    return
                result = service.submit_job(kind, sku)
                if "error" in result:
                    self._json(400, result)
                else:
                    self._json(200, result)
            elif self.path == "/sim":
                action = payload.get("action")
                if action not in ("pause", "resume", "step", "reset", "seed"):
                    self._json(400, {"error": "bad-action"})
                    return
                result = service.control(action, payload.get("seed"))
                self._json(200 if "error" not in result else 400, result)
            else:
                self._json(404, {"error": "not-found"})

    return Handler


def serve(runner: MissionRunner, port: int = 8080, tick_hz: float | None = 20.0,
          static_dir=None, start_paused: bool = False):
    """Start the sim loop and the HTTP server; returns (service, httpd).

    The caller drives httpd.serve_forever() (the CLI does) or uses the pair
    directly in tests.
    """
    service = SimService(runner, tick_hz=tick_hz)
    if not start_paused:
        service.control("resume")
    handler = make_handler(service, static_dir=Path(static_dir) if static_dir else None)
    httpd = ThreadingHTTPServer(("0.0.0.0", port), handler)
    return service, httpd
