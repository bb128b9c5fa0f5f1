"""Session service: HTTP lifecycle endpoints plus WebSocket streaming.

Endpoints: ``POST /sessions`` creates a simulation session, ``GET /healthz``
liveness, ``GET /sessions/{id}/log`` downloads the binary trial log once the
trial has ended, ``GET /sessions/{id}/ws`` upgrades to the streaming
protocol.

Each session runs one fixed-timestep engine in lockstep with the wall clock
(stalls pause the simulation, they are never fast-forwarded) and publishes
``state`` frames at ~30 Hz, ``event`` frames exactly once each in order, and
``bscan`` frames on request. All client messages are applied in arrival
order on the event loop, so no tick ever sees a partially applied key set.
"""

from __future__ import annotations

import asyncio
import json
import secrets

from aiohttp import WSMsgType, web

from .engine import SimConfig, SimulationEngine
from .eye_sim import Scenario, ScenarioValidationError
from .oct import ScanPlane, auto_plane_at_tip, default_plane, render_bscan

FRAME_HZ = 30.0
STALL_CAP_S = 0.25  # wall-clock debt beyond this is dropped, not replayed

_CORS_HEADERS = {
    "Access-Control-Allow-Origin": "*",
    "Access-Control-Allow-Methods": "GET, POST, OPTIONS",
    "Access-Control-Allow-Headers": "Content-Type",
}


@web.middleware
async def _cors_middleware(request, handler):
    # the operator console is a static page served from anywhere
    response = await handler(request)
    if isinstance(response, web.StreamResponse):
        response.headers.update(_CORS_HEADERS)
    return response


async def _preflight(request):
    return web.Response(status=204, headers=_CORS_HEADERS)


class SessionRecord:
    def __init__(self, sid: str, engine: SimulationEngine):
        self.id = sid
        self.engine = engine
        self.subscribers: list[asyncio.Queue] = []
        self.task: asyncio.Task | None = None
        self.plane = default_plane(engine.scenario,
                                   engine.config.bscan_width_mm,
                                   engine.config.bscan_depth_mm)
        self.log_bytes: bytes | None = None
        self.bscan_count = 0

    def state_frame(self) -> dict:
        snap = self.engine.snapshot()
        return {
            "type": "state",
            "t": snap.t,
            "joints": list(snap.joints),
            "tip": list(snap.tip),
            "tip_velocity": list(snap.tip_velocity),
            "force": list(snap.force_mn),
            "rcm_deviation_um": snap.rcm_deviation_um,
            "step": snap.step.value,
            "attempt": snap.attempt,
        }

    def broadcast(self, frame: dict):
        for queue in self.subscribers:
            queue.put_nowait(frame)

    def fetch_log_bytes(self) -> bytes:
        if self.log_bytes is None:
            self.log_bytes = self.engine.log.to_bytes()
        return self.log_bytes


class SessionService:
    """Holds live sessions; one simulation task per session."""

    def __init__(self, out_dir=None):
        self.sessions: dict[str, SessionRecord] = {}
        self.out_dir = out_dir

    def make_app(self) -> web.Application:
        app = web.Application(middlewares=[_cors_middleware])
        app.router.add_get("/healthz", self.handle_healthz)
        app.router.add_post("/sessions", self.handle_create)
        app.router.add_options("/sessions", _preflight)
        app.router.add_get("/sessions/{sid}/log", self.handle_log)
        app.router.add_get("/sessions/{sid}/ws", self.handle_ws)
        app.on_shutdown.append(self.shutdown)
        return app

    async def handle_healthz(self, request):
        return web.json_response({"status": "ok"})

    async def handle_create(self, request):
        try:
            body = await request.json()
        except json.JSONDecodeError:
            return web.json_response({"error": "body must be JSON"}, status=400)
        try:
            scenario_data = body.get("scenario")
            scenario = (Scenario.from_dict(scenario_data)
                        if scenario_data is not None else Scenario.default())
            config_data = body.get("config") or {}
            base = SimConfig().to_dict()
            unknown = sorted(set(config_data) - set(base))
            if unknown:
                return web.json_response(
                    {"error": "unknown config fields", "fields": unknown}, status=400)
            base.update(config_data)
            config = SimConfig.from_dict(base)
            seed = int(body.get("seed", 0))
        except ScenarioValidationError as exc:
            return web.json_response(
                {"error": "invalid scenario", "problems": exc.problems}, status=400)
        except (TypeError, ValueError) as exc:
            return web.json_response({"error": str(exc)}, status=400)

        sid = secrets.token_hex(8)
        engine = SimulationEngine(scenario, config, seed=seed)
        record = SessionRecord(sid, engine)
        self.sessions[sid] = record
        record.task = asyncio.get_running_loop().create_task(self._run(record))
        return web.json_response({
            "id": sid,
            "ws_path": f"/sessions/{sid}/ws",
            "step": engine.workflow.step.value,
            # scene descriptor for the console's schematic top-down view
            "scenario": scenario.to_dict(),
        })

    async def handle_log(self, request):
        record = self.sessions.get(request.match_info["sid"])
        if record is None:
            return web.json_response({"error": "no_such_session"}, status=404)
        if not record.engine.workflow.terminal:
            return web.json_response({"error": "trial_live"}, status=409)
        return web.Response(body=record.fetch_log_bytes(),
                            content_type="application/octet-stream")

    async def _run(self, record: SessionRecord):
        loop = asyncio.get_running_loop()
        engine = record.engine
        frame_dt = 1.0 / FRAME_HZ
        acc = 0.0
        last = loop.time()
        next_frame = last
        try:
            while True:
                next_frame += frame_dt
                delay = next_frame - loop.time()
                if delay > 0:
                    await asyncio.sleep(delay)
                else:
                    next_frame = loop.time()
                now = loop.time()
                elapsed = now - last
                last = now
                if elapsed > STALL_CAP_S:
                    elapsed = frame_dt  # paused, not fast-forwarded
                if not engine.workflow.terminal:
                    acc += elapsed * engine.config.time_scale
                    n = int(acc / engine.dt)
                    acc -= n * engine.dt
                    engine.run_ticks(n)
                for event in engine.drain_events():
                    record.broadcast({
                        "type": "event", "kind": event.kind.value, "t": event.t,
                    })
                record.broadcast(record.state_frame())
        except asyncio.CancelledError:
            pass

    async def handle_ws(self, request):
        record = self.sessions.get(request.match_info["sid"])
        if record is None:
            return web.json_response({"error": "no_such_session"}, status=404)
        ws = web.WebSocketResponse()
        await ws.prepare(request)
        queue: asyncio.Queue = asyncio.Queue()
        record.subscribers.append(queue)

        async def sender():
            try:
                while True:
                    frame = await queue.get()
                    await ws.send_json(frame)
            except (asyncio.CancelledError, ConnectionResetError):
                pass

        send_task = asyncio.get_running_loop().create_task(sender())
        try:
            async for msg in ws:
                if msg.type is not WSMsgType.TEXT:
                    continue
                try:
                    message = json.loads(msg.data)
                except json.JSONDecodeError:
                    await ws.send_json({"type": "error", "code": "bad_json",
                                        "message": "frame is not valid JSON"})
                    continue
                reply = await self._handle_message(record, message, queue)
                if reply is not None:
                    await ws.send_json(reply)
        finally:
            send_task.cancel()
            if queue in record.subscribers:
                record.subscribers.remove(queue)
        return ws

    async def _handle_message(self, record: SessionRecord, message, queue):
        if not isinstance(message, dict):
            return {"type": "error", "code": "bad_message",
                    "message": "frame must be a JSON object"}
        if message.get("type") == "request_bscan":
            return await self._handle_bscan(record, message, queue)
        reply = record.engine.ingest(message)
        if reply.get("type") == "error":
            return reply
        return None  # accepted inputs are visible through the state stream

    async def _handle_bscan(self, record: SessionRecord, message, queue):
        engine = record.engine
        snap = engine.snapshot()
        if message.get("auto"):
            plane = auto_plane_at_tip(snap.tip, engine.scenario.vessel,
                                      engine.config.bscan_width_mm,
                                      engine.config.bscan_depth_mm)
            record.plane = plane
        elif message.get("plane") is not None:
            try:
                plane = ScanPlane.from_dict(message["plane"])
            except (KeyError, TypeError, ValueError) as exc:
                return {"type": "error", "code": "bad_plane", "message": str(exc)}
            record.plane = plane
        else:
            plane = record.plane
        record.bscan_count += 1
        seed = engine.seed ^ record.bscan_count
        cfg = engine.config
        scan = await asyncio.get_running_loop().run_in_executor(
            None, lambda: render_bscan(
                engine.scenario, snap.tissue, (snap.tip, snap.shaft), plane,
                cfg.bscan_width_px, cfg.bscan_height_px,
                cfg.speckle_strength, seed, snap.t,
            ))
        queue.put_nowait(scan.to_frame())
        return None

    async def shutdown(self, app):
        for record in self.sessions.values():
            if record.task is not None:
                record.task.cancel()
            self.flush_log(record)

    def flush_log(self, record: SessionRecord):
        """Persist the session's log (live trials included) for crash safety."""
        if self.out_dir is None:
            return
        import os

        os.makedirs(self.out_dir, exist_ok=True)
        path = os.path.join(self.out_dir, f"{record.id}.rvcl")
        with open(path, "wb") as fh:
            fh.write(record.engine.log.to_bytes())


async def _serve(bind: str, port: int, out_dir=None, ready_event=None):
    service = SessionService(out_dir=out_dir)
    app = service.make_app()
    runner = web.AppRunner(app)
    await runner.setup()
    site = web.TCPSite(runner, bind, port)
    await site.start()
    actual_port = runner.addresses[0][1] if runner.addresses else port
    print(f"session service listening on {bind}:{actual_port}", flush=True)
    if ready_event is not None:
        ready_event.set()
    try:
        while True:
            await asyncio.sleep(3600)
    except asyncio.CancelledError:
        pass
    finally:
        await runner.cleanup()


def serve(bind: str = "127.0.0.1", port: int = 8765, out_dir=None) -> int:
    """Run the service until interrupted. Returns a process exit code."""
    try:
        asyncio.run(_serve(bind, port, out_dir))
    except OSError as exc:
        if exc.errno in (48, 98):  # EADDRINUSE (mac/linux)
            print(f"port {port} already in use", flush=True)
            return 5
        raise
    except KeyboardInterrupt:
        pass
    return 0
