import asyncio
import base64
import json
import math

import aiohttp
import numpy as np
import pytest
from aiohttp import web

from rvcsim.engine import SimConfig, SimulationEngine
from rvcsim.eye_sim import Scenario
from rvcsim.session import SessionService
from rvcsim.telemetry import TrialLog, verify_replay


def fast_scenario_dict():
    """Small globe and a fat vessel: a service-driven trial finishes in tens
    of simulated seconds and tolerates frame-quantized input timing."""
    r = 3.0
    xs = np.linspace(-0.8, 0.8, 17)
    centerline = [[float(x), 0.0, -math.sqrt(r * r - x * x)] for x in xs]
    return {
        "globe_radius_mm": r,
        "vessel": {
            "centerline_mm": centerline,
            "lumen_radius_um": 300.0,
            "wall_thickness_um": 15.0,
        },
        "sclerotomy_points_mm": [[0.0, 0.0, r]],
        "puncture_speed_threshold_mm_s": 2.0,
    }


FAST_CONFIG = {"time_scale": 20.0, "infusion_duration_s": 1.0}


class ServiceFixture:
    def __init__(self):
        self.service = SessionService()

    async def __aenter__(self):
        app = self.service.make_app()
        self.runner = web.AppRunner(app)
        await self.runner.setup()
        site = web.TCPSite(self.runner, "127.0.0.1", 0)
        await site.start()
        port = self.runner.addresses[0][1]
        self.base = f"http://127.0.0.1:{port}"
        self.client = aiohttp.ClientSession()
        return self

    async def __aexit__(self, *exc):
        await self.client.close()
        await self.runner.cleanup()


def run(coro):
    return asyncio.run(coro)


async def wait_for_state(ws, predicate, timeout=20.0):
    async def loop():
        while True:
            msg = await ws.receive()
            if msg.type is not aiohttp.WSMsgType.TEXT:
                raise AssertionError(f"socket closed: {msg.type}")
            frame = json.loads(msg.data)
            if frame["type"] == "state" and predicate(frame):
                return frame
    return await asyncio.wait_for(loop(), timeout)


def test_healthz_and_create():
    async def body():
        async with ServiceFixture() as f:
            async with f.client.get(f.base + "/healthz") as resp:
                assert resp.status == 200
                assert (await resp.json())["status"] == "ok"
            async with f.client.post(f.base + "/sessions", json={"seed": 1}) as resp:
                assert resp.status == 200
                created = await resp.json()
                assert created["step"] == "navigation"
                assert created["ws_path"].endswith("/ws")
    run(body())


def test_create_rejects_malformed_scenario():
    async def body():
        async with ServiceFixture() as f:
            bad = {"scenario": {"globe_radius_mm": -1.0, "typo_field": 3}}
            async with f.client.post(f.base + "/sessions", json=bad) as resp:
                assert resp.status == 400
                data = await resp.json()
                assert any("typo_field" in p for p in data["problems"])
    run(body())


def test_key_starts_and_stops_motion():
    async def body():
        async with ServiceFixture() as f:
            async with f.client.post(f.base + "/sessions",
                                     json={"seed": 2, "config": {"time_scale": 5.0}}) as resp:
                created = await resp.json()
            async with f.client.ws_connect(f.base + created["ws_path"]) as ws:
                first = await wait_for_state(ws, lambda s: True)
                await ws.send_json({"type": "key", "key": "D", "action": "down"})
                moved = await wait_for_state(
                    ws, lambda s: s["tip"][2] < first["tip"][2] - 1e-6)
                assert np.linalg.norm(moved["tip_velocity"]) == pytest.approx(0.2, abs=1e-6)
                await ws.send_json({"type": "key", "key": "D", "action": "up"})
                stopped = await wait_for_state(
                    ws, lambda s: np.linalg.norm(s["tip_velocity"]) < 1e-9)
                assert stopped["t"] > moved["t"]
    run(body())


def test_gated_key_error_and_no_state_change():
    async def body():
        async with ServiceFixture() as f:
            async with f.client.post(f.base + "/sessions", json={"seed": 3}) as resp:
                created = await resp.json()
            sid = created["id"]
            engine = f.service.sessions[sid].engine
            async with f.client.ws_connect(f.base + created["ws_path"]) as ws:
                await wait_for_state(ws, lambda s: True)
                before = engine.q
                await ws.send_json({"type": "key", "key": "P", "action": "down"})

                async def wait_error():
                    while True:
                        msg = await ws.receive()
                        frame = json.loads(msg.data)
                        if frame["type"] == "error":
                            return frame
                frame = await asyncio.wait_for(wait_error(), 5.0)
                assert frame["code"] == "key_gated"
                await wait_for_state(ws, lambda s: True)
                assert engine.q == before
                assert not any(r.message.get("key") == "P" for r in engine.log.inputs)
    run(body())


def test_unknown_type_keeps_connection():
    async def body():
        async with ServiceFixture() as f:
            async with f.client.post(f.base + "/sessions", json={"seed": 4}) as resp:
                created = await resp.json()
            async with f.client.ws_connect(f.base + created["ws_path"]) as ws:
                await ws.send_json({"type": "wibble"})

                async def wait_error():
                    while True:
                        msg = await ws.receive()
                        frame = json.loads(msg.data)
                        if frame["type"] == "error":
                            return frame
                frame = await asyncio.wait_for(wait_error(), 5.0)
                assert frame["code"] == "unknown_type"
                # connection still streams state afterwards
                await wait_for_state(ws, lambda s: True)
    run(body())


def test_stream_rate_and_monotonicity():
    async def body():
        async with ServiceFixture() as f:
            async with f.client.post(f.base + "/sessions", json={"seed": 5}) as resp:
                created = await resp.json()
            async with f.client.ws_connect(f.base + created["ws_path"]) as ws:
                frames = []
                start = asyncio.get_running_loop().time()
                while asyncio.get_running_loop().time() - start < 1.0:
                    msg = await ws.receive()
                    frame = json.loads(msg.data)
                    if frame["type"] == "state":
                        frames.append(frame)
                assert 20 <= len(frames) <= 40  # ~30 Hz target
                ts = [fr["t"] for fr in frames]
                assert all(b > a for a, b in zip(ts[:-1], ts[1:]))
    run(body())


def test_bscan_request_returns_frame():
    async def body():
        async with ServiceFixture() as f:
            async with f.client.post(f.base + "/sessions", json={"seed": 6}) as resp:
                created = await resp.json()
            async with f.client.ws_connect(f.base + created["ws_path"]) as ws:
                await ws.send_json({"type": "request_bscan", "auto": True})

                async def wait_bscan():
                    while True:
                        msg = await ws.receive()
                        frame = json.loads(msg.data)
                        if frame["type"] == "bscan":
                            return frame
                frame = await asyncio.wait_for(wait_bscan(), 10.0)
                assert frame["w"] == 512 and frame["h"] == 256
                assert frame["pitch_um"] == pytest.approx(2.93, abs=0.01)
                raw = base64.b64decode(frame["pixels_b64"])
                assert len(raw) == 512 * 256
    run(body())


def test_two_sessions_isolated():
    async def body():
        async with ServiceFixture() as f:
            sessions = []
            for seed in (7, 8):
                async with f.client.post(f.base + "/sessions",
                                         json={"seed": seed, "config": {"time_scale": 5.0}}) as resp:
                    sessions.append(await resp.json())
            ws_a = await f.client.ws_connect(f.base + sessions[0]["ws_path"])
            ws_b = await f.client.ws_connect(f.base + sessions[1]["ws_path"])
            await ws_a.send_json({"type": "key", "key": "Left", "action": "down"})
            moved = await wait_for_state(ws_a, lambda s: abs(s["tip"][0]) > 1e-6)
            assert moved["tip"][0] < 0.0
            # B never moves while A does
            still = await wait_for_state(ws_b, lambda s: s["t"] > moved["t"] * 0.2)
            assert still["tip"][0] == 0.0
            await ws_a.close()
            await ws_b.close()
    run(body())


async def drive_trial_over_ws(f, created):
    """Complete a full trial through the wire protocol, timing off the state
    stream; returns the observed event kinds in order."""
    events = []
    async with f.client.ws_connect(f.base + created["ws_path"]) as ws:

        async def until(predicate, timeout=30.0):
            async def loop():
                while True:
                    msg = await ws.receive()
                    frame = json.loads(msg.data)
                    if frame["type"] == "event":
                        events.append((frame["kind"], frame["t"]))
                    elif frame["type"] == "state" and predicate(frame):
                        return frame
            return await asyncio.wait_for(loop(), timeout)

        await until(lambda s: True)
        await ws.send_json({"type": "key", "key": "D", "action": "down"})
        # fat vessel wall top sits ~2.7 mm deep; stop just above it
        await until(lambda s: s["tip"][2] <= -2.60)
        await ws.send_json({"type": "key", "key": "D", "action": "up"})
        await ws.send_json({"type": "confirm_contact"})
        await until(lambda s: s["step"] == "puncture")
        await ws.send_json({"type": "key", "key": "P", "action": "down"})
        await ws.send_json({"type": "key", "key": "P", "action": "up"})
        await until(lambda s: s["step"] == "verify_retract")
        await ws.send_json({"type": "request_bscan", "auto": True})
        await ws.send_json({"type": "declare_verification", "passed": True})
        await until(lambda s: s["step"] == "infusion")
        await ws.send_json({"type": "begin_infusion"})
        await until(lambda s: s["step"] == "retraction")
        await ws.send_json({"type": "key", "key": "R", "action": "down"})
        await until(lambda s: s["step"] == "done", timeout=60.0)
    return events


def test_full_trial_with_log_fetch_and_replay():
    async def body():
        async with ServiceFixture() as f:
            payload = {"scenario": fast_scenario_dict(), "config": FAST_CONFIG, "seed": 9}
            async with f.client.post(f.base + "/sessions", json=payload) as resp:
                created = await resp.json()
            sid = created["id"]
            # log is refused while the trial is live
            async with f.client.get(f.base + f"/sessions/{sid}/log") as resp:
                assert resp.status == 409
                assert (await resp.json())["error"] == "trial_live"

            events = await drive_trial_over_ws(f, created)
            kinds = [k for k, _ in events]
            assert "puncture_pulse_done" in kinds
            assert "verification_passed" in kinds
            assert "infusion_complete" in kinds
            assert kinds[-1] == "needle_exited"

            async with f.client.get(f.base + f"/sessions/{sid}/log") as resp:
                assert resp.status == 200
                blob = await resp.read()
            assert blob[:4] == b"RVCL"
            async with f.client.get(f.base + f"/sessions/{sid}/log") as resp:
                blob2 = await resp.read()
            assert blob2 == blob  # subsequent fetches identical

            log = TrialLog.from_bytes(blob)
            assert log.outcome.success is True
            ok, div = verify_replay(log)
            assert ok, div

            # every streamed event frame matches a log entry with an equal
            # timestamp, in order (the stream may have missed events emitted
            # before the socket connected, so compare as a suffix)
            logged = [(e.kind.value, e.t) for e in log.events]
            assert logged[-len(events):] == events
    run(body())


def test_service_and_direct_engine_produce_identical_logs():
    async def body():
        async with ServiceFixture() as f:
            payload = {"scenario": fast_scenario_dict(), "config": FAST_CONFIG, "seed": 10}
            async with f.client.post(f.base + "/sessions", json=payload) as resp:
                created = await resp.json()
            await drive_trial_over_ws(f, created)
            sid = created["id"]
            async with f.client.get(f.base + f"/sessions/{sid}/log") as resp:
                blob = await resp.read()
        service_log = TrialLog.from_bytes(blob)

        # same inputs through the direct (CLI) path: identical bytes
        scenario = Scenario.from_dict(service_log.header["scenario"])
        config = SimConfig.from_dict(service_log.header["config"])
        engine = SimulationEngine(scenario, config, seed=service_log.header["seed"])
        by_tick = {}
        for rec in service_log.inputs:
            by_tick.setdefault(rec.tick, []).append(rec.message)
        for tick in range(1, len(service_log.samples) + 1):
            for message in by_tick.get(tick, ()):
                engine.ingest(message)
            engine.tick()
        assert engine.log.to_bytes() == blob
    run(body())
