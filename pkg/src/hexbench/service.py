"""Local studio service: one live session behind a binary frame protocol.

Transport: loopback TCP, length-prefixed frames. Each frame is

    uint32 BE total payload length
    uint32 BE header length | header JSON (utf-8) | concatenated buffers

where the header's "buffers" list describes the binary tail as
{name, dtype, shape} entries; geometry travels as little-endian float32
(connectivity as int32) while the session keeps float64 server-side.

After the version handshake the client sends requests and receives exactly
one response per request id, interleaved with ordered events: per-step
progress scalars, throttled state-delta frames (at most 10 geometry
snapshots per second plus a final one), and warnings. Mutations during an
optimize run answer "busy" except weight updates and cancel, which always
apply; weight changes take effect on the next step of the running loop.
"""

from __future__ import annotations

import hashlib
import json
import queue
import socket
import struct
import threading
import time

import numpy as np

from . import pipeline, polycube, voxelize
from .config import PipelineConfig
from .quality import CONSTRAINED, FIXED, FREE, filter_elements
from .session import Session

PROTOCOL_VERSION = 1
GEOMETRY_SNAPSHOT_HZ = 10.0

_F4, _I4 = "<f4", "<i4"


class ProtocolError(Exception):
    pass


def encode_frame(header: dict, buffers: dict[str, np.ndarray] | None = None) -> bytes:
    buffers = buffers or {}
    descr = []
    blobs = []
    for name, arr in buffers.items():
        arr = np.asarray(arr)
        dtype = _I4 if arr.dtype.kind in "iub" else _F4
        data = np.ascontiguousarray(arr).astype(dtype).tobytes()
        descr.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        blobs.append(data)
    header = dict(header)
    header["buffers"] = descr
    head = json.dumps(header, sort_keys=True).encode()
    payload = struct.pack(">I", len(head)) + head + b"".join(blobs)
    return struct.pack(">I", len(payload)) + payload


def decode_frame(payload: bytes) -> tuple[dict, dict[str, tuple[str, list, bytes]]]:
    if len(payload) < 4:
        raise ProtocolError("short frame")
    head_len = struct.unpack(">I", payload[:4])[0]
    header = json.loads(payload[4: 4 + head_len])
    offset = 4 + head_len
    buffers = {}
    for entry in header.get("buffers", []):
        n = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        size = n * 4
        data = payload[offset: offset + size]
        if len(data) != size:
            raise ProtocolError(f"buffer '{entry['name']}' truncated")
        buffers[entry["name"]] = (entry["dtype"], entry["shape"], data)
        offset += size
    return header, buffers


def read_frame(sock: socket.socket) -> tuple[dict, dict]:
    raw_len = _read_exact(sock, 4)
    if raw_len is None:
        raise ConnectionError("peer closed")
    (length,) = struct.unpack(">I", raw_len)
    payload = _read_exact(sock, length)
    if payload is None:
        raise ConnectionError("peer closed mid-frame")
    return decode_frame(payload)


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    remaining = n
    while remaining:
        data = sock.recv(remaining)
        if not data:
            return None
        chunks.append(data)
        remaining -= len(data)
    return b"".join(chunks)


def state_checksum(meta: dict, buffers: dict[str, tuple[str, list, bytes]]) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(meta, sort_keys=True, separators=(",", ":")).encode())
    for name in sorted(buffers):
        dtype, shape, data = buffers[name]
        h.update(name.encode())
        h.update(dtype.encode())
        h.update(json.dumps(list(shape)).encode())
        h.update(data)
    return h.hexdigest()


def _wire_buffers(arrays: dict[str, np.ndarray]) -> dict[str, tuple[str, list, bytes]]:
    out = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = _I4 if arr.dtype.kind in "iub" else _F4
        out[name] = (dtype, list(arr.shape),
                     np.ascontiguousarray(arr).astype(dtype).tobytes())
    return out


class StudioServer:
    """Owns one Session; serves a single UI client on a loopback socket."""

    def __init__(self, session: Session, config: PipelineConfig | None = None,
                 host: str = "127.0.0.1", port: int = 0):
        self.session = session
        self.config = config or PipelineConfig()
        self._listener = socket.create_server((host, port))
        self.host, self.port = self._listener.getsockname()[:2]
        self._outbox: queue.Queue = queue.Queue()
        self._cancel = threading.Event()
        self._running_stage: str | None = None
        self._worker: threading.Thread | None = None
        self._state_lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._last_keys: set[str] = set()

    # -- lifecycle --------------------------------------------------------

    def start(self) -> "StudioServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        while not self._stop.is_set():
            try:
                self._listener.settimeout(0.2)
                client, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            try:
                self._serve_client(client)
            except (ConnectionError, ProtocolError):
                pass
            finally:
                client.close()

    def close(self) -> None:
        self._stop.set()
        self._cancel.set()
        if self._worker is not None and self._worker.is_alive():
            self._worker.join(timeout=10)
        self._listener.close()
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout=5)

    # -- client loop ------------------------------------------------------

    def _serve_client(self, client: socket.socket) -> None:
        self._outbox = queue.Queue()
        send_stop = threading.Event()
        sender = threading.Thread(
            target=self._send_loop, args=(client, send_stop), daemon=True)
        sender.start()
        try:
            self._emit({"type": "hello", "protocol_version": PROTOCOL_VERSION})
            header, _ = read_frame(client)
            if header.get("type") != "hello" or \
                    header.get("protocol_version") != PROTOCOL_VERSION:
                self._emit({"type": "event", "event": "warning",
                            "payload": {"message": "protocol version mismatch"}})
                return
            while not self._stop.is_set():
                header, buffers = read_frame(client)
                self._dispatch(header, buffers)
        finally:
            send_stop.set()
            sender.join(timeout=5)

    def _send_loop(self, client: socket.socket, stop: threading.Event) -> None:
        while not stop.is_set() or not self._outbox.empty():
            try:
                frame = self._outbox.get(timeout=0.1)
            except queue.Empty:
                continue
            try:
                client.sendall(frame)
            except OSError:
                return

    def _emit(self, header: dict, buffers: dict | None = None) -> None:
        self._outbox.put(encode_frame(header, buffers))

    def _respond(self, request_id, status: str, payload: dict | None = None,
                 buffers: dict | None = None, error: str | None = None) -> None:
        header = {"type": "response", "id": request_id, "status": status}
        if payload is not None:
            header["payload"] = payload
        if error is not None:
            header["error"] = error
        self._emit(header, buffers)

    # -- state encoding ----------------------------------------------------

    def _state_arrays(self) -> dict[str, np.ndarray]:
        s = self.session
        arrays: dict[str, np.ndarray] = {}
        if s.input_mesh is not None:
            surf = s.input_mesh.boundary()
            arrays["input_surface_points"] = surf.points
            arrays["input_surface_faces"] = surf.faces
        if s.deform_state is not None:
            arrays["deform_positions"] = s.deform_state.positions
        if s.polycube is not None and len(s.polycube):
            arrays["cuboid_centers"] = s.polycube.centers()
            arrays["cuboid_half_extents"] = s.polycube.half_extents()
            arrays["cuboid_locked"] = s.polycube.locked_mask().astype(np.int32)
        if s.voxel_grid is not None:
            arrays["voxel_cells"] = s.voxel_grid.sorted_cells()
        if s.polycube_hex is not None:
            arrays["hex_cells"] = s.polycube_hex.hexes
            surf = s.polycube_hex.boundary()
            arrays["hex_surface_quads"] = surf.faces
            arrays["hex_surface_vertex_map"] = surf.vertex_map
            try:
                arrays["hex_points"] = pipeline.final_positions(s)
            except Exception:
                arrays["hex_points"] = s.polycube_hex.points
        if s.landmarks.pins:
            arrays["landmark_ids"] = s.landmarks.ids()
            arrays["landmark_positions"] = s.landmarks.positions()
        return arrays

    def _state_meta(self) -> dict:
        s = self.session
        import dataclasses

        meta = {
            "stage": s.stage,
            "seed": s.seed,
            "surface_mode": self.config.quality.mode,
            "weights": {
                "deform": dataclasses.asdict(self.config.deform),
                "polycube": dataclasses.asdict(self.config.polycube),
                "pullback": dataclasses.asdict(self.config.pullback),
                "quality": dataclasses.asdict(self.config.quality),
            },
        }
        if s.voxel_grid is not None:
            meta["voxel_cell_size"] = s.voxel_grid.cell_size
            meta["voxel_origin"] = s.voxel_grid.origin.tolist()
        return meta

    def _full_state(self):
        with self._state_lock:
            arrays = self._state_arrays()
            meta = self._state_meta()
        wire = _wire_buffers(arrays)
        checksum = state_checksum(meta, wire)
        return meta, arrays, checksum

    def _send_delta(self, changed_keys=None) -> None:
        meta, arrays, checksum = self._full_state()
        removed = sorted(self._last_keys - set(arrays))
        self._last_keys = set(arrays)
        if changed_keys is not None:
            arrays = {k: v for k, v in arrays.items() if k in changed_keys}
        self._emit(
            {"type": "event", "event": "state-delta",
             "payload": {"meta": meta, "checksum": checksum,
                         "removed": removed}},
            arrays,
        )

    # -- dispatch -----------------------------------------------------------

    def _dispatch(self, header: dict, buffers: dict) -> None:
        if header.get("type") != "request":
            return
        rid = header.get("id")
        command = header.get("command")
        params = header.get("params", {})
        busy = self._worker is not None and self._worker.is_alive()
        try:
            if command == "get-state":
                if busy:
                    self._respond(rid, "busy")
                    return
                meta, arrays, checksum = self._full_state()
                self._last_keys = set(arrays)
                self._respond(rid, "ok",
                              payload={"meta": meta, "checksum": checksum},
                              buffers=arrays)
            elif command == "set-weights":
                self._set_weights(params)
                self._respond(rid, "ok")
                if not busy:
                    self._send_delta(changed_keys=set())
            elif command == "optimize-cancel":
                self._cancel.set()
                self._respond(rid, "ok")
            elif command == "optimize-start":
                if busy:
                    self._respond(rid, "busy")
                    return
                stage = params.get("stage")
                steps = params.get("steps")
                self._start_optimize(stage, steps)
                self._respond(rid, "ok", payload={"stage": stage})
            elif command == "mutate":
                if busy:
                    self._respond(rid, "busy")
                    return
                changed = self._mutate(params, buffers)
                self._respond(rid, "ok")
                self._send_delta(changed_keys=changed)
            elif command == "query":
                if busy:
                    self._respond(rid, "busy")
                    return
                self._respond(rid, "ok", payload=self._query(params))
            else:
                self._respond(rid, "error", error=f"unknown command: {command}")
        except Exception as exc:  # surface errors to the client, keep serving
            self._respond(rid, "error", error=f"{type(exc).__name__}: {exc}")

    def _set_weights(self, params: dict) -> None:
        from .config import apply_setting

        for key, value in params.get("values", {}).items():
            apply_setting(self.config, key, str(value))
        # Propagate to live stage states so a running loop sees the change.
        s = self.session
        if s.deform_state is not None:
            s.deform_state.weights = self.config.deform.weights()
        if s.pullback_state is not None:
            s.pullback_state.weights = self.config.pullback.weights()
        s.quality_weights = self.config.quality.weights()

    def _mutate(self, params: dict, buffers: dict) -> set:
        action = params.get("action")
        s = self.session
        cuboid_keys = {"cuboid_centers", "cuboid_half_extents", "cuboid_locked"}
        with self._state_lock:
            if action == "cuboid-add":
                if s.polycube is None:
                    s.polycube = polycube.PolyCube()
                polycube.add_cuboid(s.polycube, polycube.Cuboid(
                    params["center"], params["half_extents"]))
                return cuboid_keys
            if action == "cuboid-suggest-add":
                cub = polycube.suggest_add(
                    s.polycube or polycube.PolyCube(), s.deformed_mesh(),
                    mode=params.get("mode", "volume"))
                polycube.add_cuboid(s.polycube, cub)
                return cuboid_keys
            if action == "cuboid-subtract":
                region = polycube.Cuboid(params["center"], params["half_extents"])
                s.polycube = polycube.apply_subtract(s.polycube, region)
                return cuboid_keys
            if action == "cuboid-remove":
                polycube.remove_cuboid(s.polycube, params["id"])
                return cuboid_keys
            if action == "cuboid-duplicate":
                polycube.duplicate_cuboid(s.polycube, params["id"])
                return cuboid_keys
            if action == "cuboid-move":
                polycube.move_cuboid(s.polycube, params["id"], params["center"])
                return cuboid_keys
            if action == "cuboid-resize":
                polycube.resize_cuboid(s.polycube, params["id"],
                                       params["half_extents"])
                return cuboid_keys
            if action == "cuboid-lock":
                polycube.lock_cuboid(s.polycube, params["id"],
                                     params.get("locked", True))
                return cuboid_keys
            if action == "cuboid-snap":
                polycube.sticky_snap(s.polycube, params["id"], params["tolerance"])
                return cuboid_keys
            if action == "voxel-edit":
                target = params["target"]
                if isinstance(target, dict):
                    target = voxelize.Layer(
                        axis=target["axis"], index=target["index"],
                        region=tuple(map(tuple, target["region"]))
                        if target.get("region") else None)
                else:
                    target = tuple(target)
                voxelize.edit_voxels(s.voxel_grid, params["op"], target)
                s.polycube_hex = None
                return {"voxel_cells"}
            if action == "voxel-undo":
                voxelize.undo_edit(s.voxel_grid)
                s.polycube_hex = None
                return {"voxel_cells"}
            if action == "landmark-set":
                s.landmarks.set(params["vertex_id"], params["position"])
                return {"landmark_ids", "landmark_positions"}
            if action == "landmark-remove":
                s.landmarks.remove(params["vertex_id"])
                return {"landmark_ids", "landmark_positions"}
            if action == "landmark-clear":
                s.landmarks.clear()
                return {"landmark_ids", "landmark_positions"}
            if action == "surface-mode":
                mode = params["mode"]
                if mode not in (FREE, CONSTRAINED, FIXED):
                    raise ValueError(f"unknown surface mode {mode}")
                self.config.quality.mode = mode
                s.surface_mode = mode
                return set()
        raise ValueError(f"unknown mutate action: {action}")

    def _query(self, params: dict) -> dict:
        what = params.get("what")
        s = self.session
        if what == "filter":
            plane = params.get("plane")
            if plane is not None:
                plane = (plane["origin"], plane["normal"])
            ids = filter_elements(
                s.polycube_hex, positions=pipeline.final_positions(s),
                plane=plane, quality_threshold=params.get("quality_threshold"))
            return {"ids": ids.tolist()}
        if what == "report":
            report = pipeline.run_report(self.session, self.config)
            return report.to_dict()
        raise ValueError(f"unknown query: {what}")

    # -- optimize worker ----------------------------------------------------

    def _start_optimize(self, stage: str, steps: int | None) -> None:
        runners = {
            "deform": lambda cb: pipeline.run_deform(
                self.session, self.config, n_steps=steps, callback=cb),
            "polycube": lambda cb: pipeline.reoptimize_polycube(
                self.session, self.config, callback=cb, n_steps=steps),
            "pullback": lambda cb: pipeline.run_pullback(
                self.session, self.config, callback=cb),
            "quality": lambda cb: pipeline.run_quality(
                self.session, self.config, callback=cb, n_steps=steps),
        }
        if stage not in runners:
            raise ValueError(f"unknown optimize stage: {stage}")
        self._cancel.clear()
        self._worker = threading.Thread(
            target=self._optimize_body, args=(stage, runners[stage]), daemon=True)
        self._worker.start()

    def _optimize_body(self, stage: str, runner) -> None:
        last_snapshot = [0.0]
        steps_run = [0]

        def callback(step, state, report):
            steps_run[0] = step + 1
            self._emit({"type": "event", "event": "progress",
                        "payload": {"stage": stage, "step": step,
                                    "terms": report.terms,
                                    "total": report.total}})
            now = time.monotonic()
            if now - last_snapshot[0] >= 1.0 / GEOMETRY_SNAPSHOT_HZ:
                last_snapshot[0] = now
                self._send_delta()
            return self._cancel.is_set()

        cancelled = False
        error = None
        try:
            runner(callback)
            cancelled = self._cancel.is_set()
        except Exception as exc:
            error = f"{type(exc).__name__}: {exc}"
        self._send_delta()
        payload = {"stage": stage, "steps_run": steps_run[0], "cancelled": cancelled}
        if error:
            payload["error"] = error
        self._emit({"type": "event", "event": "optimize-done", "payload": payload})


def serve(session: Session, config: PipelineConfig | None = None,
          host: str = "127.0.0.1", port: int = 0) -> StudioServer:
    """Start a studio server for one session; returns the running server."""
    return StudioServer(session, config, host, port).start()
