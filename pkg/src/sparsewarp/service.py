"""HTTP session server for interactive registration refinement.

A session holds a registered pair plus the finest-level attention state, so a
user correspondence becomes a localized kernel update instead of a rerun.
Slices are served as 8-bit PNGs; correspondences arrive in world millimetres
and are converted on the fixed grid. Sessions live in process memory, one
writer at a time each; the correspondence log replays deterministically.
"""

from __future__ import annotations

import io as _stdio
import secrets
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.encoders import jsonable_encoder
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel

from .errors import InvalidInputError
from .features import encode
from .io import field_bytes, load_checkpoint, mm_to_voxel, read_landmarks, read_volume, voxel_to_mm
from .kernel.field import AttentionStore, confidence_map, evaluate_field, query_encodings
from .kernel.model import KernelModel
from .kernel.refine import KernelState
from .metrics import tre, warp_landmarks
from .pipeline import RegistrationConfig, RegistrationResult, register
from .volume import DisplacementField, Volume3, sample_channels, warp

_AXES = {"z": 0, "y": 1, "x": 2}
_LAYERS = ("fixed", "moving", "warped", "confidence", "checkerboard")
_CHECKER_TILE = 8

# dark-to-bright ramp for the confidence palette (positions, rgb anchors)
_PALETTE_STOPS = ((0.00, (0, 0, 4)), (0.25, (87, 16, 110)), (0.50, (188, 55, 84)),
                  (0.75, (249, 142, 9)), (1.00, (252, 255, 164)))


def _palette() -> list:
    xs = [s[0] for s in _PALETTE_STOPS]
    out = []
    for c in range(3):
        ys = [s[1][c] for s in _PALETTE_STOPS]
        out.append(np.interp(np.linspace(0.0, 1.0, 256), xs, ys))
    return np.stack(out, axis=1).astype(np.uint8).reshape(-1).tolist()


_PALETTE = _palette()


class _RWLock:
    """Readers share; one writer at a time, serialized against readers."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if self._readers == 0:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            if self._writer:
                raise HTTPException(409, "another update is in progress")
            self._writer = True
            while self._readers:
                self._cond.wait()
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


def _copy_store(st: AttentionStore) -> AttentionStore:
    return replace(st, queries=st.queries.copy(), idx=st.idx.copy(), dist=st.dist.copy(),
                   scores=st.scores.copy(), weights=st.weights.copy(), values=st.values.copy())


@dataclass
class Session:
    """One registered pair plus mutable refinement state.

    `state` wraps a copy of the base finest-level store, so undo can rebuild
    from `base` and replay the log; when the base level was gated to a zero
    residual the state starts from the user's correspondences alone.
    """

    id: str
    fixed: Volume3
    moving: Volume3
    model: KernelModel
    cfg: RegistrationConfig
    base: RegistrationResult
    fix_feat: object
    landmarks_fixed: np.ndarray | None = None
    landmarks_moving: np.ndarray | None = None
    state: KernelState | None = None
    log: list = field(default_factory=list)
    lock: _RWLock = field(default_factory=_RWLock)
    version: int = 0
    created: float = field(default_factory=time.time)
    modified: float = field(default_factory=time.time)
    _cache: dict = field(default_factory=dict)
    # query encodings precomputed at creation when the base level was gated
    # to a zero residual, so the first correspondence stays interactive
    _query_enc: tuple | None = None

    # ------------------------------------------------------------ field

    def live_vectors(self) -> np.ndarray:
        if self.state is None:
            return self.base.field.vectors
        residual = self.state.field(self.fixed.spacing).vectors
        return (self.base.prior + residual).astype(np.float32)

    def live_field(self) -> DisplacementField:
        grid = Volume3(self.live_vectors(), self.fixed.spacing, self.fixed.origin)
        return DisplacementField(grid)

    def warped(self) -> Volume3:
        key = ("warped", self.version)
        if key not in self._cache:
            self._cache = {k: v for k, v in self._cache.items() if k[1] == self.version}
            self._cache[key] = warp(self.moving, self.live_field())
        return self._cache[key]

    def confidence(self) -> Volume3:
        key = ("confidence", self.version)
        if key not in self._cache:
            store = self.state.store if self.state is not None else self.base.store
            if store is None:
                self._cache[key] = Volume3(np.zeros((1, *self.fixed.dims), np.float32),
                                           self.fixed.spacing, self.fixed.origin)
            else:
                self._cache[key] = confidence_map(store, self.fixed.spacing)
        return self._cache[key]

    def metrics(self) -> dict | None:
        if self.landmarks_fixed is None or self.landmarks_moving is None:
            return None
        moved = warp_landmarks(self.landmarks_fixed, self.live_field())
        mean_mm, _ = tre(moved, self.landmarks_moving, self.fixed.spacing)
        return {"tre_mm": mean_mm, "landmarks": int(len(self.landmarks_fixed))}

    # ------------------------------------------------------------ refinement

    def _session_variant(self) -> str:
        return self.cfg.variant if self.cfg.variant != "tps" else "full"

    def _pair_to_residual(self, fixed_mm, moving_mm):
        """World-mm pair -> (fixed voxel point, finest-level residual displacement)."""
        fp = mm_to_voxel(np.asarray(fixed_mm, np.float64)[None],
                         self.fixed.spacing, self.fixed.origin)[0]
        mp = mm_to_voxel(np.asarray(moving_mm, np.float64)[None],
                         self.fixed.spacing, self.fixed.origin)[0]
        hi = np.asarray(self.fixed.dims, np.float64) - 1
        if np.any(fp < 0) or np.any(fp > hi):
            raise InvalidInputError(f"fixed point {fixed_mm} falls outside the volume")
        total = mp - fp
        prior_here = sample_channels(self.base.prior, fp[None])[0]
        return fp, total - prior_here

    def _apply_pair(self, fixed_mm, moving_mm) -> None:
        point, residual = self._pair_to_residual(fixed_mm, moving_mm)
        if self.state is None and self.base.store is not None:
            self.state = KernelState(self.model, self.fix_feat, self.base.observations[0],
                                     _copy_store(self.base.store))
        if self.state is None:
            # base level carried no usable store; condition on user points alone
            from .correspondence import ObservationSet

            obs = ObservationSet(point[None].astype(np.float64), residual[None].astype(np.float64),
                                 np.ones(1), 0)
            _, store = evaluate_field(obs, self.fixed.dims, self.model, self.fix_feat, 0,
                                      self._session_variant(), self.cfg.k, self.cfg.stride,
                                      query_enc=self._query_enc)
            self.state = KernelState(self.model, self.fix_feat, obs, store)
        else:
            self.state.refine(point, residual, peak=1.0)
        self.version += 1
        self.modified = time.time()

    def apply(self, fixed_mm, moving_mm) -> dict:
        before = self.live_vectors().copy()
        self._apply_pair(fixed_mm, moving_mm)
        self.log.append({"fixed_pt_mm": [float(v) for v in fixed_mm],
                         "moving_pt_mm": [float(v) for v in moving_mm]})
        after = self.live_vectors()
        changed = int(np.count_nonzero(np.abs(after - before).max(axis=0) > 1e-9))
        return {"changed_voxel_count": changed, "updated_metrics": self.metrics()}

    def undo(self) -> dict:
        if not self.log:
            raise HTTPException(400, "no correspondences to undo")
        removed = self.log.pop()
        replayed = list(self.log)
        self.log = []
        self.state = None
        self.version += 1
        self._cache = {}
        for entry in replayed:
            self._apply_pair(entry["fixed_pt_mm"], entry["moving_pt_mm"])
            self.log.append(entry)
        self.modified = time.time()
        return {"removed": removed, "remaining": len(self.log),
                "updated_metrics": self.metrics()}

    # ------------------------------------------------------------ summaries

    def summary(self) -> dict:
        out = {"id": self.id, "dims": list(self.fixed.dims),
               "spacing": list(self.fixed.spacing), "scales": self.base.scales,
               "keypoints": int(len(self.base.keypoints.positions)),
               "correspondences": len(self.log),
               "register_seconds": round(self.base.timing["total"], 3)}
        m = self.metrics()
        if m is not None:
            out["metrics"] = m
        return out


# ---------------------------------------------------------------- request bodies


class SessionConfig(BaseModel):
    variant: str | None = None
    scales: int | None = None
    stride: int | None = None
    seed: int | None = None
    radius: int | list[int] | None = None
    peak_gate: float | None = None
    peak_gate_fine: float | None = None
    k: int | None = None


class CreateSession(SessionConfig):
    moving: str
    fixed: str
    model: str | None = None
    landmarks_fixed: str | None = None
    landmarks_moving: str | None = None


class CreateSynthetic(SessionConfig):
    seed: int = 0
    dims: list[int] = [48, 64, 64]
    magnitude: float = 8.0
    landmarks: int = 24
    model: str | None = None


class Correspondence(BaseModel):
    fixed_pt_mm: list[float]
    moving_pt_mm: list[float]


# ---------------------------------------------------------------- slices


def _to_u8(sl: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi - lo < 1e-12:
        return np.zeros(sl.shape, np.uint8)
    return (np.clip((sl - lo) / (hi - lo), 0.0, 1.0) * 255.0).astype(np.uint8)


def _take(vol: Volume3, axis: int, index: int) -> np.ndarray:
    return np.take(vol.data[0] if vol.channels == 1 else vol.data, index, axis=axis)


def _checkerboard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    yy, xx = np.indices(a.shape)
    tiles = ((yy // _CHECKER_TILE) + (xx // _CHECKER_TILE)) % 2
    return np.where(tiles == 0, a, b)


def _slice_png(session: Session, axis: str, index: int, layer: str) -> bytes:
    ax = _AXES[axis]
    size = session.fixed.dims[ax]
    if not 0 <= index < size:
        raise HTTPException(400, f"index {index} out of range for axis {axis} (size {size})")
    flo, fhi = float(session.fixed.data.min()), float(session.fixed.data.max())
    if layer == "fixed":
        img = Image.fromarray(_to_u8(_take(session.fixed, ax, index), flo, fhi), "L")
    elif layer == "moving":
        m = session.moving
        img = Image.fromarray(_to_u8(_take(m, ax, index), float(m.data.min()), float(m.data.max())), "L")
    elif layer == "warped":
        img = Image.fromarray(_to_u8(_take(session.warped(), ax, index), flo, fhi), "L")
    elif layer == "checkerboard":
        a = _to_u8(_take(session.fixed, ax, index), flo, fhi)
        b = _to_u8(_take(session.warped(), ax, index), flo, fhi)
        img = Image.fromarray(_checkerboard(a, b), "L")
    else:
        conf = _take(session.confidence(), ax, index)  # already in [0, 1]
        img = Image.fromarray((np.clip(conf, 0.0, 1.0) * 255.0).astype(np.uint8), "P")
        img.putpalette(_PALETTE)
    buf = _stdio.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------- app factory


def create_app(model_path: str | None = None, default_model: KernelModel | None = None) -> FastAPI:
    """Build the API around an in-memory session registry.

    model_path (or default_model) supplies the checkpoint used when a session
    request does not name one; otherwise a freshly initialized model is used.
    """

    app = FastAPI(title="sparsewarp session service")
    sessions: dict = {}
    app.state.sessions = sessions
    registry_lock = threading.Lock()
    if model_path is not None:
        default_model, _ = load_checkpoint(model_path)

    @app.exception_handler(RequestValidationError)
    def _bad_body(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": jsonable_encoder(exc.errors())})

    @app.exception_handler(InvalidInputError)
    def _bad_input(request: Request, exc: InvalidInputError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    def _get(sid: str) -> Session:
        try:
            return sessions[sid]
        except KeyError:
            raise HTTPException(404, f"unknown session {sid}")

    def _config(body: SessionConfig) -> RegistrationConfig:
        fields = {}
        for name in ("variant", "scales", "stride", "seed", "peak_gate", "peak_gate_fine", "k"):
            v = getattr(body, name)
            if v is not None:
                fields[name] = v
        if body.radius is not None:
            fields["radius"] = tuple(body.radius) if isinstance(body.radius, list) else body.radius
        # interactive sessions favor update latency over grid density
        fields.setdefault("stride", 2)
        return RegistrationConfig(**fields)

    def _model_for(body) -> KernelModel:
        if body.model is not None:
            model, _ = load_checkpoint(body.model)
            return model
        if default_model is not None:
            return default_model
        return KernelModel.build(seed=0)

    def _start(fixed: Volume3, moving: Volume3, model: KernelModel, cfg: RegistrationConfig,
               lms_f=None, lms_m=None) -> Session:
        result = register(moving, fixed, model, cfg)
        fix_feat = encode(fixed, model.store, result.scales, model.plan)
        if cfg.feature_norm:
            from .pipeline import _unit_features

            fix_feat = _unit_features(fix_feat)
        sid = secrets.token_hex(8)
        session = Session(sid, fixed, moving, model, cfg, result, fix_feat,
                          landmarks_fixed=lms_f, landmarks_moving=lms_m)
        if result.store is None:
            variant = session._session_variant()
            session._query_enc = query_encodings(fixed.dims, model, fix_feat, 0,
                                                 variant, cfg.stride)
        with registry_lock:
            sessions[sid] = session
        return session

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSession):
        try:
            moving = read_volume(body.moving)
            fixed = read_volume(body.fixed)
        except FileNotFoundError as e:
            raise HTTPException(400, f"cannot read volume: {e}")
        lms_f = lms_m = None
        if body.landmarks_fixed:
            lms_f = read_landmarks(body.landmarks_fixed, fixed.spacing, fixed.origin)
            lms_m = read_landmarks(body.landmarks_moving or body.landmarks_fixed,
                                   fixed.spacing, fixed.origin)
        session = _start(fixed, moving, _model_for(body), _config(body), lms_f, lms_m)
        return {"id": session.id, "summary": session.summary()}

    @app.post("/sessions/synthetic", status_code=201)
    def create_synthetic(body: CreateSynthetic):
        from .synth import make_case

        case = make_case(body.seed, dims=tuple(body.dims), magnitude=body.magnitude,
                         n_landmarks=body.landmarks)
        session = _start(case.fixed, case.moving, _model_for(body), _config(body),
                         case.landmarks_fixed, case.landmarks_moving)
        return {"id": session.id, "summary": session.summary()}

    @app.get("/sessions/{sid}")
    def session_summary(sid: str):
        s = _get(sid)
        with s.lock.read():
            return s.summary()

    @app.get("/sessions/{sid}/slice")
    def get_slice(sid: str, axis: str = "z", index: int = 0, layer: str = "fixed"):
        if axis not in _AXES:
            raise HTTPException(400, f"axis must be one of {sorted(_AXES)}")
        if layer not in _LAYERS:
            raise HTTPException(400, f"layer must be one of {sorted(_LAYERS)}")
        s = _get(sid)
        with s.lock.read():
            png = _slice_png(s, axis, index, layer)
        return Response(content=png, media_type="image/png")

    @app.post("/sessions/{sid}/correspondences")
    def add_correspondence(sid: str, body: Correspondence):
        if len(body.fixed_pt_mm) != 3 or len(body.moving_pt_mm) != 3:
            raise HTTPException(400, "points must have three mm coordinates")
        s = _get(sid)
        t0 = time.perf_counter()
        with s.lock.write():
            out = s.apply(body.fixed_pt_mm, body.moving_pt_mm)
        out["latency_ms"] = round((time.perf_counter() - t0) * 1e3, 2)
        return out

    @app.delete("/sessions/{sid}/correspondences/last")
    def undo_correspondence(sid: str):
        s = _get(sid)
        with s.lock.write():
            return s.undo()

    @app.get("/sessions/{sid}/field")
    def get_field(sid: str):
        s = _get(sid)
        with s.lock.read():
            payload = field_bytes(s.live_field())
        return Response(content=payload, media_type="application/octet-stream",
                        headers={"Content-Disposition": 'attachment; filename="field.nii"'})

    @app.get("/sessions/{sid}/keypoints")
    def get_keypoints(sid: str):
        s = _get(sid)
        with s.lock.read():
            pos = s.base.keypoints.positions.astype(np.float64)
            disp = sample_channels(s.live_vectors(), pos)
            mm = voxel_to_mm(pos, s.fixed.spacing, s.fixed.origin)
        return {"keypoints": [
            {"voxel": p.tolist(), "mm": m.tolist(), "displacement_voxel": d.tolist(),
             "score": float(sc)}
            for p, m, d, sc in zip(pos, mm, disp, s.base.keypoints.scores)
        ]}

    return app
