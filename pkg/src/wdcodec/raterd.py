"""HTTP service for two-alternative forced-choice rating studies.

Serves tasks (original crop + two reconstruction crops, sides shuffled,
arm identities never exposed), records submitted choices durably to an
append-only JSONL log before acknowledging, and reports live scores with
bootstrap intervals. All study-state mutation goes through one lock;
score reads use an immutable cached snapshot.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles

from .evalstats import (
    ANCHOR,
    ORIGINAL_ARM,
    EloState,
    MethodArm,
    RatingRecord,
    fit_elo,
    golden_mix,
    select_pair,
)
from .imgsig import read_image, write_image, PixelImage

__all__ = ["StudyConfig", "Study", "create_app", "load_study_config", "run_server"]

TASK_EXPIRY_SECONDS = 600
REFIT_INTERVAL = 50
BOOTSTRAP_DEFAULT = 1000


@dataclass(frozen=True)
class StudyConfig:
    arms: tuple[MethodArm, ...]
    images: tuple[str, ...]          # original image paths
    originals_dir: str = ""
    crop_w: int = 512
    crop_h: int = 432
    golden_rate: float = 0.10
    data_dir: str = "study-data"
    listen: str = "127.0.0.1:8765"
    seed: int = 0
    bootstrap: int = BOOTSTRAP_DEFAULT

    def __post_init__(self):
        if not (0.0 <= self.golden_rate <= 1.0):
            raise ValueError(f"golden rate must lie in [0, 1], got {self.golden_rate}")
        ids = [a.id for a in self.arms]
        if len(set(ids)) != len(ids):
            raise ValueError("arm ids must be unique")


def load_study_config(path) -> StudyConfig:
    """key=value study file; repeated keys: arm = id|label|bpp|dir, image = path."""
    arms, images, kv = [], [], {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "arm":
            parts = value.split("|")
            if len(parts) != 4:
                raise ValueError(f"arm line needs id|label|bpp|dir, got {value!r}")
            arms.append(MethodArm(parts[0], parts[1], float(parts[2]), parts[3]))
        elif key == "image":
            images.append(value)
        else:
            kv[key] = value
    return StudyConfig(
        arms=tuple(arms),
        images=tuple(images),
        originals_dir=kv.get("originals_dir", ""),
        crop_w=int(kv.get("crop_w", 512)),
        crop_h=int(kv.get("crop_h", 432)),
        golden_rate=float(kv.get("golden_rate", 0.10)),
        data_dir=kv.get("data_dir", "study-data"),
        listen=os.environ.get("WDCODEC_LISTEN", kv.get("listen", "127.0.0.1:8765")),
        seed=int(kv.get("seed", 0)),
        bootstrap=int(kv.get("bootstrap", BOOTSTRAP_DEFAULT)),
    )


@dataclass
class _Task:
    id: str
    image: str
    crop: tuple[int, int]
    arm1: MethodArm
    arm2: MethodArm
    golden: bool
    issued_at: float
    done: bool = False


class Study:
    """All mutable study state behind one lock."""

    def __init__(self, cfg: StudyConfig):
        if len(cfg.arms) < 2:
            raise ValueError("study needs at least two arms")
        if not cfg.images:
            raise ValueError("study needs at least one image")
        self.cfg = cfg
        self.lock = threading.Lock()
        self.rng = random.Random(cfg.seed)
        self.tasks: dict[str, _Task] = {}
        self.ratings: list[RatingRecord] = []
        self._elo: EloState | None = None
        self._intervals: dict[str, tuple[float, float]] = {}
        self._ratings_at_fit = 0
        self.data_dir = Path(cfg.data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        (self.data_dir / "crops").mkdir(exist_ok=True)
        self.log_path = self.data_dir / "ratings.jsonl"
        if self.log_path.exists():
            for line in self.log_path.read_text().splitlines():
                if line.strip():
                    self.ratings.append(RatingRecord.from_json(line))
        self._log = open(self.log_path, "a")
        self._dims: dict[str, tuple[int, int]] = {}

    # -- geometry ------------------------------------------------------------

    def _image_dims(self, image: str) -> tuple[int, int]:
        if image not in self._dims:
            img = read_image(self._original_path(image))
            self._dims[image] = (img.h, img.w)
        return self._dims[image]

    def _original_path(self, image: str) -> Path:
        return Path(self.cfg.originals_dir) / image

    def _arm_path(self, arm: MethodArm, image: str) -> Path:
        if arm.id == ORIGINAL_ARM:
            return self._original_path(image)
        return Path(arm.recon_dir) / image

    def _crop_id(self, image: str, crop: tuple[int, int], arm: MethodArm) -> str:
        key = f"{image}|{crop[0]}|{crop[1]}|{arm.id}|{self.cfg.seed}"
        return hashlib.sha1(key.encode()).hexdigest()[:16]

    def _ensure_crop(self, image: str, crop: tuple[int, int], arm: MethodArm) -> str:
        cid = self._crop_id(image, crop, arm)
        path = self.data_dir / "crops" / f"{cid}.png"
        if not path.exists():
            src = read_image(self._arm_path(arm, image))
            y, x = crop
            sub = src.data[:, y:y + self.cfg.crop_h, x:x + self.cfg.crop_w]
            write_image(PixelImage(sub), path)
        return cid

    # -- task flow -------------------------------------------------------------

    def issue_task(self) -> dict:
        with self.lock:
            now = time.monotonic()
            for tid in [t for t, task in self.tasks.items()
                        if not task.done and now - task.issued_at > TASK_EXPIRY_SECONDS]:
                del self.tasks[tid]
            image = self.rng.choice(self.cfg.images)
            ih, iw = self._image_dims(image)
            if ih < self.cfg.crop_h or iw < self.cfg.crop_w:
                raise ValueError(f"crop {self.cfg.crop_w}x{self.cfg.crop_h} does not fit image {image}")
            crop = (self.rng.randint(0, ih - self.cfg.crop_h), self.rng.randint(0, iw - self.cfg.crop_w))
            pair = select_pair(self._fit_locked(), list(self.cfg.arms))
            a, b, golden = golden_mix(pair, self.cfg.golden_rate, self.rng)
            if self.rng.random() < 0.5:
                a, b = b, a
            task = _Task(
                id=uuid.uuid4().hex, image=image, crop=crop,
                arm1=a, arm2=b, golden=golden, issued_at=now,
            )
            self.tasks[task.id] = task
            payload = {
                "task_id": task.id,
                "original": self._ensure_crop(image, crop, MethodArm(ORIGINAL_ARM)),
                "side1": self._ensure_crop(image, crop, a),
                "side2": self._ensure_crop(image, crop, b),
                "nonce": self.rng.getrandbits(32),
            }
            return payload

    def submit(self, task_id: str, chosen: int, rater: str) -> tuple[int, dict]:
        with self.lock:
            task = self.tasks.get(task_id)
            if task is None:
                return 410, {"error": "unknown or expired task"}
            if task.done:
                return 409, {"error": "task already rated"}
            if time.monotonic() - task.issued_at > TASK_EXPIRY_SECONDS:
                del self.tasks[task_id]
                return 410, {"error": "unknown or expired task"}
            rec = RatingRecord(
                rater=rater, image=task.image, crop=task.crop,
                arm_a=task.arm1.id, arm_b=task.arm2.id,
                chosen="A" if chosen == 1 else "B",
                golden=task.golden,
                timestamp=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            )
            self._log.write(rec.to_json() + "\n")
            self._log.flush()
            os.fsync(self._log.fileno())
            task.done = True
            self.ratings.append(rec)
            return 200, {"recorded": len(self.ratings)}

    # -- scores -----------------------------------------------------------------

    def _fit_locked(self) -> EloState | None:
        real = [r for r in self.ratings if not r.golden]
        if not real:
            return None
        if self._elo is None or len(self.ratings) - self._ratings_at_fit >= REFIT_INTERVAL:
            self._elo = fit_elo(self.ratings)
            self._intervals = self._bootstrap_locked(self._elo)
            self._ratings_at_fit = len(self.ratings)
        return self._elo

    def _bootstrap_locked(self, fitted: EloState) -> dict[str, tuple[float, float]]:
        real = [r for r in self.ratings if not r.golden]
        if len(real) < 10 or self.cfg.bootstrap <= 0:
            return {}
        rng = random.Random(self.cfg.seed + len(real))
        samples: dict[str, list[float]] = {a: [] for a in fitted.scores}
        for _ in range(self.cfg.bootstrap):
            resample = [real[rng.randrange(len(real))] for _ in real]
            try:
                st = fit_elo(resample)
            except ValueError:
                continue
            for arm, sc in st.scores.items():
                samples[arm].append(sc)
        out = {}
        for arm, vals in samples.items():
            if vals:
                lo, hi = np.percentile(vals, [0.5, 99.5])
                out[arm] = (float(lo), float(hi))
        return out

    def scores(self) -> dict:
        with self.lock:
            state = self._fit_locked()
            table = []
            for arm in self.cfg.arms:
                if state is None:
                    table.append({"arm": arm.id, "label": arm.label, "bpp": arm.bpp,
                                  "elo": ANCHOR, "count": 0, "p99": None})
                else:
                    iv = self._intervals.get(arm.id)
                    table.append({
                        "arm": arm.id, "label": arm.label, "bpp": arm.bpp,
                        "elo": state.scores.get(arm.id, ANCHOR),
                        "count": state.counts.get(arm.id, 0),
                        "p99": list(iv) if iv else None,
                    })
            # golden accounting is always live, independent of the fit cache
            golden: dict[str, dict] = {}
            for rec in self.ratings:
                if not rec.golden:
                    continue
                g = golden.setdefault(rec.rater, {"asked": 0, "correct": 0})
                g["asked"] += 1
                chosen_arm = rec.arm_a if rec.chosen == "A" else rec.arm_b
                g["correct"] += int(chosen_arm == ORIGINAL_ARM)
            for g in golden.values():
                g["accuracy"] = g["correct"] / g["asked"]
            return {
                "arms": table,
                "golden_accuracy": golden,
                "ratings_total": len(self.ratings),
            }

    def crop_path(self, crop_id: str) -> Path | None:
        if not all(c in "0123456789abcdef" for c in crop_id) or len(crop_id) != 16:
            return None
        path = self.data_dir / "crops" / f"{crop_id}.png"
        return path if path.exists() else None


def create_app(study: Study, static_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="rating study service")

    @app.get("/task")
    def get_task():
        if len(study.cfg.arms) < 2:
            return JSONResponse({"error": "no arms configured"}, status_code=503)
        return study.issue_task()

    @app.post("/rating")
    async def post_rating(request: Request):
        try:
            body = await request.json()
            task_id = str(body["task_id"])
            chosen = int(body["chosen"])
            rater = str(body["rater"])
            if chosen not in (1, 2):
                raise ValueError
        except Exception:
            return JSONResponse({"error": "malformed body"}, status_code=400)
        code, payload = study.submit(task_id, chosen, rater)
        return JSONResponse(payload, status_code=code)

    @app.get("/scores")
    def get_scores():
        return study.scores()

    @app.get("/crop/{crop_id}")
    def get_crop(crop_id: str):
        path = study.crop_path(crop_id)
        if path is None:
            return JSONResponse({"error": "unknown crop"}, status_code=404)
        return FileResponse(path, media_type="image/png")

    if static_dir and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    return app


def run_server(cfg: StudyConfig, static_dir: str | None = None) -> None:
    import uvicorn

    host, _, port = cfg.listen.rpartition(":")
    app = create_app(Study(cfg), static_dir)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level="warning")
