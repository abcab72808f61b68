"""Serving layer: generation engine, run persistence, HTTP API.

The engine holds one immutable model snapshot plus a classifier and turns
a constraint set into a parsed exercise via the controlled-generation
pipeline.  Requests are independent; nothing the engine touches is
mutated after construction, so concurrent handling is safe.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping

import numpy as np

from . import __version__
from .control import (AttributeClassifier, SteeringConfig,
                      run_controlled_generation)
from .corpus import (DEFAULT_INSTRUCTION, ContentConstraints, ExerciseFormatError,
                     parse_exercise, render_prompt)
from .model import LengthOverflowError, SamplerConfig, TinyLM

logger = logging.getLogger("exgen.service")

_STEERING_FIELDS = frozenset(SteeringConfig().to_dict())


@dataclass(frozen=True)
class GenerationRequest:
    """Constraints plus optional seed and steering overrides."""

    constraints: ContentConstraints
    seed: int | None = None
    steering: Mapping[str, float] | None = None

    @classmethod
    def from_dict(cls, data: Mapping) -> "GenerationRequest":
        if "constraints" not in data:
            raise ValueError("request is missing 'constraints'")
        constraints = ContentConstraints.from_dict(dict(data["constraints"]))
        seed = data.get("seed")
        if seed is not None:
            seed = int(seed)
            if seed < 0:
                raise ValueError("seed must be >= 0")
        steering = data.get("steering")
        if steering is not None:
            unknown = set(steering) - _STEERING_FIELDS
            if unknown:
                raise ValueError(f"unknown steering fields: {sorted(unknown)}")
        return cls(constraints=constraints, seed=seed, steering=steering)


@dataclass
class GenerationResponse:
    """Parsed exercise plus the candidate panel the UI inspects.

    Exactly one candidate is flagged selected and its score is maximal.
    """

    exercise: dict | None
    raw_text: str
    parse_warning: bool
    candidates: list[dict]
    seed: int
    timing_ms: float
    steering_report: dict

    def to_dict(self) -> dict:
        return {
            "exercise": self.exercise,
            "raw_text": self.raw_text,
            "parse_warning": self.parse_warning,
            "candidates": self.candidates,
            "seed": self.seed,
            "timing_ms": self.timing_ms,
            "steering_report": self.steering_report,
        }


class GenerationEngine:
    """One immutable (model, classifier) snapshot answering requests."""

    def __init__(self, model: TinyLM, classifier: AttributeClassifier, *,
                 steering: SteeringConfig | None = None,
                 sampler: SamplerConfig | None = None,
                 instruction: str = DEFAULT_INSTRUCTION,
                 checkpoint_id: str = "unsaved"):
        self.model = model
        self.classifier = classifier
        self.steering = steering or SteeringConfig()
        self.sampler = sampler or SamplerConfig(temperature=1.0, top_k=0,
                                                max_new_tokens=160)
        self.instruction = instruction
        self.checkpoint_id = checkpoint_id

    def handle_generate(self, request: GenerationRequest) -> GenerationResponse:
        """Render the prompt, run steer-and-filter generation, parse.

        Deterministic when the request carries a seed; otherwise one is
        drawn, logged, and echoed in the response.  Output that does not
        parse as an exercise comes back as raw text with ``parse_warning``.
        """
        t0 = time.perf_counter()
        seed = request.seed
        if seed is None:
            seed = int(np.random.SeedSequence().entropy % (2 ** 63))
            logger.info("generate: drew seed %d", seed)
        steering = self.steering
        if request.steering:
            steering = replace(steering, **dict(request.steering))

        prompt = render_prompt(self.instruction, request.constraints)
        prompt_ids = self.model.vocab.tokenize(prompt)
        result = run_controlled_generation(self.model, self.classifier,
                                           prompt_ids, steering, self.sampler,
                                           seed)
        exercise: dict | None = None
        parse_warning = False
        try:
            exercise = parse_exercise(result.text).to_dict()
        except ExerciseFormatError:
            parse_warning = True
        candidates = [
            {"text": c.text, "score": result.scores[i],
             "selected": i == result.selected_index}
            for i, c in enumerate(result.candidates)
        ]
        return GenerationResponse(
            exercise=exercise,
            raw_text=result.text,
            parse_warning=parse_warning,
            candidates=candidates,
            seed=seed,
            timing_ms=round((time.perf_counter() - t0) * 1e3, 3),
            steering_report=result.report.to_dict(),
        )


# ---------------------------------------------------------------------------
# Run persistence
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def persist_run(root: str | Path, files: Mapping[str, Path | bytes], *,
                seed: int, config: Mapping | None = None) -> Path:
    """Store run artifacts under ``<root>/<timestamp>-seed<seed>``.

    ``files`` maps artifact names to source paths (copied) or raw bytes.
    A ``manifest.json`` lists every artifact with its SHA-256 and size.
    On a failed write the directory keeps a ``PARTIAL`` marker and the
    error propagates.
    """
    root = Path(root)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S.%f")
    run_dir = root / f"{stamp}-seed{seed}"
    suffix = 0
    while run_dir.exists():
        suffix += 1
        run_dir = root / f"{stamp}-seed{seed}-{suffix}"
    run_dir.mkdir(parents=True)
    try:
        entries = {}
        for name, source in files.items():
            target = run_dir / name
            target.parent.mkdir(parents=True, exist_ok=True)
            if isinstance(source, (str, Path)):
                target.write_bytes(Path(source).read_bytes())
            else:
                target.write_bytes(source)
            entries[name] = {"sha256": _sha256(target),
                             "bytes": target.stat().st_size}
        manifest = {
            "run_id": run_dir.name,
            "created_at": datetime.now(timezone.utc).isoformat(),
            "seed": seed,
            "config": dict(config) if config else {},
            "files": entries,
        }
        (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    except Exception:
        (run_dir / "PARTIAL").write_text("run persistence aborted\n")
        raise
    return run_dir


def verify_run(run_dir: str | Path) -> list[str]:
    """Names of manifest entries whose checksum or size no longer matches."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    bad = []
    for name, entry in manifest["files"].items():
        target = run_dir / name
        if not target.exists() or _sha256(target) != entry["sha256"]:
            bad.append(name)
    return bad


# ---------------------------------------------------------------------------
# HTTP API
# ---------------------------------------------------------------------------

def create_app(engine: GenerationEngine | None, runs_root: str | Path | None = None,
               ui_dir: str | Path | None = None):
    """FastAPI app exposing generate/health/report endpoints.

    Error responses carry ``{"code": ..., "message": ...}``.
    """
    from fastapi import FastAPI, Request
    from fastapi.responses import JSONResponse

    app = FastAPI(title="exgen", version=__version__)

    def error(status: int, code: str, message: str) -> JSONResponse:
        return JSONResponse(status_code=status,
                            content={"code": code, "message": message})

    @app.get("/api/health")
    def health():
        if engine is None:
            return error(503, "model-not-loaded", "no checkpoint is loaded")
        return {"version": __version__, "checkpoint": engine.checkpoint_id}

    @app.post("/api/generate")
    async def generate(request: Request):
        if engine is None:
            return error(503, "model-not-loaded", "no checkpoint is loaded")
        try:
            body = await request.json()
        except Exception:
            return error(400, "invalid-json", "request body is not valid JSON")
        try:
            gen_request = GenerationRequest.from_dict(body)
        except (ValueError, KeyError, TypeError) as exc:
            return error(400, "invalid-request", str(exc))
        try:
            response = engine.handle_generate(gen_request)
        except LengthOverflowError as exc:
            return error(400, "length-overflow", str(exc))
        return response.to_dict()

    @app.get("/api/runs/{run_id}/report")
    def run_report(run_id: str):
        if runs_root is None:
            return error(404, "not-found", "no runs root configured")
        report_path = Path(runs_root) / run_id / "metrics.jsonl"
        if not report_path.exists():
            return error(404, "not-found", f"no metric report for run {run_id}")
        rows = [json.loads(line) for line in report_path.read_text().splitlines()
                if line.strip()]
        return {"run_id": run_id, "rows": rows}

    if ui_dir is not None and Path(ui_dir).exists():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
