"""Blinded adequacy/fluency rating service.

A campaign samples lines from a test corpus, pairs each sampled source line
with every system's hypothesis under opaque per-item blind keys (hypothesis
order reshuffled per item), and serves items to evaluators who score each
hypothesis on 4-level adequacy and fluency scales. System labels never
appear in anything an evaluator can see; unblinding happens only at
aggregation time.

Persistence is an append-only JSONL event log (campaign-created,
rating-submitted, campaign-closed). Live state is a pure fold over the log,
so replaying the log reproduces the service state exactly; every append is
flushed and fsynced before the write is acknowledged. A torn trailing line
from a crashed writer is ignored on replay.
"""

from __future__ import annotations

import hashlib
import json
import os
import string
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .errors import (
    CampaignClosed,
    DuplicateCampaign,
    DuplicateSystemLabel,
    InsufficientData,
    MisalignedFiles,
    OutOfRangeScore,
    UnknownCampaign,
    UnknownEvaluator,
    UnknownItem,
)

SCALE_LEVELS = (1, 2, 3, 4)


@dataclass
class EvalItem:
    item_id: str
    source_text: str
    hypotheses: list[tuple[str, str]]  # (blind_key, text) in display order
    true_mapping: dict[str, str]  # blind_key -> system label, server side only


@dataclass
class Campaign:
    id: str
    language_pair: str
    sample_size: int
    seed: int
    systems: list[str]
    evaluators: list[str]
    items: list[EvalItem]
    status: str = "open"


@dataclass
class Rating:
    evaluator_id: str
    item_id: str
    blind_key: str
    adequacy: int
    fluency: int
    timestamp: float


@dataclass
class SystemScore:
    adequacy_mean: float | None
    fluency_mean: float | None
    count: int


@dataclass
class AFReport:
    campaign_id: str
    systems: dict[str, SystemScore]
    per_evaluator: dict[str, dict[str, SystemScore]]
    expected_per_system: int
    complete: bool


# ---------------------------------------------------------------------------
# campaign construction


def create_campaign(
    source_lines: list[str],
    systems: list[tuple[str, list[str]]],
    sample_size: int = 150,
    seed: int = 0,
    evaluators: list[str] | None = None,
    language_pair: str = "",
) -> Campaign:
    """Deterministically sample lines and build blinded items.

    Pure function of its inputs and the seed: identical calls produce
    identical campaigns, including ids, sampled lines, per-item hypothesis
    order, and blind-key assignment.
    """
    import random as _random

    labels = [label for label, _ in systems]
    if len(set(labels)) != len(labels):
        raise DuplicateSystemLabel(f"duplicate system labels in {labels}")
    if not systems:
        raise InsufficientData("need at least one system to evaluate")
    n = len(source_lines)
    for label, lines in systems:
        if len(lines) != n:
            raise MisalignedFiles(
                f"system {label!r} has {len(lines)} lines, sources have {n}"
            )
    if sample_size > n:
        raise InsufficientData(f"sample_size {sample_size} exceeds {n} lines")

    digest = hashlib.sha256(
        json.dumps(
            {
                "sources": source_lines,
                "systems": [[label, lines] for label, lines in systems],
                "sample_size": sample_size,
                "seed": seed,
                "evaluators": evaluators or [],
                "language_pair": language_pair,
            },
            sort_keys=True,
        ).encode("utf-8")
    ).hexdigest()
    campaign_id = f"camp-{digest[:12]}"

    rng = _random.Random(seed)
    indices = rng.sample(range(n), sample_size)
    items = []
    keys = string.ascii_uppercase
    for k, idx in enumerate(indices):
        order = list(range(len(systems)))
        rng.shuffle(order)
        hyps = []
        mapping = {}
        for slot, sys_idx in enumerate(order):
            label, lines = systems[sys_idx]
            key = keys[slot]
            hyps.append((key, lines[idx]))
            mapping[key] = label
        items.append(EvalItem(f"item-{k:04d}", source_lines[idx], hyps, mapping))
    return Campaign(
        id=campaign_id,
        language_pair=language_pair,
        sample_size=sample_size,
        seed=seed,
        systems=labels,
        evaluators=list(evaluators or []),
        items=items,
    )


def item_view(item: EvalItem, rated_keys: list[str]) -> dict:
    """The rater-facing payload: no system labels, ever."""
    return {
        "item_id": item.item_id,
        "source_text": item.source_text,
        "hypotheses": [{"key": k, "text": t} for k, t in item.hypotheses],
        "rated_keys": rated_keys,
    }


# ---------------------------------------------------------------------------
# event log


class EventLog:
    """Append-only JSONL file with fsync-before-acknowledge durability."""

    def __init__(self, log_dir: str | Path):
        self.dir = Path(log_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path = self.dir / "events.jsonl"

    def append(self, event: dict) -> None:
        line = json.dumps(event, sort_keys=True) + "\n"
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(line)
            f.flush()
            os.fsync(f.fileno())

    def replay(self) -> list[dict]:
        if not self.path.exists():
            return []
        events = []
        for raw in self.path.read_text(encoding="utf-8").splitlines():
            if not raw.strip():
                continue
            try:
                events.append(json.loads(raw))
            except json.JSONDecodeError:
                break  # torn trailing line from an interrupted append
        return events


# ---------------------------------------------------------------------------
# store: state as a fold over the log


class AfStore:
    def __init__(self, log_dir: str | Path):
        self.log = EventLog(log_dir)
        self._lock = threading.RLock()
        self.campaigns: dict[str, Campaign] = {}
        # ratings[campaign_id][(evaluator, item, key)] = Rating (last write wins)
        self.ratings: dict[str, dict[tuple[str, str, str], Rating]] = {}
        for event in self.log.replay():
            self._apply(event)

    # -- fold ---------------------------------------------------------------

    def _apply(self, event: dict) -> None:
        kind = event["type"]
        if kind == "campaign-created":
            c = event["campaign"]
            campaign = Campaign(
                id=c["id"],
                language_pair=c["language_pair"],
                sample_size=c["sample_size"],
                seed=c["seed"],
                systems=list(c["systems"]),
                evaluators=list(c["evaluators"]),
                items=[
                    EvalItem(
                        i["item_id"],
                        i["source_text"],
                        [tuple(h) for h in i["hypotheses"]],
                        dict(i["true_mapping"]),
                    )
                    for i in c["items"]
                ],
                status=c.get("status", "open"),
            )
            self.campaigns[campaign.id] = campaign
            self.ratings.setdefault(campaign.id, {})
        elif kind == "rating-submitted":
            r = event["rating"]
            rating = Rating(
                r["evaluator_id"], r["item_id"], r["blind_key"],
                int(r["adequacy"]), int(r["fluency"]), float(r["timestamp"]),
            )
            self.ratings.setdefault(event["campaign_id"], {})[
                (rating.evaluator_id, rating.item_id, rating.blind_key)
            ] = rating
        elif kind == "campaign-closed":
            cid = event["campaign_id"]
            if cid in self.campaigns:
                self.campaigns[cid].status = "closed"

    # -- commands -----------------------------------------------------------

    def create_campaign(self, *args, **kwargs) -> Campaign:
        with self._lock:
            campaign = create_campaign(*args, **kwargs)
            if campaign.id in self.campaigns:
                raise DuplicateCampaign(f"campaign {campaign.id} already exists")
            event = {
                "type": "campaign-created",
                "campaign": {
                    "id": campaign.id,
                    "language_pair": campaign.language_pair,
                    "sample_size": campaign.sample_size,
                    "seed": campaign.seed,
                    "systems": campaign.systems,
                    "evaluators": campaign.evaluators,
                    "status": campaign.status,
                    "items": [
                        {
                            "item_id": i.item_id,
                            "source_text": i.source_text,
                            "hypotheses": [list(h) for h in i.hypotheses],
                            "true_mapping": i.true_mapping,
                        }
                        for i in campaign.items
                    ],
                },
            }
            self.log.append(event)
            self._apply(event)
            return campaign

    def _campaign(self, campaign_id: str) -> Campaign:
        if campaign_id not in self.campaigns:
            raise UnknownCampaign(f"no campaign {campaign_id!r}")
        return self.campaigns[campaign_id]

    def next_item(self, campaign_id: str, evaluator_id: str) -> dict | None:
        """Lowest-indexed item with any hypothesis this evaluator has not
        rated, as a blinded view; None once everything is rated."""
        with self._lock:
            campaign = self._campaign(campaign_id)
            if campaign.status != "open":
                raise CampaignClosed(f"campaign {campaign_id} is closed")
            if evaluator_id not in campaign.evaluators:
                raise UnknownEvaluator(f"evaluator {evaluator_id!r} is not registered")
            rated = self.ratings.get(campaign_id, {})
            for item in campaign.items:
                rated_keys = [
                    k for k, _ in item.hypotheses
                    if (evaluator_id, item.item_id, k) in rated
                ]
                if len(rated_keys) < len(item.hypotheses):
                    return item_view(item, rated_keys)
            return None

    def progress(self, campaign_id: str, evaluator_id: str) -> dict:
        with self._lock:
            campaign = self._campaign(campaign_id)
            rated = self.ratings.get(campaign_id, {})
            done = sum(
                1
                for item in campaign.items
                if all(
                    (evaluator_id, item.item_id, k) in rated for k, _ in item.hypotheses
                )
            )
            return {"rated": done, "total": len(campaign.items)}

    def submit_rating(
        self,
        campaign_id: str,
        evaluator_id: str,
        item_id: str,
        blind_key: str,
        adequacy: int,
        fluency: int,
        timestamp: float | None = None,
    ) -> Rating:
        """Validate, append to the log (durably), then fold into state.

        Resubmission for the same (evaluator, item, key) overwrites the
        stored scores, so client retries are safe.
        """
        with self._lock:
            campaign = self._campaign(campaign_id)
            if campaign.status != "open":
                raise CampaignClosed(f"campaign {campaign_id} is closed")
            if evaluator_id not in campaign.evaluators:
                raise UnknownEvaluator(f"evaluator {evaluator_id!r} is not registered")
            item = next((i for i in campaign.items if i.item_id == item_id), None)
            if item is None:
                raise UnknownItem(f"no item {item_id!r} in campaign {campaign_id}")
            if blind_key not in item.true_mapping:
                raise UnknownItem(f"item {item_id} has no hypothesis {blind_key!r}")
            if adequacy not in SCALE_LEVELS or fluency not in SCALE_LEVELS:
                raise OutOfRangeScore(
                    f"scores must be integers in 1..4, got adequacy={adequacy} fluency={fluency}"
                )
            rating = Rating(
                evaluator_id, item_id, blind_key, adequacy, fluency,
                time.time() if timestamp is None else timestamp,
            )
            event = {
                "type": "rating-submitted",
                "campaign_id": campaign_id,
                "rating": asdict(rating),
            }
            self.log.append(event)
            self._apply(event)
            return rating

    def close_campaign(self, campaign_id: str) -> None:
        with self._lock:
            campaign = self._campaign(campaign_id)
            if campaign.status != "open":
                raise CampaignClosed(f"campaign {campaign_id} is already closed")
            event = {"type": "campaign-closed", "campaign_id": campaign_id}
            self.log.append(event)
            self._apply(event)

    # -- queries ------------------------------------------------------------

    def aggregate(self, campaign_id: str) -> AFReport:
        """Unblind and average: flat mean over every (evaluator, item) rating
        per system, plus per-evaluator means for agreement inspection."""
        with self._lock:
            campaign = self._campaign(campaign_id)
            key_to_label = {
                (item.item_id, key): label
                for item in campaign.items
                for key, label in item.true_mapping.items()
            }
            sums: dict[str, list[float]] = {s: [0.0, 0.0, 0] for s in campaign.systems}
            per_eval: dict[str, dict[str, list[float]]] = {}
            for rating in self.ratings.get(campaign_id, {}).values():
                label = key_to_label[(rating.item_id, rating.blind_key)]
                bucket = sums[label]
                bucket[0] += rating.adequacy
                bucket[1] += rating.fluency
                bucket[2] += 1
                ev = per_eval.setdefault(rating.evaluator_id, {})
                eb = ev.setdefault(label, [0.0, 0.0, 0])
                eb[0] += rating.adequacy
                eb[1] += rating.fluency
                eb[2] += 1

            def score(bucket) -> SystemScore:
                a, f, n = bucket
                if n == 0:
                    return SystemScore(None, None, 0)
                return SystemScore(a / n, f / n, n)

            expected = len(campaign.items) * len(campaign.evaluators)
            systems = {label: score(sums[label]) for label in campaign.systems}
            return AFReport(
                campaign_id=campaign_id,
                systems=systems,
                per_evaluator={
                    ev: {label: score(b) for label, b in buckets.items()}
                    for ev, buckets in per_eval.items()
                },
                expected_per_system=expected,
                complete=all(s.count == expected for s in systems.values()),
            )


# ---------------------------------------------------------------------------
# report rendering


def report_to_text(report: AFReport) -> str:
    """Aligned Translation / Adequacy / Fluency table, two-decimal means."""
    rows = [("Translation", "Adequacy", "Fluency", "Ratings")]
    for label, s in report.systems.items():
        rows.append(
            (
                label,
                "-" if s.adequacy_mean is None else f"{s.adequacy_mean:.2f}",
                "-" if s.fluency_mean is None else f"{s.fluency_mean:.2f}",
                str(s.count),
            )
        )
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = []
    for r in rows:
        lines.append(
            r[0].ljust(widths[0])
            + "  "
            + "  ".join(r[i].rjust(widths[i]) for i in range(1, 4))
        )
    if not report.complete:
        expected = report.expected_per_system
        lines.append(f"warning: incomplete coverage (expected {expected} ratings per system)")
    return "\n".join(lines)


def report_to_csv(report: AFReport) -> str:
    lines = ["system,adequacy,fluency,count"]
    for label, s in report.systems.items():
        a = "" if s.adequacy_mean is None else f"{s.adequacy_mean:.2f}"
        f = "" if s.fluency_mean is None else f"{s.fluency_mean:.2f}"
        lines.append(f"{label},{a},{f},{s.count}")
    return "\n".join(lines) + "\n"


def report_to_json(report: AFReport) -> dict:
    return {
        "campaign_id": report.campaign_id,
        "systems": {
            label: asdict(s) for label, s in report.systems.items()
        },
        "per_evaluator": {
            ev: {label: asdict(s) for label, s in buckets.items()}
            for ev, buckets in report.per_evaluator.items()
        },
        "expected_per_system": report.expected_per_system,
        "complete": report.complete,
    }


# ---------------------------------------------------------------------------
# HTTP service


def create_app(store: AfStore, ui_dir: str | Path | None = None):
    """JSON API under /api/v1 plus optional static serving of the rater UI.

    Status codes: 400 malformed request, 404 unknown ids, 409 closed
    campaign, 422 out-of-range scores.
    """
    app = FastAPI(title="mtkit adequacy/fluency service", docs_url=None, redoc_url=None)

    error_codes = {
        UnknownCampaign: 404,
        UnknownEvaluator: 404,
        UnknownItem: 404,
        CampaignClosed: 409,
        DuplicateCampaign: 409,
        OutOfRangeScore: 422,
        MisalignedFiles: 400,
        DuplicateSystemLabel: 400,
        InsufficientData: 400,
    }

    def error_response(exc: Exception) -> JSONResponse:
        code = error_codes.get(type(exc), 400)
        return JSONResponse({"error": str(exc)}, status_code=code)

    async def parse_json(request: Request) -> dict | JSONResponse:
        try:
            data = await request.json()
        except Exception:
            return JSONResponse({"error": "request body is not valid JSON"}, status_code=400)
        if not isinstance(data, dict):
            return JSONResponse({"error": "request body must be a JSON object"}, status_code=400)
        return data

    @app.post("/api/v1/campaigns")
    async def create(request: Request):
        data = await parse_json(request)
        if isinstance(data, JSONResponse):
            return data
        try:
            sources = data["source_lines"]
            systems = [(s["label"], s["lines"]) for s in data["systems"]]
            campaign = store.create_campaign(
                sources,
                systems,
                sample_size=int(data.get("sample_size", 150)),
                seed=int(data.get("seed", 0)),
                evaluators=data.get("evaluators", []),
                language_pair=data.get("language_pair", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            return JSONResponse({"error": f"malformed campaign request: {exc}"}, status_code=400)
        except Exception as exc:
            if type(exc) in error_codes:
                return error_response(exc)
            raise
        return JSONResponse(
            {"campaign_id": campaign.id, "items": len(campaign.items)}, status_code=201
        )

    @app.get("/api/v1/campaigns/{campaign_id}/next")
    async def next_item(campaign_id: str, evaluator: str = ""):
        if not evaluator:
            return JSONResponse({"error": "evaluator query parameter required"}, status_code=400)
        try:
            view = store.next_item(campaign_id, evaluator)
            progress = store.progress(campaign_id, evaluator)
        except Exception as exc:
            if type(exc) in error_codes:
                return error_response(exc)
            raise
        if view is None:
            return JSONResponse({"done": True, "progress": progress})
        view["done"] = False
        view["progress"] = progress
        return JSONResponse(view)

    @app.post("/api/v1/campaigns/{campaign_id}/ratings")
    async def submit(campaign_id: str, request: Request):
        data = await parse_json(request)
        if isinstance(data, JSONResponse):
            return data
        required = ("evaluator_id", "item_id", "blind_key", "adequacy", "fluency")
        missing = [k for k in required if k not in data]
        if missing:
            return JSONResponse({"error": f"missing fields: {missing}"}, status_code=400)
        if not isinstance(data["adequacy"], int) or not isinstance(data["fluency"], int):
            return JSONResponse({"error": "scores must be integers"}, status_code=400)
        try:
            store.submit_rating(
                campaign_id,
                str(data["evaluator_id"]),
                str(data["item_id"]),
                str(data["blind_key"]),
                data["adequacy"],
                data["fluency"],
            )
        except Exception as exc:
            if type(exc) in error_codes:
                return error_response(exc)
            raise
        return JSONResponse({"status": "ok"})

    @app.get("/api/v1/campaigns/{campaign_id}/report")
    async def report(campaign_id: str):
        try:
            rep = store.aggregate(campaign_id)
        except Exception as exc:
            if type(exc) in error_codes:
                return error_response(exc)
            raise
        return JSONResponse(report_to_json(rep))

    @app.post("/api/v1/campaigns/{campaign_id}/close")
    async def close(campaign_id: str):
        try:
            store.close_campaign(campaign_id)
        except Exception as exc:
            if type(exc) in error_codes:
                return error_response(exc)
            raise
        return JSONResponse({"status": "closed"})

    if ui_dir is not None and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def serve(log_dir: str | Path, port: int, ui_dir: str | Path | None = None) -> None:
    import uvicorn

    store = AfStore(log_dir)
    app = create_app(store, ui_dir)
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")
