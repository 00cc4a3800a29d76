"""Two-pass human review with adjudication: event-sourced store plus HTTP API.

State machine per task:

    pending -> pass1_done -> (accepted | rejected)        on agreeing pass-2
                          -> needs_adjudication           on disagreement
    needs_adjudication -> (accepted | rejected)           by an adjudicator

An agreeing pass-2 verdict resolves through pass2_done transiently: decision
correct maps to accepted, anything else to rejected. Verdicts are append-only;
all state is replayed from a JSONL event log on startup. Tasks are leased to
one reviewer at a time; pass-2 is never served to the pass-1 reviewer, and
adjudication only to adjudicator-role reviewers (who then see both verdicts).
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from fastapi import Depends, FastAPI, HTTPException, Request

DECISIONS = ("correct", "grounded_fix_needed", "reject")

STATE_PENDING = "pending"
STATE_PASS1 = "pass1_done"
STATE_PASS2 = "pass2_done"
STATE_ADJUDICATION = "needs_adjudication"
STATE_ACCEPTED = "accepted"
STATE_REJECTED = "rejected"

_TERMINAL = (STATE_ACCEPTED, STATE_REJECTED)

DEFAULT_LEASE_SECONDS = 15 * 60


class ReviewError(Exception):
    pass


class UnknownTaskError(ReviewError):
    pass


class LeaseError(ReviewError):
    """Stale or missing lease; the caller should fetch the task again."""


class IllegalTransitionError(ReviewError):
    pass


@dataclass
class Verdict:
    reviewer_id: str
    review_pass: str  # "1" | "2" | "adjudication"
    decision: str
    note: str
    timestamp: str

    def to_dict(self) -> dict:
        return {
            "reviewer_id": self.reviewer_id,
            "pass": self.review_pass,
            "decision": self.decision,
            "note": self.note,
            "timestamp": self.timestamp,
        }


@dataclass
class ReviewTask:
    task_id: str
    item_id: str
    image_id: str
    payload: dict
    state: str = STATE_PENDING
    verdicts: list[Verdict] = field(default_factory=list)
    seq: int = 0
    lease_holder: str | None = None
    lease_expires: float = 0.0
    fix_needed: bool = False

    def to_dict(self, include_verdicts: bool = True) -> dict:
        out = {
            "task_id": self.task_id,
            "item_id": self.item_id,
            "image_id": self.image_id,
            "payload": dict(self.payload),
            "state": self.state,
        }
        if include_verdicts:
            out["verdicts"] = [v.to_dict() for v in self.verdicts]
        return out

    def pass1_reviewer(self) -> str | None:
        for v in self.verdicts:
            if v.review_pass == "1":
                return v.reviewer_id
        return None


class ReviewStore:
    """In-memory task state replayed from an append-only JSONL event log."""

    def __init__(
        self,
        events_path: Path | str | None = None,
        lease_seconds: float = DEFAULT_LEASE_SECONDS,
        clock: Callable[[], float] = time.time,
    ):
        self.events_path = Path(events_path) if events_path else None
        self.lease_seconds = lease_seconds
        self._clock = clock
        self._lock = threading.RLock()
        self._tasks: dict[str, ReviewTask] = {}
        self._by_item: dict[str, list[str]] = {}
        self._roles: dict[str, set[str]] = {}
        self._seq = 0
        if self.events_path and self.events_path.is_file():
            self._replay()

    # -- reviewers -----------------------------------------------------

    def register_reviewer(self, reviewer_id: str, roles: Iterable[str]) -> None:
        with self._lock:
            self._roles[reviewer_id] = set(roles)

    def roles_of(self, reviewer_id: str) -> set[str]:
        return self._roles.get(reviewer_id, set())

    # -- events ----------------------------------------------------------

    def _append_event(self, event: dict) -> None:
        if self.events_path is None:
            return
        self.events_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.events_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(event, ensure_ascii=False))
            f.write("\n")

    def _replay(self) -> None:
        with open(self.events_path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                event = json.loads(line)
                if event["type"] == "enqueue":
                    self._apply_enqueue(event)
                elif event["type"] == "verdict":
                    task = self._tasks[event["task_id"]]
                    self._apply_verdict(task, Verdict(
                        reviewer_id=event["reviewer_id"],
                        review_pass=event["pass"],
                        decision=event["decision"],
                        note=event.get("note", ""),
                        timestamp=event.get("timestamp", ""),
                    ))

    # -- enqueue ----------------------------------------------------------

    def enqueue(self, items: Iterable[dict]) -> dict:
        """One pending task per item, idempotent per item_id. An item whose
        previous task ended rejected with a fix-needed decision may be
        re-enqueued exactly once (the bounded repair cycle)."""
        enqueued = duplicates = 0
        with self._lock:
            for item in items:
                item_id = str(item["item_id"])
                prior_ids = self._by_item.get(item_id, [])
                if prior_ids:
                    last = self._tasks[prior_ids[-1]]
                    repairable = (last.state == STATE_REJECTED and last.fix_needed
                                  and len(prior_ids) == 1)
                    if not repairable:
                        duplicates += 1
                        continue
                    task_id = f"{item_id}#r{len(prior_ids)}"
                else:
                    task_id = item_id
                event = {
                    "type": "enqueue",
                    "task_id": task_id,
                    "item_id": item_id,
                    "image_id": str(item.get("image_id", "")),
                    "payload": item.get("payload", {}),
                    "timestamp": self._now_iso(),
                }
                self._apply_enqueue(event)
                self._append_event(event)
                enqueued += 1
        return {"enqueued": enqueued, "duplicates": duplicates}

    def _apply_enqueue(self, event: dict) -> None:
        self._seq += 1
        task = ReviewTask(
            task_id=event["task_id"],
            item_id=event["item_id"],
            image_id=event.get("image_id", ""),
            payload=event.get("payload", {}),
            seq=self._seq,
        )
        self._tasks[task.task_id] = task
        self._by_item.setdefault(task.item_id, []).append(task.task_id)

    # -- queueing -----------------------------------------------------------

    def next_task(self, reviewer_id: str) -> ReviewTask | None:
        """Oldest task this reviewer is eligible for, leased to them. Prior
        verdicts stay hidden except in the adjudication state."""
        if reviewer_id not in self._roles:
            raise ReviewError(f"unknown reviewer: {reviewer_id}")
        roles = self._roles[reviewer_id]
        now = self._clock()
        with self._lock:
            for task in sorted(self._tasks.values(), key=lambda t: t.seq):
                if task.state in _TERMINAL:
                    continue
                if task.lease_holder and task.lease_expires > now \
                        and task.lease_holder != reviewer_id:
                    continue
                if not self._eligible(task, reviewer_id, roles):
                    continue
                task.lease_holder = reviewer_id
                task.lease_expires = now + self.lease_seconds
                return task
        return None

    @staticmethod
    def _eligible(task: ReviewTask, reviewer_id: str, roles: set[str]) -> bool:
        if task.state == STATE_PENDING:
            return "reviewer" in roles
        if task.state == STATE_PASS1:
            return "reviewer" in roles and task.pass1_reviewer() != reviewer_id
        if task.state == STATE_ADJUDICATION:
            return "adjudicator" in roles
        return False

    # -- verdicts --------------------------------------------------------------

    def submit_verdict(self, task_id: str, reviewer_id: str, decision: str,
                       note: str = "") -> str:
        """Append a verdict and advance the state machine; requires a live
        lease held by the submitting reviewer. Returns the new state."""
        if decision not in DECISIONS:
            raise ReviewError(f"decision must be one of {DECISIONS}, got {decision!r}")
        with self._lock:
            task = self._tasks.get(task_id)
            if task is None:
                raise UnknownTaskError(f"no such task: {task_id}")
            if task.state in _TERMINAL:
                raise IllegalTransitionError(
                    f"task {task_id} is already {task.state}")
            now = self._clock()
            if task.lease_holder != reviewer_id or task.lease_expires <= now:
                raise LeaseError(
                    f"reviewer {reviewer_id} does not hold a live lease on "
                    f"{task_id}; call next_task again and retry")
            verdict = Verdict(
                reviewer_id=reviewer_id,
                review_pass=self._pass_for_state(task.state),
                decision=decision,
                note=note,
                timestamp=self._now_iso(),
            )
            self._validate_verdict(task, verdict)
            self._apply_verdict(task, verdict)
            self._append_event({
                "type": "verdict",
                "task_id": task_id,
                "reviewer_id": reviewer_id,
                "pass": verdict.review_pass,
                "decision": decision,
                "note": note,
                "timestamp": verdict.timestamp,
            })
            task.lease_holder = None
            task.lease_expires = 0.0
            return task.state

    @staticmethod
    def _pass_for_state(state: str) -> str:
        return {STATE_PENDING: "1", STATE_PASS1: "2",
                STATE_ADJUDICATION: "adjudication"}[state]

    def _validate_verdict(self, task: ReviewTask, verdict: Verdict) -> None:
        if verdict.review_pass == "2" and task.pass1_reviewer() == verdict.reviewer_id:
            raise IllegalTransitionError(
                "a reviewer may not supply both pass 1 and pass 2 for one task")
        if verdict.review_pass == "adjudication" \
                and "adjudicator" not in self.roles_of(verdict.reviewer_id):
            raise IllegalTransitionError(
                f"{verdict.reviewer_id} lacks the adjudicator role")

    def _apply_verdict(self, task: ReviewTask, verdict: Verdict) -> None:
        task.verdicts.append(verdict)
        if verdict.review_pass == "1":
            task.state = STATE_PASS1
            return
        if verdict.review_pass == "2":
            pass1 = next(v for v in task.verdicts if v.review_pass == "1")
            if pass1.decision == verdict.decision:
                self._finalize(task, verdict.decision)
            else:
                task.state = STATE_ADJUDICATION
            return
        self._finalize(task, verdict.decision)  # adjudication

    @staticmethod
    def _finalize(task: ReviewTask, decision: str) -> None:
        task.state = STATE_ACCEPTED if decision == "correct" else STATE_REJECTED
        task.fix_needed = decision == "grounded_fix_needed"

    # -- reads -------------------------------------------------------------------

    def get(self, task_id: str) -> ReviewTask:
        task = self._tasks.get(task_id)
        if task is None:
            raise UnknownTaskError(f"no such task: {task_id}")
        return task

    def export_accepted(self) -> list[str]:
        """All and only accepted item_ids, sorted; the benchmark review gate."""
        with self._lock:
            return sorted(
                t.item_id for t in self._tasks.values() if t.state == STATE_ACCEPTED)

    def stats(self) -> dict:
        with self._lock:
            by_state: dict[str, int] = {}
            for task in self._tasks.values():
                by_state[task.state] = by_state.get(task.state, 0) + 1
            return {
                "tasks": len(self._tasks),
                "by_state": by_state,
                "fix_needed": sum(1 for t in self._tasks.values() if t.fix_needed),
                "disagreements": sum(
                    1 for t in self._tasks.values()
                    if any(v.review_pass == "adjudication" for v in t.verdicts)
                    or t.state == STATE_ADJUDICATION),
            }

    def _now_iso(self) -> str:
        return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


# -- roster + HTTP app ------------------------------------------------------------


def load_roster(path: Path | str) -> dict[str, tuple[str, set[str]]]:
    """reviewers.tsv rows: reviewer_id<TAB>token<TAB>role[,role...]. Returns a
    token -> (reviewer_id, roles) lookup."""
    roster: dict[str, tuple[str, set[str]]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for raw in f:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ReviewError(f"roster line needs 3 tab-separated fields: {raw!r}")
            reviewer_id, token, roles = parts
            roster[token.strip()] = (
                reviewer_id.strip(),
                {r.strip() for r in roles.split(",") if r.strip()},
            )
    return roster


def create_app(store: ReviewStore, roster: dict[str, tuple[str, set[str]]]) -> FastAPI:
    """FastAPI wrapper over the store; bearer tokens come from the roster."""
    app = FastAPI(title="vlforge review service")
    for reviewer_id, roles in roster.values():
        store.register_reviewer(reviewer_id, roles)

    def authenticate(request: Request) -> tuple[str, set[str]]:
        header = request.headers.get("authorization", "")
        if not header.lower().startswith("bearer "):
            raise HTTPException(status_code=401, detail="bearer token required")
        entry = roster.get(header[7:].strip())
        if entry is None:
            raise HTTPException(status_code=401, detail="unknown token")
        return entry

    def task_view(task: ReviewTask, roles: set[str]) -> dict:
        show_verdicts = (task.state == STATE_ADJUDICATION
                         and "adjudicator" in roles)
        view = task.to_dict(include_verdicts=show_verdicts)
        view["lease_expires"] = task.lease_expires
        return view

    @app.post("/tasks/enqueue")
    def enqueue(body: dict, auth=Depends(authenticate)):
        items = body.get("items", [])
        if not isinstance(items, list):
            raise HTTPException(status_code=400, detail="items must be a list")
        return store.enqueue(items)

    @app.get("/tasks/next")
    def next_task(reviewer: str = "", auth=Depends(authenticate)):
        reviewer_id, roles = auth
        if reviewer and reviewer != reviewer_id:
            raise HTTPException(status_code=403,
                                detail="reviewer does not match token")
        task = store.next_task(reviewer_id)
        return {"task": task_view(task, roles) if task else None}

    @app.post("/tasks/{task_id}/verdict")
    def submit(task_id: str, body: dict, auth=Depends(authenticate)):
        reviewer_id, _ = auth
        decision = body.get("decision", "")
        note = body.get("note", "")
        try:
            state = store.submit_verdict(task_id, reviewer_id, decision, str(note))
        except UnknownTaskError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except LeaseError as exc:
            raise HTTPException(status_code=409, detail=f"stale lease, retry: {exc}")
        except IllegalTransitionError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except ReviewError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"task_id": task_id, "state": state}

    @app.get("/tasks/{task_id}")
    def get_task(task_id: str, auth=Depends(authenticate)):
        try:
            task = store.get(task_id)
        except UnknownTaskError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        view = task.to_dict(include_verdicts=True)
        view["lease_expires"] = task.lease_expires
        return view

    @app.get("/export/accepted")
    def export_accepted(auth=Depends(authenticate)):
        return {"accepted": store.export_accepted()}

    @app.get("/stats")
    def stats(auth=Depends(authenticate)):
        return store.stats()

    return app
