"""
WORKFLOW Module
---------------------------------------------------------
Change requests for repository workbooks: request, test, review and
approval, each step recorded as an event in an append-only, hash-chained
JSON-lines log.

  Draft --Submit--> Submitted --StartReview--> InReview
  InReview --Approve--> Approved      (signature required)
  InReview --Reject--> Rejected       (signature required)
  Rejected --Rework--> Draft
  Draft | Submitted | InReview --Withdraw--> Withdrawn   (requester only)

Testing happens between Submitted and InReview; the reviewer starts the
review once it is done.

Signatures are hash records over the proposed version's bytes. The actor
is whoever the caller authenticated; there is no key management.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

from sheetguard.errors import (
    BadSignature,
    CorruptLog,
    DuplicateId,
    IllegalTransition,
    MissingSignature,
    NoChange,
    NotFound,
    SeparationOfDuties,
    UnknownRequest,
    UnknownVersion,
    WorkflowError,
)
from sheetguard.repository import RepositoryStore, normalize_path

logger = logging.getLogger(__name__)

GENESIS_HASH = "0" * 64
CANONICAL_FIELDS = ("request_id", "seq", "action", "actor", "timestamp", "payload_hash")
EVENT_KEYS = frozenset(CANONICAL_FIELDS) | {"payload", "chain_hash"}


class RequestState(str, Enum):
    DRAFT = "Draft"
    SUBMITTED = "Submitted"
    IN_REVIEW = "InReview"
    APPROVED = "Approved"
    REJECTED = "Rejected"
    WITHDRAWN = "Withdrawn"


class Action(str, Enum):
    CREATE = "Create"
    SUBMIT = "Submit"
    START_REVIEW = "StartReview"
    APPROVE = "Approve"
    REJECT = "Reject"
    REWORK = "Rework"
    WITHDRAW = "Withdraw"


TRANSITIONS: dict[tuple[RequestState, Action], RequestState] = {
    (RequestState.DRAFT, Action.SUBMIT): RequestState.SUBMITTED,
    (RequestState.SUBMITTED, Action.START_REVIEW): RequestState.IN_REVIEW,
    (RequestState.IN_REVIEW, Action.APPROVE): RequestState.APPROVED,
    (RequestState.IN_REVIEW, Action.REJECT): RequestState.REJECTED,
    (RequestState.REJECTED, Action.REWORK): RequestState.DRAFT,
    (RequestState.DRAFT, Action.WITHDRAW): RequestState.WITHDRAWN,
    (RequestState.SUBMITTED, Action.WITHDRAW): RequestState.WITHDRAWN,
    (RequestState.IN_REVIEW, Action.WITHDRAW): RequestState.WITHDRAWN,
}

SIGNED_ACTIONS = {Action.APPROVE: "approved", Action.REJECT: "rejected"}


def apply_action(state: RequestState, action: Action) -> RequestState:
    try:
        return TRANSITIONS[(state, action)]
    except KeyError:
        raise IllegalTransition(f"{action.value} is not allowed in state {state.value}") from None


@dataclass(frozen=True)
class Signature:
    actor: str
    timestamp: str
    content_hash: str
    statement: str

    def to_dict(self) -> dict:
        return {
            "actor": self.actor,
            "timestamp": self.timestamp,
            "content_hash": self.content_hash,
            "statement": self.statement,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Signature":
        return cls(d["actor"], d["timestamp"], d["content_hash"], d["statement"])


@dataclass(frozen=True)
class ChangeRequest:
    id: str
    resource_path: str
    requester: str
    base_version: int
    proposed_version: int
    title: str = ""
    description: str = ""
    state: RequestState = RequestState.DRAFT
    reviewers: tuple[str, ...] = ()
    signatures: tuple[Signature, ...] = ()

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "resource_path": self.resource_path,
            "requester": self.requester,
            "title": self.title,
            "description": self.description,
            "base_version": self.base_version,
            "proposed_version": self.proposed_version,
            "state": self.state.value,
            "reviewers": list(self.reviewers),
            "signatures": [s.to_dict() for s in self.signatures],
        }


@dataclass(frozen=True)
class TransitionEvent:
    request_id: str
    seq: int
    action: Action
    actor: str
    timestamp: str
    payload_hash: str
    chain_hash: str
    payload: dict = field(default_factory=dict, compare=False)

    def to_json(self) -> str:
        return json.dumps({
            "request_id": self.request_id,
            "seq": self.seq,
            "action": self.action.value,
            "actor": self.actor,
            "timestamp": self.timestamp,
            "payload": self.payload,
            "payload_hash": self.payload_hash,
            "chain_hash": self.chain_hash,
        }, ensure_ascii=False, separators=(",", ":"))


# =====================================================================
# HASHING
# =====================================================================

def canonical_payload(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def payload_hash(payload: dict) -> str:
    return hashlib.sha256(canonical_payload(payload)).hexdigest()


def canonical_encoding(request_id: str, seq: int, action: str, actor: str, timestamp: str, p_hash: str) -> bytes:
    """Newline-separated key=value lines in fixed field order, UTF-8."""
    values = (request_id, str(seq), action, actor, timestamp, p_hash)
    return "\n".join(f"{k}={v}" for k, v in zip(CANONICAL_FIELDS, values)).encode("utf-8")


def chain_hash(prev: str, encoding: bytes) -> str:
    return hashlib.sha256(prev.encode("ascii") + encoding).hexdigest()


def _no_duplicates(pairs):
    keys = [k for k, _ in pairs]
    if len(set(keys)) != len(keys):
        raise ValueError(f"duplicate keys: {keys}")
    return dict(pairs)


def _parse_event(line: str) -> TransitionEvent:
    d = json.loads(line, object_pairs_hook=_no_duplicates)
    if not isinstance(d, dict) or set(d) != EVENT_KEYS:
        raise ValueError("event fields do not match the log format")
    if not isinstance(d["payload"], dict):
        raise ValueError("event payload must be an object")
    return TransitionEvent(
        request_id=d["request_id"],
        seq=d["seq"],
        action=Action(d["action"]),
        actor=d["actor"],
        timestamp=d["timestamp"],
        payload_hash=d["payload_hash"],
        chain_hash=d["chain_hash"],
        payload=d["payload"],
    )


def verify_log(events: Iterable[str | TransitionEvent] | str | bytes) -> tuple[bool, int | None]:
    """
    Recompute every payload and chain hash.

    Accepts raw log text (str/bytes), an iterable of lines, or parsed
    events. Returns (True, None) when intact, else (False, first bad seq).
    """
    if isinstance(events, bytes):
        try:
            events = events.decode("utf-8")
        except UnicodeDecodeError:
            events = events.decode("utf-8", errors="replace")
    if isinstance(events, str):
        events = [line for line in events.split("\n") if line.strip()]

    prev = GENESIS_HASH
    for position, item in enumerate(events, start=1):
        if isinstance(item, TransitionEvent):
            event = item
        else:
            try:
                event = _parse_event(item)
            except (ValueError, KeyError, TypeError):
                return False, position
        if not isinstance(event.seq, int) or event.seq != position:
            return False, position
        if payload_hash(event.payload) != event.payload_hash:
            return False, position
        expected = chain_hash(prev, canonical_encoding(
            event.request_id, event.seq, event.action.value, event.actor, event.timestamp, event.payload_hash,
        ))
        if expected != event.chain_hash:
            return False, position
        prev = event.chain_hash
    return True, None


# =====================================================================
# EVENT LOG
# =====================================================================

class EventLog:
    """
    Append-only event log. Appends are serialized; `events()` returns a
    snapshot. With `path=None` the log lives in memory.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._events: list[TransitionEvent] = []
        if self.path is not None and self.path.exists():
            text = self.path.read_bytes()
            ok, bad = verify_log(text)
            if not ok:
                raise CorruptLog(f"{self.path}: chain broken at seq {bad}")
            self._events = [_parse_event(line) for line in text.decode("utf-8").split("\n") if line.strip()]
            logger.info(f"[FLOW] loaded {len(self._events)} events from {self.path}")

    def events(self) -> list[TransitionEvent]:
        with self._lock:
            return list(self._events)

    def append(self, request_id: str, action: Action, actor: str, timestamp: str, payload: dict) -> TransitionEvent:
        with self._lock:
            seq = len(self._events) + 1
            prev = self._events[-1].chain_hash if self._events else GENESIS_HASH
            p_hash = payload_hash(payload)
            event = TransitionEvent(
                request_id=request_id,
                seq=seq,
                action=action,
                actor=actor,
                timestamp=timestamp,
                payload_hash=p_hash,
                chain_hash=chain_hash(prev, canonical_encoding(
                    request_id, seq, action.value, actor, timestamp, p_hash,
                )),
                payload=payload,
            )
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                    fh.write(event.to_json() + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
            self._events.append(event)
            return event


# =====================================================================
# REPLAY
# =====================================================================

def _request_from_create(event: TransitionEvent) -> ChangeRequest:
    p = event.payload
    return ChangeRequest(
        id=event.request_id,
        resource_path=p["resource_path"],
        requester=p["requester"],
        base_version=int(p["base_version"]),
        proposed_version=int(p["proposed_version"]),
        title=p.get("title", ""),
        description=p.get("description", ""),
        reviewers=tuple(p.get("reviewers", ())),
    )


def replay(events: Iterable[TransitionEvent]) -> dict[str, ChangeRequest]:
    """
    Rebuild every request from its events.

    Raises:
        CorruptLog: an event is not a legal step for its request
    """
    requests: dict[str, ChangeRequest] = {}
    for event in events:
        current = requests.get(event.request_id)
        if event.action is Action.CREATE:
            if current is not None:
                raise CorruptLog(f"seq {event.seq}: {event.request_id} created twice")
            try:
                requests[event.request_id] = _request_from_create(event)
            except (KeyError, TypeError, ValueError) as e:
                raise CorruptLog(f"seq {event.seq}: malformed Create payload: {e}") from e
            continue
        if current is None:
            raise CorruptLog(f"seq {event.seq}: {event.action.value} before Create for {event.request_id}")
        try:
            state = apply_action(current.state, event.action)
        except IllegalTransition as e:
            raise CorruptLog(f"seq {event.seq}: {e}") from e
        signatures = current.signatures
        if "signature" in event.payload:
            signatures = signatures + (Signature.from_dict(event.payload["signature"]),)
        requests[event.request_id] = replace(current, state=state, signatures=signatures)
    return requests


def current_state(events: Sequence[TransitionEvent]) -> RequestState:
    """State of the single request the events belong to."""
    ids = {e.request_id for e in events}
    if len(ids) != 1:
        raise CorruptLog(f"expected events of one request, got {sorted(ids)}")
    return replay(events)[ids.pop()].state


# =====================================================================
# SERVICE
# =====================================================================

def _check_actor(actor: str) -> str:
    if not actor or "\n" in actor or "\r" in actor:
        raise WorkflowError(f"invalid actor id: {actor!r}")
    return actor


class Workflow:
    def __init__(
        self,
        store: RepositoryStore,
        log: EventLog,
        clock: Callable[[], datetime] | None = None,
    ):
        self.store = store
        self.log = log
        self._clock = clock or (lambda: datetime.now(timezone.utc))
        self._lock = threading.RLock()

    def _now(self) -> str:
        return self._clock().astimezone(timezone.utc).isoformat(timespec="seconds")

    def requests(self) -> dict[str, ChangeRequest]:
        return replay(self.log.events())

    def get(self, request_id: str) -> ChangeRequest:
        try:
            return self.requests()[request_id]
        except KeyError:
            raise UnknownRequest(f"no change request {request_id}") from None

    def history(self, request_id: str) -> list[TransitionEvent]:
        self.get(request_id)
        return [e for e in self.log.events() if e.request_id == request_id]

    def _version_hash(self, path: str, version: int) -> str:
        try:
            records = self.store.history(path)
        except NotFound:
            raise UnknownVersion(f"{path} is not in the repository") from None
        if not 1 <= version <= len(records):
            raise UnknownVersion(f"{path} has no version {version}")
        return records[version - 1].sha256

    def create_request(
        self,
        resource_path: str,
        requester: str,
        base_version: int,
        proposed_version: int,
        title: str = "",
        description: str = "",
        reviewers: Sequence[str] = (),
        request_id: str | None = None,
    ) -> tuple[ChangeRequest, TransitionEvent]:
        """
        Open a Draft request for moving `resource_path` from base to proposed.

        Raises:
            UnknownVersion: either version is not in the repository
            NoChange: proposed_version is not after base_version
            DuplicateId: request_id is already taken
        """
        _check_actor(requester)
        path = normalize_path(resource_path)
        self._version_hash(path, base_version)
        self._version_hash(path, proposed_version)
        if proposed_version <= base_version:
            raise NoChange(f"proposed version {proposed_version} is not after base version {base_version}")
        with self._lock:
            existing = self.requests()
            rid = request_id or f"CR-{len(existing) + 1:05d}"
            if rid in existing:
                raise DuplicateId(f"change request {rid} already exists")
            payload = {
                "resource_path": path,
                "requester": requester,
                "title": title,
                "description": description,
                "base_version": base_version,
                "proposed_version": proposed_version,
                "reviewers": sorted(set(reviewers)),
            }
            event = self.log.append(rid, Action.CREATE, requester, self._now(), payload)
        logger.info(f"[FLOW] {rid} created by {requester} for {path} v{base_version}->v{proposed_version}")
        return self.get(rid), event

    def sign(self, request_id: str, action: Action, actor: str) -> Signature:
        """Signature over the request's proposed version as stored now."""
        if action not in SIGNED_ACTIONS:
            raise WorkflowError(f"{action.value} does not take a signature")
        cr = self.get(request_id)
        return Signature(
            actor=actor,
            timestamp=self._now(),
            content_hash=self._version_hash(cr.resource_path, cr.proposed_version),
            statement=SIGNED_ACTIONS[action],
        )

    def transition(
        self,
        request_id: str,
        action: Action,
        actor: str,
        signature: Signature | None = None,
        comment: str = "",
    ) -> tuple[ChangeRequest, TransitionEvent]:
        """
        Apply one action to a request.

        Raises:
            UnknownRequest: no such request
            IllegalTransition: (state, action) is not in the table
            SeparationOfDuties: requester approving/rejecting, a non-reviewer
                reviewing, or someone else withdrawing
            MissingSignature / BadSignature: Approve/Reject signature absent
                or not over the proposed version
        """
        _check_actor(actor)
        action = Action(action)
        if action is Action.CREATE:
            raise IllegalTransition("use create_request to open a request")
        with self._lock:
            cr = self.get(request_id)
            apply_action(cr.state, action)

            if action is Action.WITHDRAW and actor != cr.requester:
                raise SeparationOfDuties(f"only the requester {cr.requester} may withdraw {request_id}")
            if action in (Action.SUBMIT, Action.REWORK) and actor != cr.requester:
                raise SeparationOfDuties(f"only the requester {cr.requester} may {action.value} {request_id}")
            if action in (Action.START_REVIEW, Action.APPROVE, Action.REJECT):
                if actor == cr.requester and action is not Action.START_REVIEW:
                    raise SeparationOfDuties(f"{actor} requested {request_id} and cannot review it")
                if cr.reviewers and actor not in cr.reviewers:
                    raise SeparationOfDuties(f"{actor} is not an assigned reviewer of {request_id}")

            payload: dict = {"comment": comment} if comment else {}
            if action in SIGNED_ACTIONS:
                if signature is None:
                    raise MissingSignature(f"{action.value} on {request_id} needs a signature")
                expected = self._version_hash(cr.resource_path, cr.proposed_version)
                if signature.content_hash != expected:
                    raise BadSignature(f"signature does not match {cr.resource_path} v{cr.proposed_version}")
                if signature.actor != actor or signature.statement != SIGNED_ACTIONS[action]:
                    raise BadSignature(f"signature is not {actor}'s {SIGNED_ACTIONS[action]} statement")
                payload["signature"] = signature.to_dict()

            event = self.log.append(request_id, action, actor, self._now(), payload)
            if action is Action.APPROVE:
                self.store.record_approval(
                    cr.resource_path, cr.proposed_version, actor, f"{request_id} approved",
                )
        updated = self.get(request_id)
        logger.info(f"[FLOW] {request_id} {action.value} by {actor}: {cr.state.value} -> {updated.state.value}")
        return updated, event

    def verify(self) -> tuple[bool, int | None]:
        return verify_log(self.log.events())
