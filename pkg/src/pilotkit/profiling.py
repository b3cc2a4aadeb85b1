"""Postmortem analysis of a session's event log.

All times come from the monotonic ``ts`` field (integer nanoseconds);
wall-clock stamps are never used for arithmetic. Results are pure
functions of the log, so analyses of a copied session are identical.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from pathlib import Path

from .exceptions import IllegalHistory, NoSuchSession, PilotNeverActive, UnknownEntity
from .states import BY_KIND, UNIT, PilotState, UnitState
from .store import EVENTS, replay_file

DEFAULT_RESOLUTION = 0.1
NS = 1_000_000_000


class Profile:
    """Events of one session, indexed by entity, with validated histories."""

    def __init__(self, events: list[dict], validate: bool = True):
        self.events = sorted(events, key=lambda e: (e.get("seq") or 0))
        self.kinds: dict[str, str] = {}
        self.index: dict[str, list[dict]] = defaultdict(list)
        for ev in self.events:
            kind = ev["entity_kind"]
            machine = BY_KIND.get(kind)
            if machine is None or ev["event_name"] not in machine:
                continue
            self.kinds[ev["entity_id"]] = kind
            self.index[ev["entity_id"]].append(ev)
        self.index = dict(self.index)
        self.t0 = min((e["ts"] for e in self.events), default=0)
        self.t_end = max((e["ts"] for e in self.events), default=0)
        if validate:
            for eid in self.index:
                self._validate(eid)

    @classmethod
    def load(cls, session_dir, on_corrupt=None, validate: bool = True) -> "Profile":
        path = Path(session_dir)
        if not path.is_dir() or not (path / EVENTS).is_file():
            raise NoSuchSession(str(session_dir))
        return cls(replay_file(path / EVENTS, on_corrupt=on_corrupt), validate)

    def _validate(self, eid):
        machine = BY_KIND[self.kinds[eid]]
        states = [e["event_name"] for e in self.index[eid]]
        for a, b in zip(states, states[1:]):
            if not machine.is_legal(a, b):
                raise IllegalHistory(f"{eid}: {a} -> {b} is not a legal transition")

    def entities(self, kind=None) -> list[str]:
        kind = getattr(kind, "value", kind)
        return sorted(e for e, k in self.kinds.items() if kind is None or k == kind)

    def history(self, entity_id) -> list[dict]:
        try:
            return self.index[entity_id]
        except KeyError:
            raise UnknownEntity(entity_id) from None

    def intervals(self, entity_id) -> list[tuple[str, int, int]]:
        """(state, enter, exit) in ns; the last state extends to the end of the log."""
        hist = self.history(entity_id)
        out = []
        for i, ev in enumerate(hist):
            exit_ts = hist[i + 1]["ts"] if i + 1 < len(hist) else self.t_end
            out.append((ev["event_name"], ev["ts"], exit_ts))
        return out

    def payload(self, entity_id, state) -> dict:
        for ev in self.history(entity_id):
            if ev["event_name"] == state:
                return ev.get("payload") or {}
        return {}

    def unit_cores(self, unit_id) -> int:
        return int(self.payload(unit_id, UnitState.NEW.value).get("cores", 1))

    def unit_pilot(self, unit_id) -> str | None:
        return self.payload(unit_id, UnitState.UMGR_STAGING_INPUT.value).get("pilot")

    def pilot_cores(self, pilot_id) -> int:
        desc = self.payload(pilot_id, PilotState.NEW.value).get("description") or {}
        if "cores" in desc:
            return int(desc["cores"])
        slots = self.payload(pilot_id, PilotState.ACTIVE.value).get("slots") or {}
        return int(slots.get("cores", 0))


def durations(profile: Profile, entity_id) -> dict[str, float]:
    """Seconds spent in each state; the final state counts zero."""
    hist = profile.history(entity_id)
    if len(hist) < 2:
        raise IllegalHistory(f"{entity_id}: need at least two state events, have {len(hist)}")
    out = {}
    for cur, nxt in zip(hist, hist[1:]):
        out[cur["event_name"]] = (nxt["ts"] - cur["ts"]) / NS
    out[hist[-1]["event_name"]] = 0.0
    return out


def _kind_for(state, kind=None) -> str:
    if kind is not None:
        return getattr(kind, "value", kind)
    if state in UNIT:
        return "UNIT"
    for name, machine in BY_KIND.items():
        if state in machine:
            return name
    return "UNIT"


def concurrency(profile: Profile, state, resolution: float = DEFAULT_RESOLUTION, kind=None,
                weight: str | None = None) -> list[tuple[float, int]]:
    """Entities in ``state`` sampled every ``resolution`` seconds from the first event.

    An entity counts at sample time t when it entered the state at or
    before t and left it after t. With ``weight="cores"`` each unit counts
    its core count instead of 1.
    """
    if not resolution > 0:
        raise ValueError("resolution must be > 0")
    state = getattr(state, "value", state)
    kind = _kind_for(state, kind)
    spans = []
    for eid in profile.entities(kind):
        for name, enter, leave in profile.intervals(eid):
            if name == state:
                w = profile.unit_cores(eid) if weight == "cores" else 1
                spans.append((enter, leave, w))
    if not spans:
        return []
    res_ns = round(resolution * NS)
    n = (profile.t_end - profile.t0) // res_ns + 1
    # difference array over sample indices: sample k covers enter <= t0 + k*res < leave
    diff = [0] * (n + 1)
    for enter, leave, w in spans:
        first = max(0, math.ceil((enter - profile.t0) / res_ns))
        last = (leave - profile.t0 - 1) // res_ns
        if last >= first:
            diff[first] += w
            diff[min(last, n - 1) + 1] -= w
    series, running = [], 0
    for k in range(n):
        running += diff[k]
        series.append((round(k * resolution, 9), running))
    return series


def peak(series) -> int:
    return max((c for _, c in series), default=0)


def utilization(profile: Profile, pilot_id) -> float:
    """Core-seconds used by units over core-seconds the pilot was ACTIVE."""
    active = [(enter, leave) for name, enter, leave in profile.intervals(pilot_id)
              if name == PilotState.ACTIVE.value]
    if not active:
        raise PilotNeverActive(pilot_id)
    start, stop = active[0]
    if stop <= start:
        return 0.0
    cores = profile.pilot_cores(pilot_id)
    if cores <= 0:
        return 0.0
    used = 0
    for uid in profile.entities("UNIT"):
        if profile.unit_pilot(uid) != pilot_id:
            continue
        c = profile.unit_cores(uid)
        for name, enter, leave in profile.intervals(uid):
            if name == UnitState.EXECUTING.value:
                lo, hi = max(enter, start), min(leave, stop)
                if hi > lo:
                    used += c * (hi - lo)
    return used / (cores * (stop - start))


def summary(profile: Profile, resolution: float = DEFAULT_RESOLUTION) -> dict:
    final: dict[str, dict[str, int]] = {}
    for eid, kind in sorted(profile.kinds.items()):
        last = profile.index[eid][-1]["event_name"]
        counts = final.setdefault(kind, {})
        counts[last] = counts.get(last, 0) + 1
    pilots = {}
    for pid in profile.entities("PILOT"):
        try:
            pilots[pid] = {"cores": profile.pilot_cores(pid), "utilization": utilization(profile, pid)}
        except PilotNeverActive:
            pilots[pid] = {"cores": profile.pilot_cores(pid), "utilization": None}
    series = concurrency(profile, UnitState.EXECUTING.value, resolution)
    return {
        "events": len(profile.events),
        "span": (profile.t_end - profile.t0) / NS,
        "final_states": {k: dict(sorted(v.items())) for k, v in sorted(final.items())},
        "pilots": pilots,
        "peak_executing": peak(series),
        "resolution": resolution,
    }


def to_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def series_to_csv(series, value_name="count") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", value_name])
    for t, c in series:
        w.writerow([repr(float(t)), c])
    return buf.getvalue()
