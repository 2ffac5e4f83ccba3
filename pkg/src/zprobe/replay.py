"""Transcript files and deterministic re-execution.

A transcript file holds a magic header followed by records. Each record is
a JSON block with everything needed to re-run one round (kind, seeds,
encoded updates, parameters) and the raw bytes of every message that
round logged. Replay re-executes the round and compares its messages,
byte for byte, against the logged ones.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from zprobe.attacks import AttackSpec
from zprobe.field import FixedVec
from zprobe.secagg import DropStage, RoundTranscript, run_aggregation

MAGIC = b"ZPRB\x01"
_REC = struct.Struct("<IQ")  # json length, message-bytes length


class TranscriptError(ValueError):
    """Malformed or truncated transcript file."""


@dataclass
class Record:
    inputs: dict
    body: bytes


@dataclass
class ReplayResult:
    ok: bool
    sessions: int = 0
    messages: int = 0
    session: int | None = None
    index: int | None = None
    reason: str = ""

    def describe(self) -> str:
        if self.ok:
            return f"replay ok: {self.sessions} session(s), {self.messages} message(s) match"
        where = "" if self.session is None else f" (session {self.session}"
        if where and self.index is not None:
            where += f", message {self.index}"
        return f"replay FAILED{where + ')' if where else ''}: {self.reason}"


def aggregation_inputs(updates, **kwargs) -> dict:
    """Inputs block for a bare ``run_aggregation`` call."""
    drops = kwargs.pop("dropouts", None) or {}
    first = updates[min(updates)]
    return {
        "kind": "aggregation",
        "scale_bits": first.scale_bits,
        "updates": {str(i): u.tolist() for i, u in updates.items()},
        "dropouts": {str(i): DropStage(s).value for i, s in drops.items()},
        "kwargs": kwargs,
    }


def write_transcript(path: str | Path, records: Iterable[tuple[dict, RoundTranscript]]) -> int:
    count = 0
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for inputs, tr in records:
            meta = json.dumps(inputs, sort_keys=True, separators=(",", ":")).encode()
            body = tr.to_bytes()
            fh.write(_REC.pack(len(meta), len(body)))
            fh.write(meta)
            fh.write(body)
            count += 1
    return count


def read_transcript(path: str | Path) -> list[Record]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise TranscriptError("not a transcript file (bad magic)")
    off, out = len(MAGIC), []
    while off < len(buf):
        if off + _REC.size > len(buf):
            raise TranscriptError(f"truncated record header in session {len(out)}")
        meta_len, body_len = _REC.unpack_from(buf, off)
        off += _REC.size
        end = off + meta_len + body_len
        if end > len(buf):
            raise TranscriptError(
                f"truncated transcript: session {len(out)} declares {meta_len + body_len} bytes, "
                f"{len(buf) - off} present")
        try:
            inputs = json.loads(buf[off:off + meta_len])
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise TranscriptError(f"session {len(out)}: unreadable inputs block ({exc})") from None
        out.append(Record(inputs, buf[off + meta_len:end]))
        off = end
    return out


def _updates(inputs: dict) -> dict[int, FixedVec]:
    f = int(inputs["scale_bits"])
    return {int(i): FixedVec(np.array(v, dtype=np.uint64), f) for i, v in inputs["updates"].items()}


def reexecute(inputs: dict) -> RoundTranscript:
    kind = inputs.get("kind", "epoch")
    if kind == "aggregation":
        drops = {int(i): DropStage(s) for i, s in inputs["dropouts"].items()}
        return run_aggregation(_updates(inputs), dropouts=drops, **inputs["kwargs"])
    if kind == "epoch":
        from zprobe.harness import RoundParams, deviation_factories, secure_round

        attack = AttackSpec.from_dict(inputs["attack"])
        factories = deviation_factories(attack, inputs["byzantine"], int(inputs["epoch"]))
        drops = {int(s): {int(c): DropStage(v) for c, v in d.items()}
                 for s, d in inputs["dropouts"].items()}
        outcome = secure_round(_updates(inputs), RoundParams.from_dict(inputs["params"]),
                               int(inputs["seed"]), factories, drops)
        return outcome.transcript
    raise TranscriptError(f"unknown session kind {kind!r}")


def compare(record: Record, regenerated: RoundTranscript) -> tuple[int, str] | None:
    """First divergent message index and reason, or None when identical."""
    off = 0
    body = record.body
    for idx, msg in enumerate(regenerated.messages):
        want = msg.to_bytes()
        got = body[off:off + len(want)]
        if len(got) < len(want):
            return idx, f"truncated: log ends inside message {idx} ({len(body)} bytes logged)"
        if got != want:
            return idx, f"payload differs from re-execution ({msg.kind.name} {msg.sender}->{msg.receiver})"
        off += len(want)
    if off != len(body):
        return len(regenerated.messages), f"{len(body) - off} unexpected trailing bytes"
    return None


def replay(path: str | Path) -> ReplayResult:
    try:
        records = read_transcript(path)
    except (OSError, TranscriptError) as exc:
        return ReplayResult(False, reason=str(exc))
    total = 0
    for s, rec in enumerate(records):
        try:
            tr = reexecute(rec.inputs)
        except (KeyError, TypeError, ValueError) as exc:
            return ReplayResult(False, s, total, s, None, f"cannot re-execute: {exc!r}")
        diff = compare(rec, tr)
        if diff is not None:
            return ReplayResult(False, s, total, s, diff[0], diff[1])
        total += len(tr.messages)
    return ReplayResult(True, len(records), total)
