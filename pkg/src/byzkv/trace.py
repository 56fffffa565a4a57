"""Run trace: newline-delimited records, stable digests, file round-trip.

Record line format: ``t=<us> ev=<type> src=<id> dst=<id> req=<id> detail=<...>``
with detail fields sorted by name. The trace digest is the SHA-256 of the
serialized log, so two runs are comparable by a single hash.
"""

from __future__ import annotations

import hashlib


def _norm(value) -> str:
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (list, tuple)):
        return "[" + ";".join(_norm(v) for v in value) + "]"
    return str(value)


class TraceLog:
    def __init__(self, verbose: bool = False):
        self.verbose = verbose
        self.records: list[tuple] = []  # (t, ev, src, dst, req, detail_items)
        self.header: list[str] = []

    def record(self, t: int, ev: str, src: str = "-", dst: str = "-",
               req=-1, **detail) -> None:
        items = tuple(sorted((k, _norm(v)) for k, v in detail.items()))
        self.records.append((t, ev, src, dst, req, items))

    def lines(self) -> list[str]:
        out = []
        for t, ev, src, dst, req, items in self.records:
            detail = ",".join(f"{k}={v}" for k, v in items)
            out.append(f"t={t} ev={ev} src={src} dst={dst} req={req} detail={detail}")
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in self.lines():
            h.update(line.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()

    def count(self, ev: str) -> int:
        return sum(1 for r in self.records if r[1] == ev)

    def find(self, ev: str) -> list[tuple]:
        return [r for r in self.records if r[1] == ev]

    def write(self, path: str) -> None:
        with open(path, "w") as fh:
            for line in self.header:
                fh.write("# " + line + "\n")
            for line in self.lines():
                fh.write(line + "\n")
            fh.write(f"# trace-digest {self.digest()}\n")


def parse_trace_file(path: str) -> tuple[list[str], list[dict], str | None]:
    """Returns (header lines, records as dicts, embedded digest)."""
    header: list[str] = []
    records: list[dict] = []
    embedded = None
    with open(path) as fh:
        for raw in fh:
            raw = raw.rstrip("\n")
            if raw.startswith("# trace-digest "):
                embedded = raw.split()[-1]
                continue
            if raw.startswith("# "):
                header.append(raw[2:])
                continue
            if not raw.strip():
                continue
            rec: dict = {}
            head, _, detail = raw.partition(" detail=")
            for part in head.split():
                k, _, v = part.partition("=")
                rec[k] = v
            fields = {}
            if detail:
                for part in detail.split(","):
                    k, _, v = part.partition("=")
                    fields[k] = v
            rec["detail"] = fields
            records.append(rec)
    return header, records, embedded
