"""Run traces and their CSV form."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..field import ChannelRect, GlobalState

TRACE_COLUMNS = ("step", "accepted_total", "misfit", "level_reached", "wall_ms", "state")


def format_state(s: GlobalState) -> str:
    return ";".join(",".join(str(int(v)) for v in c) for c in s)


def parse_state(text: str) -> GlobalState:
    if not text:
        return ()
    return tuple(ChannelRect(*(int(v) for v in part.split(","))) for part in text.split(";"))


@dataclass
class TraceRow:
    step: int
    accepted_total: int
    misfit: float
    level_reached: int
    wall_ms: float
    state: GlobalState


@dataclass
class RunTrace:
    """Accepted states of one chain (or updates of one pure-RL run).

    ``rejections[k]`` holds per-level rejection counts accumulated before row ``k``.
    """

    rows: list[TraceRow] = field(default_factory=list)
    rejections: list[list[int]] = field(default_factory=list)
    rl_updates: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    # trained agents of an RL run, kept in memory only
    agents: Any = field(default=None, repr=False, compare=False)

    @property
    def misfits(self) -> list[float]:
        return [r.misfit for r in self.rows]

    @property
    def final(self) -> TraceRow:
        return self.rows[-1]

    def steps_to_threshold(self, threshold: float) -> int | None:
        """First accepted-step index whose misfit is below ``threshold``."""
        for r in self.rows:
            if r.misfit < threshold:
                return r.accepted_total
        return None

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "trace.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for r in self.rows:
                w.writerow([r.step, r.accepted_total, repr(float(r.misfit)), r.level_reached, f"{r.wall_ms:.3f}", format_state(r.state)])
        with open(out / "rejections.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            n = max((len(x) for x in self.rejections), default=0)
            w.writerow(["accepted_total"] + [f"rejected_level_{k}" for k in range(n)])
            for r, rej in zip(self.rows, self.rejections):
                w.writerow([r.accepted_total] + list(rej))
        if self.rl_updates:
            keys = list(self.rl_updates[0])
            with open(out / "rl_updates.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
                w.writeheader()
                for u in self.rl_updates:
                    w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in u.items()})
        (out / "meta.json").write_text(json.dumps(self.meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "RunTrace":
        """Load from a run directory or a trace.csv path."""
        p = Path(path)
        d = p if p.is_dir() else p.parent
        csv_path = p if p.is_file() else p / "trace.csv"
        rows = []
        with open(csv_path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append(
                    TraceRow(
                        step=int(rec["step"]),
                        accepted_total=int(rec["accepted_total"]),
                        misfit=float(rec["misfit"]),
                        level_reached=int(rec["level_reached"]),
                        wall_ms=float(rec["wall_ms"]),
                        state=parse_state(rec["state"]),
                    )
                )
        meta = {}
        if (d / "meta.json").exists():
            meta = json.loads((d / "meta.json").read_text())
        rejections = []
        if (d / "rejections.csv").exists():
            with open(d / "rejections.csv", newline="") as fh:
                reader = csv.reader(fh)
                next(reader, None)
                rejections = [[int(v) for v in row[1:]] for row in reader]
        return cls(rows=rows, rejections=rejections, meta=meta)
