"""Side-by-side summary of several runs on one experiment."""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ContractError
from .trace import RunTrace

# Reference step counts and seconds from the original study; shown for context, never asserted.
REFERENCE_ROW = "reference: MCMC 289 steps / 8060.6s, RLMCMC 191 / 7274.6s, eRLMCMC 349 / 9680.4s"

COLUMNS = ("method", "seed", "accepted", "wall_s", "final_misfit", "steps_to_threshold")
_NUMERIC = COLUMNS[2:]


@dataclass(frozen=True)
class ComparisonRow:
    method: str
    seed: int
    accepted: int
    wall_s: float
    final_misfit: float
    steps_to_threshold: int | None


def _median_steps(values: list[int | None]) -> float | None:
    # a run that never crossed counts as infinitely slow
    med = statistics.median(math.inf if v is None else v for v in values)
    return None if math.isinf(med) else float(med)


@dataclass
class ComparisonReport:
    experiment: str
    threshold: float
    rows: list[ComparisonRow]
    traces: list[RunTrace] = field(repr=False)

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def medians(self) -> dict[str, dict[str, float | None]]:
        out = {}
        for m in self.methods:
            rs = [r for r in self.rows if r.method == m]
            out[m] = {
                "accepted": float(statistics.median(r.accepted for r in rs)),
                "wall_s": float(statistics.median(r.wall_s for r in rs)),
                "final_misfit": float(statistics.median(r.final_misfit for r in rs)),
                "steps_to_threshold": _median_steps([r.steps_to_threshold for r in rs]),
            }
        return out

    def differences(self, i: int, j: int) -> dict[str, float]:
        """Column-wise ``rows[i] - rows[j]``; runs that never crossed compare as equal only to each other."""
        a, b = self.rows[i], self.rows[j]
        out = {}
        for c in _NUMERIC:
            x, y = getattr(a, c), getattr(b, c)
            if x is None or y is None:
                out[c] = 0.0 if x is y else math.inf
            else:
                out[c] = float(x - y)
        return out

    def header(self) -> list[str]:
        return [
            f"experiment: {self.experiment}",
            f"misfit threshold: {self.threshold:.6g}",
            REFERENCE_ROW,
        ]

    def text(self) -> str:
        lines = [f"# {h}" for h in self.header()]
        lines.append("  ".join(f"{c:>18}" for c in COLUMNS))
        for r in self.rows:
            lines.append("  ".join(f"{_fmt(getattr(r, c)):>18}" for c in COLUMNS))
        lines.append("medians:")
        for m, med in self.medians().items():
            vals = "  ".join(f"{k}={_fmt(v)}" for k, v in med.items())
            lines.append(f"  {m}: {vals}")
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            for h in self.header():
                fh.write(f"# {h}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
            for m, med in self.medians().items():
                w.writerow([m, "median"] + [_fmt(med[c]) for c in _NUMERIC])

    def write_svg(self, path: str | Path) -> None:
        plot_traces(self.traces, path, threshold=self.threshold, title=self.experiment)

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.write_csv(out / "comparison.csv")
        self.write_svg(out / "comparison.svg")
        (out / "comparison.txt").write_text(self.text() + "\n")


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def compare(traces: list[RunTrace], threshold: float | None = None) -> ComparisonReport:
    """Tabulate runs of one experiment; the threshold defaults to the one recorded by the runs."""
    if len(traces) < 2:
        raise ContractError(f"need at least 2 traces to compare, got {len(traces)}")
    names = {t.meta.get("experiment") for t in traces}
    if len(names) != 1:
        raise ContractError(f"traces come from different experiments: {sorted(map(str, names))}")
    if threshold is None:
        thresholds = {t.meta.get("threshold") for t in traces}
        if len(thresholds) != 1 or None in thresholds:
            raise ContractError(f"traces disagree on the misfit threshold: {thresholds}")
        (threshold,) = thresholds
    rows = [
        ComparisonRow(
            method=str(t.meta.get("method")),
            seed=int(t.meta.get("seed", -1)),
            accepted=t.final.accepted_total,
            wall_s=float(t.meta.get("wall_s", 0.0)),
            final_misfit=float(t.final.misfit),
            steps_to_threshold=t.steps_to_threshold(threshold),
        )
        for t in traces
    ]
    return ComparisonReport(names.pop(), float(threshold), rows, list(traces))


def plot_traces(traces: list[RunTrace], path: str | Path, threshold: float | None = None, title: str = "") -> None:
    """Misfit against accepted step, one line per run, coloured by method."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    colors = {"mcmc": "tab:blue", "rlmcmc": "tab:orange", "erlmcmc": "tab:green"}
    fig, ax = plt.subplots(figsize=(7, 4.5))
    seen = set()
    for t in traces:
        m = str(t.meta.get("method", "run"))
        label = None if m in seen else m
        seen.add(m)
        ax.plot(
            [r.accepted_total for r in t.rows],
            t.misfits,
            color=colors.get(m),
            alpha=0.7,
            lw=1.0,
            label=label,
        )
    if threshold is not None:
        ax.axhline(threshold, color="k", ls="--", lw=0.8, label="threshold")
    ax.set_xlabel("accepted step")
    ax.set_ylabel("misfit")
    ax.set_yscale("log")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
