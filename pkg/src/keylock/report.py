"""Protection report: JSON schema and the accuracy table."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

SCHEMA_VERSION = 1


@dataclass
class AttackResult:
    subset_size: int
    epochs: int
    accuracy: float
    forged_fingerprint: Optional[str] = None
    seconds: float = 0.0


@dataclass
class ProtectedResult:
    block_size: int
    key_fingerprint: str
    accuracy_correct: float
    accuracy_forged: list[float]
    forged_fingerprints: list[str]
    accuracy_plain: float
    attacks: list[AttackResult] = field(default_factory=list)
    attack_monotone: Optional[bool] = None
    runtimes: dict = field(default_factory=dict)

    @property
    def accuracy_forged_mean(self) -> float:
        return sum(self.accuracy_forged) / len(self.accuracy_forged) if self.accuracy_forged else float("nan")


@dataclass
class BaselineResult:
    accuracy: float
    key_fingerprint: Optional[str] = None
    runtimes: dict = field(default_factory=dict)


@dataclass
class ProtectionReport:
    baseline: Optional[BaselineResult]
    protected: list[ProtectedResult]
    config: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def row(self, block_size: int) -> ProtectedResult:
        for r in self.protected:
            if r.block_size == block_size:
                return r
        raise KeyError(block_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        for r, rd in zip(self.protected, d["protected"]):
            rd["accuracy_forged_mean"] = r.accuracy_forged_mean
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "ProtectionReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')}")
        rows = []
        for rd in d["protected"]:
            rd = dict(rd)
            rd.pop("accuracy_forged_mean", None)
            rd["attacks"] = [AttackResult(**a) for a in rd.get("attacks", [])]
            rows.append(ProtectedResult(**rd))
        base = BaselineResult(**d["baseline"]) if d.get("baseline") else None
        return cls(base, rows, d.get("config", {}), d["schema_version"])

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ProtectionReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def check_accuracies(self) -> None:
        values = [] if self.baseline is None else [self.baseline.accuracy]
        for r in self.protected:
            values += [r.accuracy_correct, r.accuracy_plain, *r.accuracy_forged]
            values += [a.accuracy for a in r.attacks]
        for v in values:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy {v} outside [0, 1]")


def pct(x: Optional[float]) -> str:
    return "-" if x is None else f"{100.0 * x:.2f}"


def render_report(report: ProtectionReport) -> str:
    """Aligned text table: one row per block size plus the baseline row."""
    sizes = sorted({a.subset_size for r in report.protected for a in r.attacks})
    header = ["Model", "Correct K", "Incorrect K'", "Plain"]
    header += [f"Attack |D'|={s}" for s in sizes] or ["Attack"]
    rows = []
    for r in report.protected:
        by_size = {a.subset_size: a.accuracy for a in r.attacks}
        cells = [f"M = {r.block_size}", pct(r.accuracy_correct),
                 pct(r.accuracy_forged_mean if r.accuracy_forged else None), pct(r.accuracy_plain)]
        cells += [pct(by_size.get(s)) for s in sizes] or ["-"]
        rows.append(cells)
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.rjust(w) if i else c.ljust(w)
                               for i, (c, w) in enumerate(zip(row, widths))))
    if report.baseline is not None:
        lines.append("  ".join("-" * w for w in widths))
        lines.append(f"{'Baseline'.ljust(widths[0])}  {pct(report.baseline.accuracy)} (Not protected)")
    return "\n".join(lines) + "\n"
