"""IoU, accu@t and report writing.

Report JSON schema (``report.json``)::

    {"n": int, "accu_025": float, "accu_05": float,
     "records": [{"id": str, "iou": float, "hit_025": bool, "hit_05": bool}, ...]}

The text table (``report.txt``) shows both accuracies as percentages rounded
half-up to two decimals.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

from .detection import BBox
from .errors import ConfigError, InputError


def iou(a: BBox, b: BBox) -> float:
    for box in (a, b):
        if not (box.w > 0 and box.h > 0):
            raise InputError(f"IoU needs positive box sizes, got {box}")
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    # areas from the same corner values keep iou(a, a) exactly 1
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


@dataclass
class EvalRecord:
    id: str
    iou: float
    hit_025: bool = False
    hit_05: bool = False

    def __post_init__(self):
        self.iou = float(self.iou)
        self.hit_025 = self.iou >= 0.25
        self.hit_05 = self.iou >= 0.5


def accu_at(records, t: float) -> float:
    """Fraction of records with IoU >= t (boundary counts as a hit)."""
    if not 0 < t < 1:
        raise ConfigError(f"threshold must lie in (0, 1), got {t}")
    records = list(records)
    if not records:
        raise InputError("accu@t over an empty record set")
    hits = sum(1 for r in records if (r.iou if isinstance(r, EvalRecord) else r) >= t)
    return hits / len(records)


@dataclass
class EvalReport:
    accu_025: float
    accu_05: float
    records: list[EvalRecord] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.records)

    @classmethod
    def from_records(cls, records: list[EvalRecord]) -> "EvalReport":
        return cls(accu_at(records, 0.25), accu_at(records, 0.5), list(records))

    def to_dict(self) -> dict:
        return {"n": self.n, "accu_025": self.accu_025, "accu_05": self.accu_05,
                "records": [asdict(r) for r in self.records]}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        recs = [EvalRecord(r["id"], r["iou"]) for r in d["records"]]
        return cls(d["accu_025"], d["accu_05"], recs)


def percent(fraction: float) -> str:
    """0.4615 -> '46.15' (half-up rounding on the decimal representation)."""
    value = Decimal(repr(float(fraction))) * 100
    return str(value.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def format_table(rows: list[tuple[str, EvalReport]]) -> str:
    header = ("Method", "accu@0.25(%)", "accu@0.5(%)", "N")
    body = [(name, percent(r.accu_025), percent(r.accu_05), str(r.n)) for name, r in rows]
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
    fmt = lambda row: "  ".join(  # noqa: E731
        cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i]) for i, cell in enumerate(row))
    rule = "-" * len(fmt(header))
    return "\n".join([fmt(header), rule, *(fmt(r) for r in body)]) + "\n"


def write_report(report: EvalReport, path, name: str = "model") -> tuple[Path, Path]:
    """Write ``<path>.json`` and ``<path>.txt``; ``path`` may be a directory."""
    path = Path(path)
    if path.suffix == "" and (path.is_dir() or not path.exists()):
        path.mkdir(parents=True, exist_ok=True)
        stem = path / "report"
    else:
        stem = path.with_suffix("")
    json_path, txt_path = stem.with_suffix(".json"), stem.with_suffix(".txt")
    json_path.write_text(json.dumps(report.to_dict(), indent=2))
    txt_path.write_text(format_table([(name, report)]))
    return json_path, txt_path


def read_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))
