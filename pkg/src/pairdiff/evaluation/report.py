"""Tabular reports written as CSV plus a Markdown rendering."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class Report:
    title: str
    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def add(self, **row) -> None:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"report '{self.title}' has no columns {sorted(unknown)}")
        self.rows.append(row)

    def column(self, name: str) -> list:
        return [r.get(name) for r in self.rows]

    def row(self, key_column: str, key) -> dict:
        for r in self.rows:
            if r.get(key_column) == key:
                return r
        raise KeyError(f"no row with {key_column}={key!r}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({c: _fmt(r.get(c)) for c in self.columns})
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = [f"## {self.title}", ""]
        lines += [f"> {n}" for n in self.notes]
        if self.notes:
            lines.append("")
        lines.append("| " + " | ".join(self.columns) + " |")
        lines.append("|" + "|".join("---" for _ in self.columns) + "|")
        for r in self.rows:
            lines.append("| " + " | ".join(_fmt(r.get(c)) for c in self.columns) + " |")
        return "\n".join(lines) + "\n"

    def write(self, directory, stem: str) -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        csv_path, md_path = d / f"{stem}.csv", d / f"{stem}.md"
        csv_path.write_text(self.to_csv())
        md_path.write_text(self.to_markdown())
        return csv_path, md_path


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)
