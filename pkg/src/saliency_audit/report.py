"""Run records and export formats.

JSON output is canonical: keys sorted, floats printed with 17 significant
digits (enough to round-trip IEEE doubles), no locale dependence. Identical
payloads therefore serialize to identical bytes, which is what makes the
seed-reproducibility contract checkable with a byte comparison.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "RunRecord",
    "ReportError",
    "canonical_json",
    "write_run_record",
    "flatten_cells",
    "write_csv",
    "export_saliency_pgm",
    "export_text_heat",
]

SCHEMA_VERSION = 1


class ReportError(ValueError):
    pass


def _format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ReportError(f"non-finite value {x!r} cannot be serialized canonically")
    return format(x, ".17g")


def _canonical(obj, out: list[str]) -> None:
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=True))
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_format_float(float(obj)))
    elif isinstance(obj, dict):
        out.append("{")
        for i, key in enumerate(sorted(obj)):
            if not isinstance(key, str):
                raise ReportError(f"JSON keys must be strings, got {type(key).__name__}")
            if i:
                out.append(",")
            out.append(json.dumps(key, ensure_ascii=True))
            out.append(":")
            _canonical(obj[key], out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, item in enumerate(obj):
            if i:
                out.append(",")
            _canonical(item, out)
        out.append("]")
    elif isinstance(obj, np.ndarray):
        _canonical(obj.tolist(), out)
    else:
        raise ReportError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj) -> str:
    parts: list[str] = []
    _canonical(obj, parts)
    return "".join(parts)


@dataclass
class RunRecord:
    """One CLI invocation: command echo, seed, config and results payload.

    ``timing_seconds`` stays None unless explicitly requested, so default
    records are byte-reproducible across runs.
    """

    command: list[str]
    master_seed: int
    config: dict
    results: dict
    timing_seconds: float | None = None
    schema_version: int = SCHEMA_VERSION

    def to_record(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "command": list(self.command),
            "master_seed": self.master_seed,
            "config": self.config,
            "results": self.results,
            "timing_seconds": self.timing_seconds,
        }


def write_run_record(record: RunRecord, path) -> None:
    Path(path).write_bytes((canonical_json(record.to_record()) + "\n").encode("utf-8"))


def flatten_cells(cells: list[dict], context: tuple[str, ...]) -> list[dict]:
    """One CSV row per (cell, metric); context columns echo the cell fields."""
    rows = []
    for cell in cells:
        base = {key: cell[key] for key in context if key in cell}
        for metric, value in cell["metrics"].items():
            row = dict(base)
            row["metric"] = metric
            row["value"] = value
            rows.append(row)
    return rows


def write_csv(rows: list[dict], path) -> None:
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    fieldnames = list(rows[0].keys())
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        formatted = {
            k: (_format_float(v) if isinstance(v, (float, np.floating)) else v)
            for k, v in row.items()
        }
        writer.writerow(formatted)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def export_saliency_pgm(map2d, path) -> None:
    """Binary PGM (P5, maxval 255); input must already be scaled to [0, 1]."""
    arr = np.asarray(getattr(map2d, "array", map2d), dtype=np.float64)
    if arr.ndim != 2:
        raise ReportError(f"saliency map must be 2-D, got shape {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ReportError("saliency map values must lie in [0, 1]; normalize first")
    h, w = arr.shape
    pixels = np.floor(arr * 255.0 + 0.5).astype(np.uint8)   # round half up
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _heat_color(score: float) -> str:
    # -1 -> full red, 0 -> white, +1 -> full green
    if score >= 0:
        level = int(round(255 * (1.0 - score)))
        return f"rgb({level},255,{level})"
    level = int(round(255 * (1.0 + score)))
    return f"rgb(255,{level},{level})"


def export_text_heat(tokens: list[str], scores, path) -> None:
    """HTML fragment with per-token heat colors, plus a (token, score) CSV."""
    values = [float(s) for s in np.asarray(getattr(scores, "array", scores), dtype=np.float64).reshape(-1)]
    if len(tokens) != len(values):
        raise ReportError(f"{len(tokens)} tokens but {len(values)} scores")
    for v in values:
        if not (-1.0 <= v <= 1.0):
            raise ReportError(f"score {v} outside [-1, 1]")
    spans = "".join(
        f'<span style="background-color:{_heat_color(v)}">{_escape(tok)}</span> '
        for tok, v in zip(tokens, values)
    )
    html = f'<div class="token-heat">{spans.rstrip()}</div>\n'
    path = Path(path)
    path.write_text(html, encoding="utf-8")
    rows = "token,score\n" + "".join(
        f"{_csv_quote(tok)},{_format_float(v)}\n" for tok, v in zip(tokens, values)
    )
    path.with_suffix(".csv").write_text(rows, encoding="utf-8")


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _csv_quote(text: str) -> str:
    if any(ch in text for ch in ',"\n'):
        return '"' + text.replace('"', '""') + '"'
    return text
