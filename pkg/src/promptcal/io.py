"""File formats: logits CSV, checkpoints, JSON with 17-significant-digit floats."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite float {x!r}")
    return format(x + 0.0, ".17g")


def _encode(obj, indent: int | None, level: int) -> str:
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist(), indent, level)
    if hasattr(obj, "to_dict"):
        return _encode(obj.to_dict(), indent, level)
    if isinstance(obj, dict):
        items = [(json.dumps(str(k), ensure_ascii=False), v) for k, v in obj.items()]
        if not items:
            return "{}"
        if indent is None:
            return "{" + ", ".join(f"{k}: {_encode(v, None, level)}" for k, v in items) + "}"
        pad = " " * (indent * (level + 1))
        body = ",\n".join(f"{pad}{k}: {_encode(v, indent, level + 1)}" for k, v in items)
        return "{\n" + body + "\n" + " " * (indent * level) + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if indent is None:
            return "[" + ", ".join(_encode(v, None, level) for v in obj) + "]"
        pad = " " * (indent * (level + 1))
        body = ",\n".join(pad + _encode(v, indent, level + 1) for v in obj)
        return "[\n" + body + "\n" + " " * (indent * level) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent: int | None = 2) -> str:
    """JSON text with every float written as ``%.17g``."""
    return _encode(obj, indent, 0)


def write_json(path: Path, obj) -> None:
    Path(path).write_text(dumps(obj) + "\n", encoding="utf-8", newline="\n")


def write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(dumps(row, indent=None) + "\n")


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- logits CSV --------------------------------------------------------------


def logits_to_csv(logits, labels) -> str:
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    k = z.shape[1]
    lines = ["label," + ",".join(f"z{j}" for j in range(k))]
    for label, row in zip(y, z):
        lines.append(f"{int(label)}," + ",".join(format_float(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def write_logits_csv(path: Path, logits, labels) -> None:
    Path(path).write_text(logits_to_csv(logits, labels), encoding="utf-8", newline="\n")


def parse_logits_csv(text: str) -> tuple[np.ndarray, np.ndarray]:
    """Parse ``label,z0,...,z{K-1}`` CSV text into (logits, labels)."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].strip():
        raise FormatError("empty file", 1)
    header = [h.strip() for h in lines[0].rstrip("\r").split(",")]
    k = len(header) - 1
    if header[0] != "label" or k < 2 or header[1:] != [f"z{j}" for j in range(k)]:
        raise FormatError("header must be label,z0,...,z{K-1} with K >= 2", 1)
    if len(lines) < 2:
        raise FormatError("no samples", 2)
    logits = np.empty((len(lines) - 1, k))
    labels = np.empty(len(lines) - 1, dtype=np.int64)
    for i, raw in enumerate(lines[1:]):
        lineno = i + 2
        fields = raw.rstrip("\r").split(",")
        if len(fields) != k + 1:
            raise FormatError(f"expected {k + 1} fields, got {len(fields)}", lineno)
        try:
            label = int(fields[0])
            row = [float(f) for f in fields[1:]]
        except ValueError as exc:
            raise FormatError(f"cannot parse value ({exc})", lineno) from None
        if not 0 <= label < k:
            raise FormatError(f"label {label} outside [0, {k})", lineno)
        if not all(math.isfinite(v) for v in row):
            raise FormatError("non-finite logit", lineno)
        labels[i] = label
        logits[i] = row
    return logits, labels


def read_logits_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"not UTF-8: {exc}") from None
    return parse_logits_csv(text)


# -- checkpoints ---------------------------------------------------------------


def matrix_to_csv(m: np.ndarray, prefix: str = "t") -> str:
    lines = [",".join(f"{prefix}{j}" for j in range(m.shape[1]))]
    lines += [",".join(format_float(float(v)) for v in row) for row in m]
    return "\n".join(lines) + "\n"


def write_checkpoint(directory: Path, context: np.ndarray, sidecar: dict) -> tuple[Path, Path]:
    """Write ``context.csv`` and ``context.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = directory / "context.csv", directory / "context.json"
    csv_path.write_text(matrix_to_csv(context), encoding="utf-8", newline="\n")
    write_json(json_path, sidecar)
    return csv_path, json_path


def read_checkpoint(directory: Path) -> tuple[np.ndarray, dict]:
    directory = Path(directory)
    csv_path = directory / "context.csv" if directory.is_dir() else directory
    json_path = csv_path.with_suffix(".json")
    rows = csv_path.read_text(encoding="utf-8").strip().split("\n")[1:]
    try:
        context = np.array([[float(v) for v in r.split(",")] for r in rows])
    except ValueError as exc:
        raise FormatError(f"bad checkpoint: {exc}") from None
    sidecar = json.loads(json_path.read_text(encoding="utf-8"))
    return context, sidecar
