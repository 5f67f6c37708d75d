"""Line-structured metrics documents with a stable field order.

Every command emits one document per run. Content lines are deterministic for
a fixed config and seed; timing is carried on a trailing comment line, which
is the one part excluded from the byte-identity contract.
"""

from __future__ import annotations

import hashlib
import time
from pathlib import Path

HEADER = "# andes-metrics v1"


class MetricsDocument:
    def __init__(self, command: str, config_digest: str, seed: int):
        self.command = command
        self.config_digest = config_digest
        self.seed = seed
        self.run_id = hashlib.sha256(f"{command}:{config_digest}:{seed}".encode()).hexdigest()[:16]
        self.scalars: list[tuple[str, str]] = []
        self.rows: list[dict[str, str]] = []
        self._t0 = time.monotonic()

    def add_scalar(self, key: str, value) -> None:
        self.scalars.append((key, _fmt(value)))

    def add_row(self, metric: str, value: float, **dims) -> None:
        row = {"metric": metric}
        row.update({k: _fmt(v) for k, v in sorted(dims.items())})
        row["value"] = _fmt(value)
        self.rows.append(row)

    def render(self) -> str:
        lines = [
            HEADER,
            f"run_id: {self.run_id}",
            f"command: {self.command}",
            f"config_digest: {self.config_digest}",
            f"seed: {self.seed}",
        ]
        lines += [f"{k}: {v}" for k, v in self.scalars]
        for row in self.rows:
            lines.append("\t".join(f"{k}={v}" for k, v in row.items()))
        lines.append(f"# wall_clock_s: {time.monotonic() - self._t0:.3f}")
        return "\n".join(lines) + "\n"

    def write(self, path: Path | str) -> None:
        Path(path).write_text(self.render())


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def content_lines(text: str) -> list[str]:
    """Document lines that participate in the determinism contract."""
    return [line for line in text.splitlines() if not line.startswith("#")]
