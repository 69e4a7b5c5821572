"""Run outputs: trajectory CSV, per-step JSON log, binary checkpoints.

Float cells are written with ``repr`` (shortest round-trip form), so a rerun
with identical seed and configuration produces byte-identical files in
serial mode.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

TRAJECTORY_COLUMNS = (
    "step", "tau", "beta_eff", "dtau", "energy", "stderr", "var_h",
    "fidelity", "ess", "acc_site", "acc_diag", "acc_swap",
)


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


class RunWriter:
    """Collects trajectory rows, step logs, and checkpoints under one
    output directory."""

    def __init__(self, out_dir, header_lines: list[str] | None = None, base_manifest: dict | None = None):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._rows: list[str] = []
        self._header = header_lines or []
        self.base_manifest = base_manifest or {}
        self._jsonl = open(self.out_dir / "steps.jsonl", "w")

    def trajectory_row(self, **fields):
        self._rows.append(",".join(fmt(fields[c]) for c in TRAJECTORY_COLUMNS))

    def step_log(self, record: dict):
        self._jsonl.write(json.dumps(record, sort_keys=True) + "\n")
        self._jsonl.flush()

    def save_checkpoint(self, tag: str, manifest: dict, arrays: dict) -> Path:
        path = self.out_dir / f"checkpoint_{tag}.npz"
        save_checkpoint(path, {**self.base_manifest, **manifest}, arrays)
        return path

    def finalize(self) -> Path:
        path = self.out_dir / "trajectory.csv"
        with open(path, "w") as fh:
            for line in self._header:
                fh.write(f"# {line}\n")
            fh.write(",".join(TRAJECTORY_COLUMNS) + "\n")
            fh.write("\n".join(self._rows) + ("\n" if self._rows else ""))
        self._jsonl.close()
        return path


def save_checkpoint(path, manifest: dict, arrays: dict) -> None:
    """Versioned npz blob with an embedded JSON manifest."""
    payload = dict(arrays)
    payload["__manifest__"] = np.frombuffer(
        json.dumps({"version": 1, **manifest}, sort_keys=True).encode(), dtype=np.uint8
    )
    buf = io.BytesIO()
    np.savez(buf, **payload)
    # repack with fixed timestamps so identical content gives identical bytes
    buf.seek(0)
    with zipfile.ZipFile(buf, "r") as src, open(path, "wb") as out_fh:
        dst_buf = io.BytesIO()
        with zipfile.ZipFile(dst_buf, "w", zipfile.ZIP_STORED) as dst:
            for name in sorted(src.namelist()):
                info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
                dst.writestr(info, src.read(name))
        out_fh.write(dst_buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict]:
    with np.load(path) as data:
        manifest = json.loads(bytes(data["__manifest__"]).decode())
        arrays = {k: data[k] for k in data.files if k != "__manifest__"}
    return manifest, arrays


def write_csv(path, columns: tuple[str, ...], rows, header_lines: list[str] | None = None) -> None:
    with open(path, "w") as fh:
        for line in header_lines or []:
            fh.write(f"# {line}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")
