"""Demonstration files and point-cloud records.

Two versioned demonstration formats share one schema:

* ``.json`` container (``latflow-demo`` v1): scalars, row-major matrices as
  flat lists, the scene description and one point-cloud record.
* ``.csv`` variant (``latflow-demo-csv`` v1): ``#``-prefixed header lines
  carrying the scalars and the scene as JSON, then one row per step with
  columns ``step, a0.., o0.., v0.., cloud``.

A point-cloud record is the text ``N`` followed by ``N`` lines ``x,y,z``.
Clouds are static within an episode, so the file stores each distinct cloud
once and every step refers to it by index (column ``cloud`` in the CSV).
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from ..simenv import Demonstration, TaskScene

DEMO_FORMAT = "latflow-demo"
DEMO_CSV_FORMAT = "latflow-demo-csv"
DEMO_VERSION = 1


def format_cloud(points: np.ndarray) -> str:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = [str(len(points))] + [",".join(repr(float(v)) for v in p) for p in points]
    return "\n".join(lines) + "\n"


def parse_cloud(text: str) -> np.ndarray:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty point-cloud record")
    n = int(lines[0])
    if len(lines) - 1 != n:
        raise ValueError(f"point-cloud record declares {n} points but has {len(lines) - 1}")
    if n == 0:
        return np.zeros((0, 3))
    pts = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]], dtype=np.float64)
    if pts.shape[1] != 3:
        raise ValueError("point-cloud lines must be x,y,z")
    return pts


def _flat(a: np.ndarray) -> list[float]:
    return [float(v) for v in np.asarray(a, dtype=np.float64).ravel()]


def demo_to_json(demo: Demonstration) -> dict:
    L, d_a = demo.actions.shape
    return {
        "format": DEMO_FORMAT,
        "version": DEMO_VERSION,
        "task": demo.task,
        "seed": int(demo.seed),
        "dt": float(demo.dt),
        "H": int(L),
        "d_a": int(d_a),
        "d_obs": int(demo.observations.shape[1]),
        "d_v": int(demo.contexts.shape[1]),
        "noise_level": float(demo.noise_level),
        "actions": _flat(demo.actions),
        "observations": _flat(demo.observations),
        "contexts": _flat(demo.contexts),
        "clouds": [format_cloud(demo.cloud)],
        "cloud_index": [0] * L,
        "scene": demo.scene.to_json(),
    }


def demo_from_json(d: dict) -> Demonstration:
    if d.get("format") != DEMO_FORMAT or d.get("version") != DEMO_VERSION:
        raise ValueError(f"not a {DEMO_FORMAT} v{DEMO_VERSION} record")
    L = d["H"]
    clouds = [parse_cloud(c) for c in d["clouds"]]
    if len(set(d["cloud_index"])) != 1:
        raise ValueError("per-step clouds must be static within a demonstration")
    return Demonstration(
        task=d["task"],
        seed=d["seed"],
        dt=d["dt"],
        actions=np.array(d["actions"], dtype=np.float64).reshape(L, d["d_a"]),
        observations=np.array(d["observations"], dtype=np.float64).reshape(L, d["d_obs"]),
        contexts=np.array(d["contexts"], dtype=np.float64).reshape(L, d["d_v"]),
        cloud=clouds[d["cloud_index"][0]],
        scene=TaskScene.from_json(d["scene"]),
        noise_level=d["noise_level"],
    )


def save_demo(demo: Demonstration, path) -> None:
    path = Path(path)
    if path.suffix == ".csv":
        path.write_text(demo_to_csv(demo))
    else:
        path.write_text(json.dumps(demo_to_json(demo), sort_keys=True) + "\n")


def load_demo(path) -> Demonstration:
    path = Path(path)
    if path.suffix == ".csv":
        return demo_from_csv(path.read_text())
    return demo_from_json(json.loads(path.read_text()))


def demo_to_csv(demo: Demonstration) -> str:
    meta = demo_to_json(demo)
    for key in ("actions", "observations", "contexts", "clouds", "cloud_index"):
        meta.pop(key)
    meta["format"] = DEMO_CSV_FORMAT
    buf = io.StringIO()
    buf.write(f"# {json.dumps(meta, sort_keys=True)}\n")
    buf.write("# cloud 0\n")
    for line in format_cloud(demo.cloud).splitlines():
        buf.write(f"#  {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    d_a, d_o, d_v = demo.actions.shape[1], demo.observations.shape[1], demo.contexts.shape[1]
    w.writerow(["step"] + [f"a{i}" for i in range(d_a)] + [f"o{i}" for i in range(d_o)]
               + [f"v{i}" for i in range(d_v)] + ["cloud"])
    for t in range(demo.length):
        w.writerow([t] + [repr(float(v)) for v in demo.actions[t]] + [repr(float(v)) for v in demo.observations[t]]
                   + [repr(float(v)) for v in demo.contexts[t]] + [0])
    return buf.getvalue()


def demo_from_csv(text: str) -> Demonstration:
    lines = text.splitlines()
    meta = json.loads(lines[0][2:])
    if meta.get("format") != DEMO_CSV_FORMAT or meta.get("version") != DEMO_VERSION:
        raise ValueError(f"not a {DEMO_CSV_FORMAT} v{DEMO_VERSION} file")
    cloud_lines = [ln[3:] for ln in lines[2:] if ln.startswith("#  ")]
    body = [ln for ln in lines if not ln.startswith("#")]
    rows = list(csv.reader(body))
    header, rows = rows[0], rows[1:]
    cols = {name: i for i, name in enumerate(header)}

    def block(prefix: str, n: int) -> np.ndarray:
        idx = [cols[f"{prefix}{i}"] for i in range(n)]
        return np.array([[float(r[i]) for i in idx] for r in rows], dtype=np.float64).reshape(len(rows), n)

    if len(rows) != meta["H"]:
        raise ValueError(f"CSV has {len(rows)} steps, header says {meta['H']}")
    return Demonstration(
        task=meta["task"],
        seed=meta["seed"],
        dt=meta["dt"],
        actions=block("a", meta["d_a"]),
        observations=block("o", meta["d_obs"]),
        contexts=block("v", meta["d_v"]),
        cloud=parse_cloud("\n".join(cloud_lines)),
        scene=TaskScene.from_json(meta["scene"]),
        noise_level=meta["noise_level"],
    )


def read_trajectory_csv(path) -> np.ndarray:
    """Numeric columns of a trajectory CSV (header row and ``#`` comments skipped)."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(ln for ln in fh if not ln.startswith("#")) if r]
    try:
        float(rows[0][0])
    except ValueError:
        rows = rows[1:]
    return np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
