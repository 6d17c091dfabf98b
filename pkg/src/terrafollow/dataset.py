"""Dataset directories: ``poses.txt``, ``frames/frame_%06d.txt``, ``scenario.cfg``.

Floats are written with ``repr`` (shortest round-trip form) so that reading
a dataset back reproduces every value bit for bit.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import MalformedRecord, MissingFile
from .geometry import PoseTrack, read_pose_log, write_pose_log
from .kvfile import atomic_write_text
from .sim import RadarScanFrame, ScenarioSpec, read_scenario, scenario_to_text

POSES = "poses.txt"
FRAMES = "frames"
SCENARIO = "scenario.cfg"


def frame_path(root, index: int) -> Path:
    return Path(root) / FRAMES / f"frame_{index:06d}.txt"


def format_frame(frame: RadarScanFrame) -> str:
    lines = [f"frame {frame.frame_index} {frame.t_start!r} {frame.t_end!r}"]
    for t, th, p, lab in zip(
        frame.timestamps.tolist(), frame.thetas.tolist(), frame.points.tolist(), frame.labels.tolist()
    ):
        lines.append(f"{t!r} {th!r} {p[0]!r} {p[1]!r} {p[2]!r} {lab}")
    return "\n".join(lines) + "\n"


def parse_frame(text: str, path="<frame>") -> RadarScanFrame:
    lines = text.splitlines()
    if not lines:
        raise MalformedRecord(path, 1, "empty frame file (missing header)")
    head = lines[0].split(" ")
    if len(head) != 4 or head[0] != "frame":
        raise MalformedRecord(path, 1, "header must be 'frame <index> <t_start> <t_end>'")
    try:
        index, t0, t1 = int(head[1]), float(head[2]), float(head[3])
    except ValueError:
        raise MalformedRecord(path, 1, "non-numeric header field") from None
    n = len(lines) - 1
    cols = np.empty((n, 5))
    labels = np.empty(n, dtype=np.int8)
    k = 0
    for line_no, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        fields = raw.split(" ")
        if len(fields) != 6:
            raise MalformedRecord(path, line_no, f"expected 6 fields 't theta x y z label', got {len(fields)}")
        try:
            cols[k] = [float(f) for f in fields[:5]]
        except ValueError:
            raise MalformedRecord(path, line_no, "non-numeric field") from None
        if fields[5] not in ("0", "1"):
            raise MalformedRecord(path, line_no, f"label must be 0 or 1, got {fields[5]!r}")
        labels[k] = int(fields[5])
        if not (t0 <= cols[k, 0] < t1):
            raise MalformedRecord(path, line_no, "timestamp outside [t_start, t_end)")
        k += 1
    cols, labels = cols[:k], labels[:k]
    return RadarScanFrame(index, t0, t1, cols[:, 0], cols[:, 1], cols[:, 2:5], labels)


def write_dataset(root, track: PoseTrack, frames, spec: ScenarioSpec | None = None) -> None:
    root = Path(root)
    (root / FRAMES).mkdir(parents=True, exist_ok=True)
    write_pose_log(root / POSES, track)
    for frame in frames:
        atomic_write_text(frame_path(root, frame.frame_index), format_frame(frame))
    if spec is not None:
        atomic_write_text(root / SCENARIO, scenario_to_text(spec))


def read_dataset(root) -> tuple[PoseTrack, list[RadarScanFrame]]:
    root = Path(root)
    if not root.is_dir():
        raise MissingFile(f"dataset directory not found: {root}")
    track = read_pose_log(root / POSES)
    frame_dir = root / FRAMES
    if not frame_dir.is_dir():
        raise MissingFile(f"frame directory not found: {frame_dir}")
    frames = []
    for path in sorted(frame_dir.glob("frame_*.txt")):
        frames.append(parse_frame(path.read_text(), path))
    frames.sort(key=lambda f: f.frame_index)
    return track, frames


def read_dataset_spec(root) -> ScenarioSpec | None:
    path = Path(root) / SCENARIO
    return read_scenario(path) if path.is_file() else None
