"""WILD challenge examples: one motion sequence with annotated endpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ManifestError, StageIOError

BUCKETS = ("<=100", "100-300", ">300")


def length_bucket(n_frames: int) -> str:
    """Table bucket for a sequence length; 100 -> "<=100", 300 -> "100-300"."""
    if n_frames <= 100:
        return BUCKETS[0]
    if n_frames <= 300:
        return BUCKETS[1]
    return BUCKETS[2]


@dataclass(frozen=True, eq=False)
class WildExample:
    index: int
    frame_start: int
    frame_end: int
    start_head: np.ndarray
    start_tail: np.ndarray
    end_head: np.ndarray
    end_tail: np.ndarray
    target_id: int
    bucket: str

    @property
    def n_frames(self) -> int:
        """Motion frames strictly between the two annotated endpoints."""
        return self.frame_end - self.frame_start - 1

    def start_point(self, head: bool = False) -> np.ndarray:
        return self.start_head if head else 0.5 * (self.start_head + self.start_tail)

    def end_point(self, head: bool = False) -> np.ndarray:
        return self.end_head if head else 0.5 * (self.end_head + self.end_tail)

    def validate(self) -> None:
        if self.frame_end <= self.frame_start:
            raise ManifestError(f"example {self.index}: frame_end <= frame_start")
        if self.bucket not in BUCKETS:
            raise ManifestError(f"example {self.index}: unknown bucket {self.bucket!r}")
        if length_bucket(self.n_frames) != self.bucket:
            raise ManifestError(
                f"example {self.index}: {self.n_frames} frames is not in bucket {self.bucket!r}")

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "frame_start": self.frame_start,
            "frame_end": self.frame_end,
            "start_head": [float(x) for x in self.start_head],
            "start_tail": [float(x) for x in self.start_tail],
            "end_head": [float(x) for x in self.end_head],
            "end_tail": [float(x) for x in self.end_tail],
            "target_id": self.target_id,
            "bucket": self.bucket,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WildExample":
        return cls(index=int(d["index"]), frame_start=int(d["frame_start"]),
                   frame_end=int(d["frame_end"]),
                   start_head=np.asarray(d["start_head"], dtype=float),
                   start_tail=np.asarray(d["start_tail"], dtype=float),
                   end_head=np.asarray(d["end_head"], dtype=float),
                   end_tail=np.asarray(d["end_tail"], dtype=float),
                   target_id=int(d["target_id"]), bucket=str(d["bucket"]))


def save_manifest(examples, path) -> None:
    Path(path).write_text(json.dumps([e.to_dict() for e in examples], indent=1) + "\n")


def load_manifest(path) -> list[WildExample]:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise StageIOError(f"manifest not found: {path}", path=str(path)) from None
    except json.JSONDecodeError as exc:
        raise StageIOError(f"manifest is not valid JSON: {path} ({exc})", path=str(path)) from None
    return [WildExample.from_dict(d) for d in data]
