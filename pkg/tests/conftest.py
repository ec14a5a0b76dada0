from __future__ import annotations

import numpy as np
import pytest

from aviarytrack.geometry import CameraModel
from aviarytrack.simulator import VOLUME, aviary_cameras

FX = 960.0 / np.tan(np.radians(24.0))


def perturbed_rig(rng: np.random.Generator) -> list[CameraModel]:
    """The aviary rig with jittered positions, aim points and focal lengths."""
    L, W, H = VOLUME
    cams = []
    for z, tz in ((H - 0.05, 1.0), (0.4, 0.8)):
        for x, y in ((0.05, 0.05), (L - 0.05, 0.05), (L - 0.05, W - 0.05), (0.05, W - 0.05)):
            tx = 4.5 if x < L / 2 else L - 4.5
            pos = np.array([x, y, z]) + rng.uniform(-0.05, 0.05, 3)
            tgt = np.array([tx, W / 2, tz]) + rng.normal(0.0, 0.3, 3)
            cams.append(CameraModel.look_at(len(cams), pos, tgt, fx=FX * rng.uniform(0.9, 1.1)))
    return cams


def seeing(cams, X) -> list[CameraModel]:
    out = []
    for c in cams:
        uv, d = c.project_points(np.asarray(X, dtype=float)[None])
        if d[0] > 0.01 and c.in_image(uv)[0]:
            out.append(c)
    return out


def random_visible_point(rng, cams, min_views=2):
    while True:
        X = rng.uniform([0.1, 0.1, 0.05], np.array(VOLUME) - 0.1)
        vs = seeing(cams, X)
        if len(vs) >= min_views:
            return X, vs


@pytest.fixture(scope="session")
def rig():
    return aviary_cameras()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; returns the verdict."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
