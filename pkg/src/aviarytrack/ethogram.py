"""Interaction events, pair bonds and transition statistics from bird timelines.

Timelines are ``(n_frames, n_birds, 3)`` arrays sampled at ``fps`` with NaN
where a bird is unobserved. A bird is in flight on frames whose speed exceeds
``flight_speed``; flights give approach and leave events, songs give sing_to
events, and approaches that the target sits through give stay events.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, StageIOError

KINDS = ("approach", "leave", "stay", "sing_to")
ROLES = ("M", "F")


@dataclass(frozen=True)
class BirdMeta:
    id: int
    sex: str
    label: str = ""


@dataclass(frozen=True, order=True)
class InteractionEvent:
    time: float
    actor: int
    target: int
    kind: str


@dataclass
class EthogramConfig:
    d_int: float = 0.5
    stay_wait: float = 1.0
    flight_speed: float = 0.5
    dyad_window: float = 60.0


def _sort_key(e: InteractionEvent):
    return (e.time, KINDS.index(e.kind), e.actor, e.target)


def flights(track: np.ndarray, fps: float, speed: float) -> list[tuple[int, int]]:
    """Flight runs ``(first_moving_frame, last_moving_frame)`` of one bird."""
    d = np.linalg.norm(np.diff(track, axis=0), axis=1) * fps
    moving = np.concatenate([[False], np.nan_to_num(d, nan=0.0) > speed])
    runs = []
    k = 0
    n = len(moving)
    while k < n:
        if moving[k]:
            s = k
            while k < n and moving[k]:
                k += 1
            runs.append((s, k - 1))
        else:
            k += 1
    return runs


def extract_interactions(positions: np.ndarray, fps: float, songs: Iterable[tuple[float, int]],
                         birds: Sequence[BirdMeta], cfg: EthogramConfig | None = None
                         ) -> list[InteractionEvent]:
    cfg = cfg or EthogramConfig()
    P = np.asarray(positions, dtype=float)
    n_frames, n_birds, _ = P.shape
    if len(birds) != n_birds:
        raise DataError(f"{len(birds)} birds described but timelines hold {n_birds}", stage="ethogram")
    ids = [b.id for b in birds]
    sex = {b.id: b.sex for b in birds}
    wait = cfg.stay_wait * fps
    events: list[InteractionEvent] = []

    def dist(f, a):
        with np.errstate(invalid="ignore"):
            return np.linalg.norm(P[f] - P[f, a], axis=1)

    runs = {a: flights(P[:, a], fps, cfg.flight_speed) for a in range(n_birds)}
    takeoffs = {a: [s - 1 for s, _ in runs[a]] for a in range(n_birds)}
    for a in range(n_birds):
        for s, e in runs[a]:
            t0 = s - 1
            # leave: every bird that was within d_int at take-off
            d0 = dist(t0, a)
            for b in np.flatnonzero(d0 < cfg.d_int):
                if b == a:
                    continue
                with np.errstate(invalid="ignore"):
                    dd = np.linalg.norm(P[s:e + 1, b] - P[s:e + 1, a], axis=1)
                out = np.flatnonzero(dd > cfg.d_int)
                if len(out):
                    events.append(InteractionEvent((s + out[0]) / fps, ids[a], ids[int(b)], "leave"))
            # approach: landing within d_int of another bird
            d1 = dist(e, a)
            for b in np.flatnonzero(d1 < cfg.d_int):
                if b == a:
                    continue
                events.append(InteractionEvent(e / fps, ids[a], ids[int(b)], "approach"))
                if e + wait > n_frames - 1 + 1e-9:
                    continue
                left = any(e < t <= e + wait + 1e-9 for t in takeoffs[int(b)])
                if not left:
                    events.append(InteractionEvent((e + wait) / fps, ids[int(b)], ids[a], "stay"))
    for time, male in songs:
        if male not in sex:
            raise DataError(f"song from unknown bird {male}", stage="ethogram")
        if sex[male] != "M":
            raise DataError(f"song attributed to bird {male}, which is not male", stage="ethogram")
        f = int(round(time * fps))
        if not 0 <= f < n_frames:
            continue
        a = ids.index(male)
        for b in np.flatnonzero(dist(f, a) < cfg.d_int):
            if b != a:
                events.append(InteractionEvent(float(time), male, ids[int(b)], "sing_to"))
    return sorted(events, key=_sort_key)


def pairwise_matrices(events: Iterable[InteractionEvent], birds: Sequence[BirdMeta]) -> dict[str, np.ndarray]:
    """Actor x target counts per interaction kind, in ``birds`` order."""
    index = {b.id: i for i, b in enumerate(birds)}
    out = {k: np.zeros((len(birds), len(birds)), dtype=int) for k in KINDS}
    for e in events:
        out[e.kind][index[e.actor], index[e.target]] += 1
    return out


def infer_pair_bonds(events: Iterable[InteractionEvent], birds: Sequence[BirdMeta]) -> set[tuple[int, int]]:
    """(male, female) pairs where the female got more than half her songs from that male."""
    sex = {b.id: b.sex for b in birds}
    received: dict[int, dict[int, int]] = {}
    for e in events:
        if e.kind == "sing_to" and sex.get(e.target) == "F":
            received.setdefault(e.target, {}).setdefault(e.actor, 0)
            received[e.target][e.actor] += 1
    bonds = set()
    for f, by_male in received.items():
        total = sum(by_male.values())
        for m, c in by_male.items():
            if 2 * c > total:
                bonds.add((m, f))
    return bonds


STATES = tuple(f"{r}:{k}" for r in ROLES for k in KINDS)


@dataclass
class TransitionMatrix:
    states: tuple[str, ...]
    counts: np.ndarray

    @property
    def n_transitions(self) -> int:
        return int(self.counts.sum())

    @property
    def probabilities(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True).astype(float)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)


def dyad_transitions(events: Iterable[InteractionEvent], birds: Sequence[BirdMeta],
                     dyad_window: float) -> dict[tuple[int, int], np.ndarray]:
    """Transition counts per (male, female) dyad."""
    sex = {b.id: b.sex for b in birds}
    per: dict[tuple[int, int], list[InteractionEvent]] = {}
    for e in events:
        sa, st = sex.get(e.actor), sex.get(e.target)
        if {sa, st} != {"M", "F"}:
            continue
        key = (e.actor, e.target) if sa == "M" else (e.target, e.actor)
        per.setdefault(key, []).append(e)
    out = {}
    for key, evs in per.items():
        evs.sort(key=_sort_key)
        c = np.zeros((len(STATES), len(STATES)), dtype=int)
        for e1, e2 in zip(evs, evs[1:]):
            if e2.time - e1.time <= dyad_window:
                i = STATES.index(f"{sex[e1.actor]}:{e1.kind}")
                j = STATES.index(f"{sex[e2.actor]}:{e2.kind}")
                c[i, j] += 1
        out[key] = c
    return out


def transition_analysis(events: Iterable[InteractionEvent], bonds: set[tuple[int, int]],
                        birds: Sequence[BirdMeta], dyad_window: float = 60.0
                        ) -> tuple[TransitionMatrix, TransitionMatrix, np.ndarray]:
    """Bonded and non-bonded dyad transition matrices plus their probability difference."""
    n = len(STATES)
    bonded = np.zeros((n, n), dtype=int)
    other = np.zeros((n, n), dtype=int)
    for key, c in dyad_transitions(events, birds, dyad_window).items():
        if key in bonds:
            bonded += c
        else:
            other += c
    b = TransitionMatrix(STATES, bonded)
    o = TransitionMatrix(STATES, other)
    return b, o, b.probabilities - o.probabilities


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def read_timelines(path, birds: Sequence[BirdMeta] | None = None) -> tuple[np.ndarray, list[int]]:
    """Timeline CSV ``frame, bird_id, x, y, z`` -> ``(positions, bird_ids)``."""
    path = Path(path)
    if not path.exists():
        raise StageIOError(f"track file not found: {path}", stage="ethogram", path=str(path))
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append((int(r["frame"]), int(r["bird_id"]), float(r["x"]), float(r["y"]), float(r["z"])))
    ids = [b.id for b in birds] if birds is not None else sorted({r[1] for r in rows})
    col = {b: i for i, b in enumerate(ids)}
    n = max((r[0] for r in rows), default=-1) + 1
    P = np.full((n, len(ids), 3), np.nan)
    for f, b, x, y, z in rows:
        if b in col:
            P[f, col[b]] = (x, y, z)
    return P, ids


def write_timelines(positions: np.ndarray, ids: Sequence[int], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "bird_id", "x", "y", "z"])
        for f in range(len(positions)):
            for i, b in enumerate(ids):
                p = positions[f, i]
                if np.all(np.isfinite(p)):
                    w.writerow([f, b] + [f"{x:.6f}" for x in p])


def read_birds(path) -> list[BirdMeta]:
    path = Path(path)
    if not path.exists():
        raise StageIOError(f"bird list not found: {path}", stage="ethogram", path=str(path))
    with open(path, newline="") as fh:
        birds = [BirdMeta(int(r["id"]), r["sex"].strip().upper(), r.get("label", "") or "")
                 for r in csv.DictReader(fh)]
    if len({b.id for b in birds}) != len(birds):
        raise DataError(f"duplicate bird ids in {path}", stage="ethogram", path=str(path))
    bad = [b.id for b in birds if b.sex not in ROLES]
    if bad:
        raise DataError(f"birds {bad} have sex other than M/F", stage="ethogram", path=str(path))
    return birds


def write_birds(birds: Sequence[BirdMeta], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "sex", "label"])
        for b in birds:
            w.writerow([b.id, b.sex, b.label])


def read_songs(path) -> list[tuple[float, int]]:
    path = Path(path)
    if not path.exists():
        raise StageIOError(f"song file not found: {path}", stage="ethogram", path=str(path))
    with open(path, newline="") as fh:
        return [(float(r["time_s"]), int(r["male_id"])) for r in csv.DictReader(fh)]


def write_songs(songs: Iterable[tuple[float, int]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "male_id"])
        for t, m in songs:
            w.writerow([f"{t:.4f}", m])


def write_events(events: Iterable[InteractionEvent], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "actor", "target", "kind"])
        for e in events:
            w.writerow([f"{e.time:.4f}", e.actor, e.target, e.kind])


def _write_matrix(path, labels_r, labels_c, M, fmt="{}"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + list(labels_c))
        for lab, row in zip(labels_r, M):
            w.writerow([lab] + [fmt.format(x) for x in row])


@dataclass
class EthogramResult:
    birds: list[BirdMeta]
    events: list[InteractionEvent]
    matrices: dict[str, np.ndarray]
    bonds: set[tuple[int, int]]
    bonded: TransitionMatrix
    nonbonded: TransitionMatrix
    difference: np.ndarray
    files: list[Path] = field(default_factory=list)


def run_ethogram(positions: np.ndarray, fps: float, songs, birds: Sequence[BirdMeta],
                 cfg: EthogramConfig | None = None) -> EthogramResult:
    cfg = cfg or EthogramConfig()
    events = extract_interactions(positions, fps, songs, birds, cfg)
    bonds = infer_pair_bonds(events, birds)
    b, o, diff = transition_analysis(events, bonds, birds, cfg.dyad_window)
    return EthogramResult(list(birds), events, pairwise_matrices(events, birds), bonds, b, o, diff)


def save_ethogram(res: EthogramResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = [str(b.id) for b in res.birds]
    files = [out / "events.csv"]
    write_events(res.events, files[0])
    for k, M in res.matrices.items():
        p = out / f"pairwise_{k}.csv"
        _write_matrix(p, labels, labels, M)
        files.append(p)
    p = out / "pair_bonds.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["male_id", "female_id"])
        for m, f in sorted(res.bonds):
            w.writerow([m, f])
    files.append(p)
    for name, tm in (("bonded", res.bonded), ("nonbonded", res.nonbonded)):
        p = out / f"transitions_{name}.csv"
        _write_matrix(p, tm.states, tm.states, tm.probabilities, "{:.6f}")
        files.append(p)
    p = out / "transitions_difference.csv"
    _write_matrix(p, STATES, STATES, res.difference, "{:.6f}")
    files.append(p)
    p = out / "ethogram.json"
    p.write_text(json.dumps({
        "birds": [{"id": b.id, "sex": b.sex, "label": b.label} for b in res.birds],
        "pairwise": {k: M.tolist() for k, M in res.matrices.items()},
        "pair_bonds": sorted([list(x) for x in res.bonds]),
        "states": list(STATES),
        "transitions": {
            "bonded": {"counts": res.bonded.counts.tolist(), "n": res.bonded.n_transitions},
            "nonbonded": {"counts": res.nonbonded.counts.tolist(), "n": res.nonbonded.n_transitions},
            "difference": np.round(res.difference, 6).tolist(),
        },
    }, indent=1) + "\n")
    files.append(p)
    res.files = files
    return files


# ---------------------------------------------------------------------------
# Scripted courtship scenario with known pair bonds
# ---------------------------------------------------------------------------


def default_flock(n_males: int = 6, n_females: int = 9) -> list[BirdMeta]:
    birds = [BirdMeta(i, "M", f"M{i}") for i in range(n_males)]
    birds += [BirdMeta(n_males + i, "F", f"F{i}") for i in range(n_females)]
    return birds


def default_bonds(birds: Sequence[BirdMeta]) -> set[tuple[int, int]]:
    """Six bonds; the first male is bonded to two females."""
    males = [b.id for b in birds if b.sex == "M"]
    females = [b.id for b in birds if b.sex == "F"]
    pairs = [(males[0], females[0]), (males[0], females[1]), (males[1], females[2]),
             (males[2], females[3]), (males[3], females[4]), (males[4], females[5])]
    return set(pairs)


def _hop(P, bird, f0, n, a, b):
    s = np.arange(1, n + 1) / n
    h = 3 * s**2 - 2 * s**3
    P[f0 + 1:f0 + n + 1, bird] = a + np.outer(h, b - a)


@dataclass
class CourtshipScenario:
    birds: list[BirdMeta]
    bonds: set[tuple[int, int]]
    fps: float
    positions: np.ndarray
    songs: list[tuple[float, int]]


def courtship_scenario(seed: int = 0, fps: float = 40.0, birds: Sequence[BirdMeta] | None = None,
                       bonds: set[tuple[int, int]] | None = None, visits_bonded: int = 4,
                       visits_other: int = 2, episode_s: float = 8.0) -> CourtshipScenario:
    """Males visit females and sing; bonded partners dominate each female's songs.

    Every bonded female receives ``visits_bonded`` visits from her partner and
    one from each of two other males; every unbonded female receives
    ``visits_other`` visits from each of three males. On a visit the male lands
    0.3 m from the female and sings twice. A bonded female sits through the
    visit; an unbonded one leaves shortly after he lands and returns after he
    has gone.
    """
    rng = np.random.default_rng(seed)
    birds = list(birds) if birds is not None else default_flock()
    bonds = set(bonds) if bonds is not None else default_bonds(birds)
    males = [b.id for b in birds if b.sex == "M"]
    females = [b.id for b in birds if b.sex == "F"]
    col = {b.id: i for i, b in enumerate(birds)}
    partner = {f: m for m, f in bonds}
    homes = {}
    grid = [(x, y) for y in (0.4, 1.2, 2.0) for x in (0.5, 1.5, 2.5, 3.5, 4.5, 5.5)]
    for b, (x, y) in zip(birds, grid):
        homes[b.id] = np.array([x, y, 2.0])
    visits = []
    for f in females:
        if f in partner:
            m = partner[f]
            others = [x for x in males if x != m and (x, f) not in bonds]
            picks = [m] * visits_bonded + list(rng.choice(others, size=2, replace=False))
        else:
            picks = [int(x) for x in rng.choice(males, size=3, replace=False)] * visits_other
        visits += [(int(m), f) for m in picks]
    order = rng.permutation(len(visits))
    visits = [visits[i] for i in order]
    ep = int(round(episode_s * fps))
    fly = int(round(1.0 * fps))
    n = ep * len(visits) + 1
    P = np.empty((n, len(birds), 3))
    P[:] = np.array([homes[b.id] for b in birds])[None]
    songs = []
    for k, (m, f) in enumerate(visits):
        t0 = k * ep
        home_m, home_f = homes[m], homes[f]
        spot = home_f + np.array([0.0, 0.0, -0.3])
        land = t0 + fly
        _hop(P, col[m], t0, fly, home_m, spot)
        leave_at = land + 4 * fly
        P[land + 1:leave_at + 1, col[m]] = spot
        _hop(P, col[m], leave_at, fly, spot, home_m)
        songs += [((land + fly // 2) / fps, m), ((land + 2 * fly) / fps, m)]
        if (m, f) not in bonds:
            # the female moves aside half a second after he lands, returns once he is home
            away = home_f + np.array([0.5 if home_f[0] < 3 else -0.5, 0.0, -0.9])
            go = land + fly // 2
            _hop(P, col[f], go, fly // 2, home_f, away)
            P[go + fly // 2 + 1:leave_at + 2 * fly + 1, col[f]] = away
            _hop(P, col[f], leave_at + 2 * fly, fly // 2, away, home_f)
    return CourtshipScenario(birds, bonds, fps, P, songs)
