#!/usr/bin/env python3
"""Generates the bundled 51x91 office-building maps (easy, medium, hard).

Layout: a central east-west hallway split into three segments, six rooms on
each side with one door each, a couple of room-to-room doors, and the spawn
in the south-centre entryway. All three maps hold 34 victims (10 yellow,
24 green); harder maps spread them further from the spawn and add rubble.

Usage: python3 tools/make_maps.py [output_dir]
"""

import json
import random
import sys
from pathlib import Path

H, W = 51, 91
HALL_TOP, HALL_BOTTOM = 22, 28
ROOM_COLS = [(1, 14), (16, 29), (31, 44), (46, 59), (61, 74), (76, 89)]
NORTH_ROWS = (1, 20)
SOUTH_ROWS = (30, 49)
HALL_SEGMENTS = [(1, 29), (30, 59), (60, 89)]

# (yellow, green) per room, north rooms N1..N6 then south rooms S1..S6.
CENSUS = {
    "easy": [(0, 3), (2, 1), (1, 2), (2, 0), (0, 3), (1, 2),
             (0, 3), (2, 0), (0, 1), (0, 3), (1, 3), (1, 3)],
    "medium": [(1, 3), (0, 3), (2, 0), (0, 2), (1, 2), (2, 1),
               (0, 3), (1, 2), (0, 0), (0, 3), (2, 2), (1, 3)],
    "hard": [(2, 2), (0, 3), (0, 2), (1, 2), (0, 3), (2, 1),
             (2, 1), (0, 2), (0, 0), (1, 2), (0, 3), (2, 3)],
}

RUBBLE = {
    "easy": [],
    "medium": [(23, 40, 26, 41)],
    "hard": [(22, 18, 26, 19), (24, 50, 28, 51), (23, 70, 27, 70)],
}


def rect(r0, c0, r1, c1):
    return [(r, c) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)]


def build(name, seed):
    rng = random.Random(seed)
    walls = set()
    for c in range(W):
        walls.update([(0, c), (H - 1, c), (HALL_TOP - 1, c), (HALL_BOTTOM + 1, c)])
    for r in range(H):
        walls.update([(r, 0), (r, W - 1)])
    for c in (15, 30, 45, 60, 75):
        for r in range(NORTH_ROWS[0], NORTH_ROWS[1] + 1):
            walls.add((r, c))
        for r in range(SOUTH_ROWS[0], SOUTH_ROWS[1] + 1):
            walls.add((r, c))

    areas = []
    portals = []
    hall_ids = [1, 2, 3]
    hall_names = ["West Hallway", "Central Hallway", "East Hallway"]
    hall_cells = {aid: set(rect(HALL_TOP, c0, HALL_BOTTOM, c1)) for aid, (c0, c1) in zip(hall_ids, HALL_SEGMENTS)}

    def hall_for(col):
        for aid, (c0, c1) in zip(hall_ids, HALL_SEGMENTS):
            if c0 <= col <= c1:
                return aid
        raise ValueError(col)

    rooms = []  # (area id, name, rows, cols)
    for i, cols in enumerate(ROOM_COLS):
        rooms.append((10 + i, f"Room 1{i + 1:02d}", NORTH_ROWS, cols))
    for i, cols in enumerate(ROOM_COLS):
        nm = "Entryway" if i == 2 else f"Room 2{i + 1:02d}"
        rooms.append((20 + i, nm, SOUTH_ROWS, cols))

    room_cells = {}
    for aid, nm, (r0, r1), (c0, c1) in rooms:
        room_cells[aid] = set(rect(r0, c0, r1, c1))

    pid = 1
    # Hallway segment boundaries.
    portals.append({"id": pid, "row": 25, "col": 29, "areas": [1, 2]}); pid += 1
    portals.append({"id": pid, "row": 25, "col": 59, "areas": [2, 3]}); pid += 1

    # One door per room into the hallway, at the room's centre column.
    for aid, nm, (r0, r1), (c0, c1) in rooms:
        dc = (c0 + c1) // 2
        dr = HALL_TOP - 1 if r0 == NORTH_ROWS[0] else HALL_BOTTOM + 1
        walls.discard((dr, dc))
        h = hall_for(dc)
        hall_cells[h].add((dr, dc))
        portals.append({"id": pid, "row": dr, "col": dc, "areas": [h, aid]}); pid += 1

    # Room-to-room doors.
    for (a, b, r, c) in [(12, 13, 10, 45), (24, 25, 40, 75)]:
        walls.discard((r, c))
        room_cells[a].add((r, c))
        portals.append({"id": pid, "row": r, "col": c, "areas": [a, b]}); pid += 1

    obstacles = set()
    for (r0, c0, r1, c1) in RUBBLE[name]:
        obstacles.update(rect(r0, c0, r1, c1))
    # Furniture blocks inside a few rooms.
    for aid, nm, (r0, r1), (c0, c1) in rooms:
        if rng.random() < 0.5:
            br, bc = rng.randint(r0 + 5, r1 - 6), rng.randint(c0 + 2, c1 - 4)
            obstacles.update(rect(br, bc, br + 1, bc + 2))

    victims = []
    vid = 1
    census = CENSUS[name]
    for (aid, nm, (r0, r1), (c0, c1)), (ny, ng) in zip(rooms, census):
        door_col = (c0 + c1) // 2
        free = [(r, c) for (r, c) in rect(r0 + 1, c0 + 1, r1 - 1, c1 - 1)
                if (r, c) not in obstacles and abs(c - door_col) + min(abs(r - r0), abs(r - r1)) > 3]
        if name != "easy":
            # Push victims towards the far wall of the room.
            far = r0 if r0 == NORTH_ROWS[0] else r1
            free.sort(key=lambda rc: abs(rc[0] - far))
            free = free[: max(len(free) // 2, ny + ng)]
        picks = rng.sample(free, ny + ng)
        colors = ["yellow"] * ny + ["green"] * ng
        rng.shuffle(colors)
        for (r, c), col in zip(sorted(picks), colors):
            victims.append({"id": vid, "row": r, "col": c, "color": col}); vid += 1

    for aid, nm in zip(hall_ids, hall_names):
        cells = sorted(hall_cells[aid] - obstacles)
        areas.append({"id": aid, "name": nm, "cells": [list(x) for x in cells]})
    for aid, nm, _, _ in rooms:
        cells = sorted(room_cells[aid] - walls - obstacles)
        areas.append({"id": aid, "name": nm, "cells": [list(x) for x in cells]})

    doc = {
        "v": 1,
        "id": name,
        "height": H,
        "width": W,
        "walls": [list(x) for x in sorted(walls)],
        "obstacles": [list(x) for x in sorted(obstacles - walls)],
        "victims": victims,
        "areas": areas,
        "portals": portals,
        "spawn": [40, 38],
    }
    assert sum(1 for v in victims if v["color"] == "yellow") == 10
    assert len(victims) == 34
    return doc


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "maps")
    out.mkdir(parents=True, exist_ok=True)
    for seed, name in enumerate(["easy", "medium", "hard"]):
        doc = build(name, 1000 + seed)
        (out / f"{name}.json").write_text(json.dumps(doc, separators=(",", ":")) + "\n")
        print(out / f"{name}.json")


if __name__ == "__main__":
    main()
