"""Deterministic on-disk formats: strategy checkpoints (CSV), solver traces
(CSV) and bound reports (JSON).

Checkpoints are keyed by content-addressed history-class ids, so a checkpoint
written from one run can be loaded into a fresh process and re-enumerated
into the identical class graph.  All floats are written with ``repr``, which
round-trips exactly; two runs with equal config and seed produce
byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, is_dataclass

import numpy as np

from .beliefs import ClassIndex, enumerate_history_classes
from .game import AuctionEnvironment, ContractViolation
from .solver import SolverConfig, build_tilings
from .tiling import PCStrategy, PCStrategyProfile

__all__ = ["config_hash", "save_checkpoint", "load_checkpoint",
           "save_trace", "save_report"]


def _to_plain(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return asdict(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def config_hash(*parts) -> str:
    """Stable hash of configuration objects (dicts or dataclasses)."""
    blob = json.dumps([_to_plain(p) for p in parts], sort_keys=True,
                      separators=(",", ":"), default=str)
    return hashlib.sha1(blob.encode()).hexdigest()[:16]


def checkpoint_text(profile: PCStrategyProfile, index: ClassIndex,
                    env: AuctionEnvironment, header: dict) -> str:
    """Render the profile at every decision class of ``index`` as CSV text."""
    buf = io.StringIO()
    for k in sorted(header):
        buf.write(f"# {k}={header[k]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bidder", "class_id", "round", "tile", "tile_lower",
                "tile_upper", "bundle", "bid"])
    classes = sorted(index.decision_classes(), key=lambda c: (c.round, c.id))
    for cls in classes:
        active = env.active_mask(cls.history)
        for i in range(env.n_bidders):
            if not active[i]:
                continue
            bids = profile[i].bids_at(cls)
            tiling = profile[i].tiling
            lo = tiling.lower_vertices()
            hi = tiling.upper_vertices()
            for k in range(tiling.n_tiles):
                for b in range(bids.shape[1]):
                    w.writerow([i, cls.id, cls.round, k,
                                repr(float(lo[k, 0])), repr(float(hi[k, 0])),
                                b, repr(float(bids[k, b]))])
    return buf.getvalue()


def save_checkpoint(path, profile: PCStrategyProfile, index: ClassIndex,
                    env: AuctionEnvironment, header: dict) -> None:
    text = checkpoint_text(profile, index, env, header)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def load_checkpoint(path, env: AuctionEnvironment,
                    grid_cells: int) -> tuple[PCStrategyProfile, ClassIndex]:
    """Rebuild a profile from a checkpoint and re-enumerate its class graph.

    Classes are matched by content-addressed id: enumeration under the loaded
    bids reproduces the ids the checkpoint was written with.
    """
    tilings = build_tilings(env, grid_cells)
    strategies = [PCStrategy(i, tilings[i], env) for i in range(env.n_bidders)]
    tables: dict = {}
    with open(path, newline="") as fh:
        rows = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(rows)
    for row in reader:
        i = int(row["bidder"])
        cid = row["class_id"]
        key = (i, cid)
        arr = tables.get(key)
        if arr is None:
            arr = {}
            tables[key] = arr
        arr[(int(row["tile"]), int(row["bundle"]))] = float(row["bid"])
    for (i, cid), cells in tables.items():
        n_tiles = max(t for t, _ in cells) + 1
        q = max(b for _, b in cells) + 1
        if n_tiles != tilings[i].n_tiles:
            raise ContractViolation(
                f"checkpoint grid ({n_tiles} tiles) does not match grid_cells={grid_cells}")
        bids = np.empty((n_tiles, q))
        for (t, b), v in cells.items():
            bids[t, b] = v
        strategies[i]._table[cid] = bids
    profile = PCStrategyProfile(strategies)
    index = enumerate_history_classes(env, profile)
    return profile, index


def save_trace(path, trace: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "phase", "samples", "max_loss", "n_classes",
                    "seconds"])
        for row in trace:
            w.writerow([row["iteration"], row["phase"], row["samples"],
                        repr(float(row["max_loss"])), row["n_classes"],
                        f"{row['seconds']:.3f}"])


def save_report(path, report, header: dict) -> None:
    payload = dict(header)
    payload.update(report.summary())
    payload["class_losses"] = [
        {"class_id": cid, "bidder": i, "loss": loss}
        for (cid, i), loss in sorted(report.class_losses.items())]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
