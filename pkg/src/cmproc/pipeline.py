"""Batch stages that communicate through files in one artifact directory.

Each stage reads its inputs from disk, so re-running a stage from cached
upstream artifacts gives the same bytes as a full run. Every artifact starts
with (CSV, Markdown) or contains (JSON) the config hash and seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
from pathlib import Path
from typing import Callable

import numpy as np
import scipy

from . import __version__
from .config import RunConfig, _ids
from .counterfactual import RingHypothesis, rent_report, write_rent_json
from .gpv import flag_counts, invert_dataset, load_costs_csv, write_costs_csv
from .lpe import BandwidthSet, estimate_hazards, load_hazards_csv, write_audit_csv, write_hazards_csv
from .market_data import (
    Dataset,
    classify_bidders,
    expected_wins,
    fmt6,
    load_dataset,
    participation_timeline,
    write_enriched_csv,
    write_timeline_csv,
)
from .mechanism import verify_theorem
from .screens import load_rings, run_screens, write_screens_json
from .synthetic import generate_dataset, write_truth_csv

log = logging.getLogger(__name__)

BIDS = "bids.csv"
TRUTH = "truth.csv"
ENRICHED = "enriched.csv"
BIDDERS = "bidders.csv"
HAZARDS = "hazards.csv"
AUDIT = "hazards_audit.csv"
COSTS = "pseudo_costs.csv"
SCREENS = "screens.json"
TIMELINE = "timeline.csv"
RENT = "rent_report.json"
CM = "cm_verification.json"
REPORT = "report.md"
MANIFEST = "manifest.json"


class MissingInput(FileNotFoundError):
    def __init__(self, path: Path, stage: str):
        super().__init__(f"{stage}: missing input {path}")
        self.path = path
        self.stage = stage


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage


def header(cfg: RunConfig) -> str:
    return f"config_hash={cfg.config_hash()} seed={cfg.seed}"


def _json_header(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed}


def _need(path: Path, stage: str) -> Path:
    if not path.is_file():
        raise MissingInput(path, stage)
    return path


def _update_manifest(out: Path, cfg: RunConfig, stage: str, counts: dict) -> None:
    p = out / MANIFEST
    data = json.loads(p.read_text()) if p.is_file() else {}
    if data.get("config_hash") != cfg.config_hash():
        data = {}
    data.update(
        {
            "config_hash": cfg.config_hash(),
            "seed": cfg.seed,
            "config": cfg.canonical(),
            "versions": {
                "cmproc": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
        }
    )
    data.setdefault("counts", {})[stage] = counts
    data["counts"] = dict(sorted(data["counts"].items()))
    arts = {}
    for f in sorted(out.iterdir()):
        if f.is_file() and f.name != MANIFEST:
            arts[f.name] = hashlib.sha256(f.read_bytes()).hexdigest()
    data["artifacts"] = arts
    p.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _bids_source(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.input) if cfg.input else out / BIDS


def _enriched(out: Path, stage: str) -> Dataset:
    return load_dataset(_need(out / ENRICHED, stage))


# ---- stages -------------------------------------------------------------------


def stage_simulate(cfg: RunConfig, out: Path, workers: int = 1) -> dict:
    if cfg.input:
        log.info("simulate: input %s given, nothing to simulate", cfg.input)
        return {"skipped": True}
    m = generate_dataset(cfg.market_config(), workers=workers)
    write_enriched_csv(m.dataset, out / BIDS, header(cfg))
    write_truth_csv(m, out / TRUTH, header(cfg))
    return {"auctions": len(m.dataset.auctions), "bids": m.dataset.n_bids}


def write_bidders_csv(d: Dataset, path: Path, comment: str) -> None:
    wins: dict[str, int] = {}
    bids: dict[str, int] = {}
    for a, b in d.iter_bids():
        bids[b.bidder_id] = bids.get(b.bidder_id, 0) + 1
        wins[b.bidder_id] = wins.get(b.bidder_id, 0) + int(b.won)
    with path.open("w", newline="") as fh:
        fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bidder_id", "type_k", "bids", "wins", "expected_wins", "revenue_share", "participation_rate"])
        for bid in sorted(d.bidders):
            bd = d.bidders[bid]
            n = bids.get(bid, 0)
            ew = expected_wins(d, bid) if n else 0.0
            w.writerow([bid, bd.type_k, n, wins.get(bid, 0), fmt6(ew), fmt6(bd.revenue_share), fmt6(bd.participation_rate)])


def stage_classify(cfg: RunConfig, out: Path, workers: int = 1) -> dict:
    d = load_dataset(_need(_bids_source(cfg, out), "classify"))
    if cfg.types == "classify":
        d = classify_bidders(d, cfg.rev_threshold, cfg.part_threshold)
    write_enriched_csv(d, out / ENRICHED, header(cfg))
    write_bidders_csv(d, out / BIDDERS, header(cfg))
    n1 = sum(b.type_k for b in d.bidders.values())
    return {"auctions": len(d.auctions), "bids": d.n_bids, "dropped_auctions": d.dropped_auctions,
            "type1_bidders": n1, "type0_bidders": len(d.bidders) - n1}


def _bandwidths(cfg: RunConfig) -> dict[int, BandwidthSet] | None:
    out = {}
    for k, (hG, hg) in enumerate(((cfg.h_G0, cfg.h_g0), (cfg.h_G1, cfg.h_g1))):
        if not (math.isnan(hG) or math.isnan(hg)):
            out[k] = BandwidthSet(hG, hg, cfg.h_n)
    return out or None


def stage_estimate(cfg: RunConfig, out: Path, workers: int = 1) -> dict:
    d = _enriched(out, "estimate")
    est = estimate_hazards(d, _bandwidths(cfg), cfg.log_bids, cfg.density, workers, cfg.h_n)
    write_hazards_csv(est, out / HAZARDS, header(cfg))
    write_audit_csv(d, est, out / AUDIT, header(cfg))
    return {"points": len(est.auction_ids)}


def stage_invert(cfg: RunConfig, out: Path, workers: int = 1) -> dict:
    d = _enriched(out, "invert")
    est = load_hazards_csv(_need(out / HAZARDS, "invert"))
    costs = invert_dataset(d, est)
    write_costs_csv(costs, out / COSTS, header(cfg))
    return {"pseudo_costs": len(costs), "flags": flag_counts(costs)}


def stage_screen(cfg: RunConfig, out: Path, workers: int = 1) -> dict:
    d = _enriched(out, "screen")
    rep = run_screens(d, cfg.alpha, cfg.min_joint, cfg.whiten, workers)
    write_screens_json(rep, out / SCREENS, _json_header(cfg))
    rows = participation_timeline(d, sorted(rep.flags.broad))
    write_timeline_csv(rows, out / TIMELINE, header(cfg))
    return {"frequent_pairs": len(rep.pairs), "broad_ring": len(rep.flags.broad), "tight_ring": len(rep.flags.tight)}


def _rings(cfg: RunConfig, out: Path, d: Dataset) -> list[RingHypothesis]:
    rings = []
    flagged = None
    for label in cfg.ring_labels():
        if label in ("tight", "broad"):
            if flagged is None:
                flagged = load_rings(_need(out / SCREENS, "counterfactual"))
            rings.append(RingHypothesis(frozenset(flagged[label]), label))
        elif label == "custom":
            rings.append(RingHypothesis(frozenset(_ids(cfg.custom_ring)), "custom"))
        elif label == "planted":
            rings.append(RingHypothesis(frozenset(_ids(cfg.simulate.cartel)), "planted"))
    return rings


def stage_counterfactual(cfg: RunConfig, out: Path, workers: int = 1) -> dict:
    d = _enriched(out, "counterfactual")
    types = {(a.id, b.bidder_id): b.type_k for a, b in d.iter_bids()}
    costs = load_costs_csv(_need(out / COSTS, "counterfactual"), types)
    summary = rent_report(d, costs, _rings(cfg, out, d), cfg.meb, reserve=cfg.reserve)
    write_rent_json(summary, out / RENT, cfg.pricing_mode, _json_header(cfg))
    return {r.label + ":" + r.mode: round(r.pct, 10) for r in summary.reports if math.isfinite(r.pct)}


def stage_verify_cm(cfg: RunConfig, out: Path, workers: int = 1) -> dict:
    rep = verify_theorem(cfg.cm_grid_values(), cfg.cm_n, cfg.cm_t, workers=workers)
    (out / CM).write_text(json.dumps({**_json_header(cfg), **rep.to_json()}, indent=2) + "\n")
    return {"profiles": rep.profiles, "counterexamples": len(rep.counterexamples)}


def _pct(x) -> str:
    return "n/a" if x is None else f"{100 * x:.3f}%"


def stage_report(cfg: RunConfig, out: Path, workers: int = 1) -> dict:
    lines = [f"<!-- {header(cfg)} -->", "# Collusion screening and counterfactual report", ""]
    man = json.loads((out / MANIFEST).read_text()) if (out / MANIFEST).is_file() else {}
    cl = man.get("counts", {}).get("classify")
    if cl:
        lines += [f"Auctions: {cl['auctions']}, bids: {cl['bids']}, regular bidders: {cl['type1_bidders']}, "
                  f"fringe bidders: {cl['type0_bidders']}.", ""]
    inv = man.get("counts", {}).get("invert")
    if inv:
        fl = ", ".join(f"{k} {v}" for k, v in inv["flags"].items())
        lines += [f"Pseudo-costs: {inv['pseudo_costs']} ({fl}).", ""]
    if (out / SCREENS).is_file():
        s = json.loads((out / SCREENS).read_text())
        lines += ["## Screens", "", f"alpha = {s['alpha']}, min joint bids = {s['min_joint']}, residuals {s['residuals']}.", ""]
        if s["market"]:
            m = s["market"]
            lines += [f"Market exchangeability: F = {m['F']:.4f}, r = {m['r']}, m = {m['m']}, T - m = {m['dof']}, "
                      f"upper tail area = {m['upper_tail_area']:.4f}.", ""]
        lines += ["| pair | joint bids | exp. wins | corr. | p | F | UTA | fails |", "|---|---|---|---|---|---|---|---|"]
        for p in s["pairs"]:
            ind, ex = p["independence"] or {}, p["exchangeability"] or {}
            f = lambda v: "" if v is None else f"{v:.4f}"  # noqa: E731
            lines.append(
                f"| {p['pair'][0]},{p['pair'][1]} | {p['simultaneous_bids']} | {f(p['expected_wins'])} | "
                f"{f(ind.get('correlation'))} | {f(ind.get('p_value'))} | {f(ex.get('F'))} | "
                f"{f(ex.get('upper_tail_area'))} | {'yes' if p['fails'] else 'no'} |"
            )
        lines += ["", f"Broad ring: {', '.join(s['broad_ring']) or 'none'}.",
                  f"Tight ring: {', '.join(s['tight_ring']) or 'none'}.", ""]
    if (out / RENT).is_file():
        r = json.loads((out / RENT).read_text())
        lines += ["## Counterfactual rent", "", f"Primary pricing mode: {r['pricing_mode']}.", "",
                  "| ring | mode | members | total rent | pct | pct with MEB | excluded |", "|---|---|---|---|---|---|---|"]
        for b in r["rings"]:
            lines.append(
                f"| {b['label']} | {b['mode']} | {len(b['members'])} | {b['total_rent']} | {_pct(b['pct'])} | "
                f"{_pct(b['pct_with_meb'])} | {b['excluded']['count']} |"
            )
        lines.append("")
        for mode in dict.fromkeys(n["mode"] for n in r["nested_monotonicity"]):
            ok = all(n["holds"] for n in r["nested_monotonicity"] if n["mode"] == mode)
            expect = " (guaranteed in this mode)" if mode == "cm" else " (not guaranteed in this mode)"
            lines.append(f"Nested-ring monotonicity, {mode}: {'holds' if ok else 'violated'}{expect}.")
        lines.append("")
    if (out / CM).is_file():
        c = json.loads((out / CM).read_text())
        lines += ["## Mechanism verification", "",
                  f"n = {c['n']}, grid = {c['grid']}, {c['partitions']} partitions, {c['profiles']} profiles, "
                  f"{c['evaluations']} evaluations, {len(c['counterexamples'])} counterexamples.", ""]
    (out / REPORT).write_text("\n".join(lines))
    return {"lines": len(lines)}


STAGES: dict[str, Callable[[RunConfig, Path, int], dict]] = {
    "simulate": stage_simulate,
    "classify": stage_classify,
    "estimate": stage_estimate,
    "invert": stage_invert,
    "screen": stage_screen,
    "counterfactual": stage_counterfactual,
    "verify-cm": stage_verify_cm,
    "report": stage_report,
}


def run_stage(name: str, cfg: RunConfig, out: str | Path, workers: int = 1) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        counts = STAGES[name](cfg, out, workers)
    except MissingInput:
        raise
    except Exception as e:  # any failure is reported with the stage name
        raise StageError(name, e) from e
    _update_manifest(out, cfg, name, counts)
    log.info("%s: %s", name, counts)
    return counts


def run_pipeline(cfg: RunConfig, out: str | Path, workers: int = 1) -> dict:
    """All stages in order; artifacts of completed stages stay on failure."""
    return {name: run_stage(name, cfg, out, workers) for name in STAGES}
