"""Collusion-proof procurement mechanism with coalition-annotated reports.

Each bidder reports a cost and the set of bidders it claims as partners.
Unreciprocated claims trigger a punishment phase; otherwise the lowest
report wins and is paid the lowest report outside its coalition.

Sign convention for ``prices``: a winner is paid ``P_i``; a non-winner pays
``P_i``. Bidder utility is therefore ``(P_i - C_i) A_i - P_i (1 - A_i)``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np

from . import _parallel

PUNISH = "punish"
STANDARD = "standard"


@dataclass(frozen=True)
class CoalitionReport:
    bidder: Hashable
    cost: float
    coalition: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "coalition", frozenset(self.coalition) | {self.bidder})
        if not math.isfinite(self.cost):
            raise ValueError("reported cost must be finite")


@dataclass(frozen=True)
class MechanismOutcome:
    phase: str
    allocation: Mapping
    prices: Mapping
    seller_retained: float
    winning_coalition: frozenset | None
    disagreements: frozenset = frozenset()

    @property
    def winner(self):
        for i, a in self.allocation.items():
            if a:
                return i
        return None

    def utility(self, members: Iterable, costs: Mapping) -> float:
        u = 0.0
        for i in members:
            a, p = self.allocation[i], self.prices[i]
            u += (p - costs[i]) * a - p * (1 - a)
        return u


def _index(reports: Sequence[CoalitionReport]) -> dict:
    by_id = {}
    for r in reports:
        if r.bidder in by_id:
            raise ValueError(f"duplicate report from {r.bidder!r}")
        by_id[r.bidder] = r
    for r in reports:
        unknown = r.coalition - by_id.keys()
        if unknown:
            raise ValueError(f"{r.bidder!r} names unknown bidder(s) {sorted(map(str, unknown))}")
    return by_id


def detect_disagreements(reports: Sequence[CoalitionReport]) -> frozenset:
    """Ordered pairs ``(i, j)`` with ``j`` in ``M_i`` but ``i`` not in ``M_j``."""
    by_id = _index(reports)
    return frozenset(
        (i, j) for i, r in by_id.items() for j in r.coalition if j != i and i not in by_id[j].coalition
    )


def coalition_partition(reports: Sequence[CoalitionReport]) -> list[frozenset]:
    """Classes of the transitive closure of mutual claims, sorted by smallest id."""
    by_id = _index(reports)
    parent = {i: i for i in by_id}

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, r in by_id.items():
        for j in r.coalition:
            if j != i and i in by_id[j].coalition:
                a, b = find(i), find(j)
                if a != b:
                    parent[max(a, b)] = min(a, b)
    classes: dict = {}
    for i in by_id:
        classes.setdefault(find(i), set()).add(i)
    return sorted((frozenset(c) for c in classes.values()), key=min)


PriceRule = Callable[[Mapping, Hashable, frozenset, float], float]


def lowest_outside_price(costs: Mapping, winner, coalition: frozenset, reserve: float) -> float:
    """Lowest report outside the winning coalition, capped at the reserve."""
    outside = [c for i, c in costs.items() if i not in coalition]
    return min(min(outside, default=math.inf), reserve)


def run_mechanism(
    reports: Sequence[CoalitionReport],
    t: float = 1.0,
    reserve: float = math.inf,
    price_rule: PriceRule = lowest_outside_price,
) -> MechanismOutcome:
    """Outcome of one round.

    Punish phase: nobody is awarded; every disagreement ``(i, j)`` charges
    ``i`` 2t, pays ``j`` t and leaves t with the seller. Standard phase: the
    lowest report wins (ties to the smallest id) and is paid
    ``price_rule``; a winning report above the price, which only happens
    when the reserve binds, means no award.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    if len(reports) < 2:
        raise ValueError("need at least two bidders")
    by_id = _index(reports)
    ids = sorted(by_id)
    dis = detect_disagreements(reports)
    alloc = {i: 0 for i in ids}
    prices = {i: 0.0 for i in ids}
    if dis:
        for i, j in sorted(dis):
            prices[i] += 2 * t
            prices[j] -= t
        return MechanismOutcome(PUNISH, alloc, prices, t * len(dis), None, dis)

    costs = {i: by_id[i].cost for i in ids}
    winner = min(ids, key=lambda i: (costs[i], i))
    m_star = next(c for c in coalition_partition(reports) if winner in c)
    price = price_rule(costs, winner, m_star, reserve)
    if not math.isfinite(price) or costs[winner] > price:
        return MechanismOutcome(STANDARD, alloc, prices, 0.0, None, dis)
    alloc[winner] = 1
    prices[winner] = float(price)
    return MechanismOutcome(STANDARD, alloc, prices, 0.0, m_star, dis)


def reports_from_json(text: str) -> list[CoalitionReport]:
    data = json.loads(text)
    return [CoalitionReport(r["bidder"], float(r["cost"]), frozenset(r.get("coalition", ()))) for r in data]


def outcome_to_json(o: MechanismOutcome) -> dict:
    ids = list(o.allocation)
    return {
        "phase": o.phase,
        "allocation": {str(i): o.allocation[i] for i in ids},
        "prices": {str(i): o.prices[i] for i in ids},
        "retained": o.seller_retained,
        "winning_coalition": None if o.winning_coalition is None else sorted(map(str, o.winning_coalition)),
        "disagreements": sorted([str(i), str(j)] for i, j in o.disagreements),
    }


# ---- exhaustive verification ------------------------------------------------


class BudgetExceeded(RuntimeError):
    def __init__(self, message: str, coverage: Mapping):
        super().__init__(message)
        self.coverage = dict(coverage)


def set_partitions(items: Sequence) -> list[list[frozenset]]:
    items = list(items)
    if not items:
        return [[]]
    first, rest = items[0], items[1:]
    out = []
    for p in set_partitions(rest):
        out.append([frozenset({first})] + p)
        for k in range(len(p)):
            out.append(p[:k] + [p[k] | {first}] + p[k + 1 :])
    return sorted((sorted(p, key=min) for p in out), key=lambda p: [sorted(b) for b in p])


def _claim_sets(i, ids) -> list[frozenset]:
    others = [j for j in ids if j != i]
    return [frozenset({i, *c}) for k in range(len(others) + 1) for c in itertools.combinations(others, k)]


@dataclass
class TheoremReport:
    n: int
    grid: tuple
    t: float
    reserve: float
    partitions: int
    profiles: int
    evaluations: int
    counterexamples: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.counterexamples

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "grid": list(self.grid),
            "t": self.t,
            "reserve": self.reserve,
            "partitions": self.partitions,
            "profiles": self.profiles,
            "evaluations": self.evaluations,
            "counterexamples": self.counterexamples,
        }


def _count_evaluations(n: int, g: int) -> int:
    ids = list(range(1, n + 1))
    total = 0
    for p in set_partitions(ids):
        for m in p:
            k = len(m)
            total += (2 ** (n - 1)) ** k + 2 ** (k * (k - 1) // 2) * g**n
    return total


def _verify_partition(args):
    """All checks for one true partition; returns (profiles, evaluations, counterexamples)."""
    partition, grid, t, reserve, price_rule, max_examples = args
    ids = sorted(i for blk in partition for i in blk)
    true_claim = {i: blk for blk in partition for i in blk}
    out, evals, profiles = [], 0, 0
    grid = tuple(grid)
    for m in partition:
        mem = sorted(m)
        outs = [i for i in ids if i not in m]
        claim_choices = [_claim_sets(i, ids) for i in mem]

        # claim configurations with a disagreement end in punishment, which reads no costs
        consistent, punish_best, punish_arg = [], -math.inf, None
        base = {i: grid[0] for i in ids}
        for claims in itertools.product(*claim_choices):
            cl = dict(zip(mem, claims))
            reps = [CoalitionReport(i, base[i], cl.get(i, true_claim[i])) for i in ids]
            if detect_disagreements(reps):
                o = run_mechanism(reps, t, reserve, price_rule)
                evals += 1
                u = -sum(o.prices[i] for i in mem)
                if u > punish_best:
                    punish_best, punish_arg = u, {str(i): sorted(cl[i]) for i in mem}
            else:
                consistent.append(cl)

        for c_out in itertools.product(grid, repeat=len(outs)):
            # deviation table: every consistent claim set and joint cost report
            win_in, price, widx, labels = [], [], [], []
            for cl in consistent:
                for rep in itertools.product(grid, repeat=len(mem)):
                    costs = dict(zip(mem, rep)) | dict(zip(outs, c_out))
                    reps = [CoalitionReport(i, costs[i], cl.get(i, true_claim[i])) for i in ids]
                    o = run_mechanism(reps, t, reserve, price_rule)
                    evals += 1
                    w = o.winner
                    win_in.append(w in m)
                    price.append(o.prices[w] if w is not None else 0.0)
                    widx.append(mem.index(w) if w in m else 0)
                    labels.append((cl, rep))
            win_in, price, widx = np.array(win_in), np.array(price), np.array(widx)

            for c_mem in itertools.product(grid, repeat=len(mem)):
                profiles += 1
                costs = dict(zip(mem, c_mem)) | dict(zip(outs, c_out))
                truth = run_mechanism(
                    [CoalitionReport(i, costs[i], true_claim[i]) for i in ids], t, reserve, price_rule
                )
                evals += 1
                u_true = truth.utility(mem, costs)
                cm = np.array(c_mem, dtype=float)
                u_dev = np.where(win_in, price - cm[widx], 0.0)
                k = int(np.argmax(u_dev))
                best, arg = float(u_dev[k]), labels[k]
                dev = {"claims": {str(i): sorted(arg[0].get(i, true_claim[i])) for i in mem},
                       "reports": dict(zip(map(str, mem), arg[1]))}
                if punish_best > best:
                    best, dev = punish_best, {"claims": punish_arg, "reports": "any"}
                ctx = {"partition": [sorted(b) for b in partition], "costs": {str(i): costs[i] for i in ids},
                       "coalition": mem}
                if len(out) >= max_examples:
                    continue
                if best > u_true + 1e-12:
                    out.append({**ctx, "property": "truthfulness", "u_truth": u_true, "u_deviation": best,
                                "deviation": dev})
                if u_true < -1e-12:
                    out.append({**ctx, "property": "coalitional_rationality", "u_truth": u_true})
                w = truth.winner
                if w is None or costs[w] > min(costs.values()):
                    out.append({**ctx, "property": "efficiency", "winner": w})
    return profiles, evals, out


def verify_theorem(
    grid: Sequence[float] = (1, 2, 3, 4, 5),
    n: int = 3,
    t: float = 1.0,
    reserve: float | None = None,
    price_rule: PriceRule = lowest_outside_price,
    budget: int = 10**6,
    workers: int = 1,
    max_examples: int = 20,
) -> TheoremReport:
    """Exhaustively check truthfulness, coalitional rationality and efficiency.

    For every true coalition partition of ``n`` bidders, every true cost
    profile on ``grid`` and every coalition in the partition, all joint
    deviations of that coalition (claimed partners and cost reports, others
    truthful) are compared with truth-telling. ``reserve`` defaults to the
    largest grid value so that the grand coalition is still paid.
    """
    if not 2 <= n <= 4:
        raise ValueError("n must be between 2 and 4")
    grid = tuple(sorted(set(float(g) for g in grid)))
    reserve = max(grid) if reserve is None else float(reserve)
    ids = list(range(1, n + 1))
    parts = set_partitions(ids)
    need = _count_evaluations(n, len(grid))
    if need > budget:
        raise BudgetExceeded(
            f"enumeration needs ~{need} mechanism evaluations, budget {budget}",
            {"partitions": len(parts), "evaluations_needed": need, "evaluations_done": 0},
        )
    res = _parallel.pmap(_verify_partition, [(p, grid, t, reserve, price_rule, max_examples) for p in parts], workers)
    rep = TheoremReport(n, grid, t, reserve, len(parts), 0, 0)
    for profiles, evals, ce in res:
        rep.profiles += profiles
        rep.evaluations += evals
        rep.counterexamples.extend(ce)
    return rep


def own_cost_price(costs: Mapping, winner, coalition: frozenset, reserve: float) -> float:
    """Mutant rule paying the winner its own report; breaks truthfulness."""
    return costs[winner]
