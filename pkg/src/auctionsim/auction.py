"""Position auctions: one shared allocation rule, three payment rules.

Candidates bidding at least their reserve and scoring non-negatively are
ranked by score (bid minus user cost), and the top ``z`` take slots in
order.  FPA charges the bid, GSP the minimum bid needed to hold the slot
against the next ranked candidate, and VCG the externality accumulated
down the ranked tail.  All functions here are per-auction and pure; the
engine uses a vectorized equivalent (see ``kernels``) that is tested
against these.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

from .datagen import AuctionInstance

FORMATS = ("fpa", "gsp", "vcg")


@dataclass(frozen=True)
class AuctionOutcome:
    """Slots, allocations, and payments for every candidate of one auction.

    ``winners`` and ``runner_ups`` are candidate indices in score order;
    runner-ups passed the filters but ran out of slots.
    """

    slot_of: tuple[int | None, ...]
    allocation: tuple[float, ...]
    payment: tuple[float, ...]
    winners: tuple[int, ...]
    runner_ups: tuple[int, ...]


def score(bid: float, cost: float) -> float:
    """Ranking score of a candidate; may be negative."""
    return bid - cost


def allocate(instance: AuctionInstance, bids: Sequence[float]) -> AuctionOutcome:
    """Filter, rank, and assign a prefix of slots; payments left at zero.

    Filters keep candidates with bid >= reserve and score >= 0 (both
    boundaries inclusive).  Ranking is by descending score, ties broken by
    ascending advertiser id.
    """
    cands = instance.candidates
    if len(bids) != len(cands):
        raise ValueError("bid vector length differs from candidate count")
    passed = [
        i for i, (adv, _v, cost, reserve) in enumerate(cands)
        if bids[i] >= reserve and score(bids[i], cost) >= 0.0
    ]
    ranked = sorted(passed, key=lambda i: (-score(bids[i], cands[i][2]), cands[i][0]))
    z = instance.num_slots
    winners = tuple(ranked[:z])
    runner_ups = tuple(ranked[z:])
    slot_of: list[int | None] = [None] * len(cands)
    allocation = [0.0] * len(cands)
    for k, i in enumerate(winners):
        slot_of[i] = k + 1
        allocation[i] = instance.slot_ctrs[k]
    return AuctionOutcome(tuple(slot_of), tuple(allocation),
                          tuple([0.0] * len(cands)), winners, runner_ups)


def fpa_payment(outcome: AuctionOutcome, bids: Sequence[float]) -> tuple[float, ...]:
    """First price: allocation times own bid."""
    return tuple(b * a for b, a in zip(bids, outcome.allocation))


def gsp_payment(instance: AuctionInstance, outcome: AuctionOutcome,
                bids: Sequence[float], next_candidate: str = "ranked") -> tuple[float, ...]:
    """Generalized second price.

    A winner pays allocation times max(own reserve, next score + own cost),
    where "next" is the following candidate in the ranked filtered order.
    With ``next_candidate="ranked"`` (default) the last slot is priced
    against the top runner-up; ``"slot_only"`` prices only against the
    occupant of the next slot, so the last winner pays just
    max(reserve, cost) scaled.
    """
    if next_candidate not in ("ranked", "slot_only"):
        raise ValueError(f"unknown next_candidate mode {next_candidate!r}")
    ranked = list(outcome.winners) + list(outcome.runner_ups)
    payments = [0.0] * len(bids)
    for k, i in enumerate(outcome.winners):
        nxt = None
        if k + 1 < len(ranked) and (next_candidate == "ranked" or k + 1 < len(outcome.winners)):
            nxt = ranked[k + 1]
        next_score = score(bids[nxt], instance.candidates[nxt][2]) if nxt is not None else 0.0
        reserve = instance.candidates[i][3]
        cost = instance.candidates[i][2]
        payments[i] = outcome.allocation[i] * max(reserve, next_score + cost)
    return tuple(payments)


def vcg_payment(instance: AuctionInstance, outcome: AuctionOutcome,
                bids: Sequence[float]) -> tuple[float, ...]:
    """VCG with reserves.

    For each winner, walk every ranked candidate below it, charging the
    allocation drop times max(own reserve, that candidate's score + own
    cost); the max with the reserve sits inside every term.  A final term
    charges the last allocation against max(reserve, cost).
    """
    ranked = list(outcome.winners) + list(outcome.runner_ups)
    payments = [0.0] * len(bids)
    for k, i in enumerate(outcome.winners):
        reserve = instance.candidates[i][3]
        cost = instance.candidates[i][2]
        alloc = outcome.allocation[i]
        pay = 0.0
        for y in ranked[k + 1:]:
            pay += (alloc - outcome.allocation[y]) * max(
                reserve, score(bids[y], instance.candidates[y][2]) + cost)
            alloc = outcome.allocation[y]
        pay += alloc * max(reserve, cost)
        payments[i] = pay
    return tuple(payments)


def run_auction(mechanism: str, instance: AuctionInstance, bids: Sequence[float],
                gsp_next: str = "ranked") -> AuctionOutcome:
    """Allocate then price under the named mechanism.

    The allocation is identical across mechanisms for identical bids; only
    payments differ.
    """
    outcome = allocate(instance, bids)
    if mechanism == "fpa":
        payments = fpa_payment(outcome, bids)
    elif mechanism == "gsp":
        payments = gsp_payment(instance, outcome, bids, next_candidate=gsp_next)
    elif mechanism == "vcg":
        payments = vcg_payment(instance, outcome, bids)
    else:
        raise ValueError(f"unknown mechanism {mechanism!r}; expected one of {FORMATS}")
    return dataclasses.replace(outcome, payment=payments)
