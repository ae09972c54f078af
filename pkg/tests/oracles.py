"""Independent reference implementations used as test oracles."""

import math


def compositions(m, cap):
    """Every ordered way to write m as a sum of parts in [1, cap]."""
    if m == 0:
        yield ()
        return
    for first in range(1, min(cap, m) + 1):
        for rest in compositions(m - first, cap):
            yield (first,) + rest


def _joins(ent, start, j, length, tau, rho, cap):
    return length < cap and ent[j] < tau and ent[j] <= rho * max(ent[start], 1e-6)


def is_greedy_partition(ent, lengths, tau, rho, cap):
    """True iff every member joined its segment and every later start was refused."""
    start = 0
    for length in lengths:
        for off in range(1, length):
            if not _joins(ent, start, start + off, off, tau, rho, cap):
                return False
        nxt = start + length
        if nxt < len(ent) and _joins(ent, start, nxt, length, tau, rho, cap):
            return False
        start = nxt
    return True


def brute_force_segment(ent, tau, rho, cap):
    """Search all compositions for the partition consistent with the join rule."""
    hits = [c for c in compositions(len(ent), cap) if is_greedy_partition(ent, c, tau, rho, cap)]
    assert len(hits) == 1, hits
    out, start = [], 0
    for n in hits[0]:
        out.append((start, n))
        start += n
    return out


def nearest_rank(values, percentile):
    ordered = sorted(values)
    rank = math.ceil(percentile / 100 * len(ordered))
    return ordered[max(rank, 1) - 1]


def entropy_loop(logits):
    top = max(logits)
    w = [math.exp(x - top) for x in logits]
    z = sum(w)
    return -sum((x / z) * math.log(x / z) for x in w if x > 0)
