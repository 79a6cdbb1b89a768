"""Brute-force reference for the detection pipeline.

Shares no code with ``flowcorr.detector``/``flow_stats``: flows are plain
lists of ``(timestamp, direction, size)`` tuples, tolerances are stepped in
``Decimal`` and every filter is a linear scan.
"""

from decimal import Decimal

METRICS = ("tp", "at", "td", "tt")


def fingerprint(packets):
    down = sorted((t, s) for t, d, s in packets if d == "down")
    if not down:
        return None
    first, last = down[0][0], down[-1][0]
    n = len(down)
    span = last - first if n > 1 else 0.0
    return {
        "tp": n,
        "at": span / (n - 1) if n > 1 else 0.0,
        "td": sum(s for _, s in down),
        "tt": span,
        "start": first,
        "end": last,
    }


def close_enough(value, ref, tol):
    if ref == 0:
        return value <= 1e-9
    return abs(value - ref) <= tol * ref


def tolerance_steps(initial, increment, maximum):
    top = Decimal(str(maximum))
    tol = min(Decimal(str(initial)), top)
    step = Decimal(str(increment))
    steps = []
    while tol <= top:
        steps.append(float(tol))
        tol += step
    return steps


def brute_force_detect(server_packets, clients, maxima, initial, increment, slack):
    """``clients`` maps name -> packet list; ``maxima`` maps metric -> fraction."""
    ref = fingerprint(server_packets)
    lo, hi = ref["start"] - slack, ref["end"] + slack
    pool = {}
    for name, packets in clients.items():
        inside = [(t, d, s) for t, d, s in packets if lo <= t <= hi]
        fp = fingerprint(inside)
        if fp is not None:
            pool[name] = fp
    if not pool:
        return set()
    for metric in METRICS:
        survivors = None
        for tol in tolerance_steps(initial, increment, maxima[metric]):
            hits = {n: fp for n, fp in pool.items() if close_enough(fp[metric], ref[metric], tol)}
            if hits:
                survivors = hits
                break
        if survivors is None:
            return set()
        pool = survivors
    return set(pool)
