"""Independent reference implementations used as test oracles.

Each one is written the slow, obvious way and shares no code with the package.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import mpmath

BOX = "\\boxed{"


def boxed_bruteforce(text: str) -> Optional[str]:
    """Try every start of the box marker and every closing position.

    A span ``text[s:e+1]`` qualifies if its interior is a balanced brace
    string (every prefix has depth >= 0, total depth 0) and ``text[e]`` is the
    matching close. Of all complete spans, the one starting last wins.
    """
    best = None
    for s in range(len(text)):
        if not text.startswith(BOX, s):
            continue
        body_start = s + len(BOX)
        for e in range(body_start, len(text)):
            if text[e] != "}":
                continue
            body = text[body_start:e]
            depth, ok = 0, True
            for ch in body:
                depth += (ch == "{") - (ch == "}")
                if depth < 0:
                    ok = False
                    break
            if ok and depth == 0:
                best = body  # later s overwrites earlier ones
                break
    return best


def advantages_bruteforce(rewards: Sequence[float], gamma: float) -> list[float]:
    """O(T^2) discounted reward-to-go, each position recomputed from scratch.

    The inner sum is evaluated innermost-first, r_t + g*(r_{t+1} + g*(...)),
    which is the only float evaluation order a bitwise comparison can use.
    """
    T = len(rewards)
    out = []
    for t in range(T):
        acc = 0.0
        for l in range(T - 1, t - 1, -1):
            acc = rewards[l] + gamma * acc
        out.append(acc)
    return out


def advantages_power_sum(rewards: Sequence[float], gamma) -> list:
    """sum_l gamma^l r_{t+l}; exact when fed Fractions."""
    T = len(rewards)
    return [sum(gamma ** l * rewards[t + l] for l in range(T - t)) for t in range(T)]


def objective_mp(new_lps, old_lps, ref_lps, advantages, eps, beta, dps=50):
    """Scalar clipped objective (to be maximized) in arbitrary precision.

    Arguments are lists (one entry per response) of per-token lists.
    """
    with mpmath.workdps(dps):
        total = mpmath.mpf(0)
        for new, old, ref, adv in zip(new_lps, old_lps, ref_lps, advantages):
            s = mpmath.mpf(0)
            for n, o, r, a in zip(new, old, ref, adv):
                n, o, r, a = (mpmath.mpf(float(x)) for x in (n, o, r, a))
                ratio = mpmath.exp(n - o)
                clipped = min(max(ratio, 1 - mpmath.mpf(eps)), 1 + mpmath.mpf(eps))
                surrogate = min(ratio * a, clipped * a)
                q = mpmath.exp(r - n)
                k3 = q - 1 - mpmath.log(q)
                s += surrogate - mpmath.mpf(beta) * k3
            total += s / len(new)
        return total / len(new_lps)


def categorical_kl(p: Sequence[float], q: Sequence[float]) -> float:
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def reflection_count_sliding(text: str, word: str) -> int:
    """Slide a window over lowercased, whitespace-collapsed text; a hit needs
    non-letters (or the string edge) on both sides."""
    norm = " ".join(text.lower().split())
    # the package collapses any whitespace run to one space; so does split/join,
    # except at the ends, which cannot change boundary decisions
    n = 0
    for i in range(len(norm) - len(word) + 1):
        if norm[i:i + len(word)] != word:
            continue
        before = norm[i - 1] if i > 0 else " "
        after = norm[i + len(word)] if i + len(word) < len(norm) else " "
        if not ("a" <= before <= "z") and not ("a" <= after <= "z"):
            n += 1
    return n


def aggregate_spreadsheet(rows: Sequence[Sequence[float]]):
    """Column-wise mean and population std, cell by cell like a spreadsheet."""
    k = len(rows)
    means, stds = [], []
    for j in range(len(rows[0])):
        col = [r[j] for r in rows]
        m = math.fsum(col) / k
        var = math.fsum((c - m) ** 2 for c in col) / k
        means.append(m)
        stds.append(math.sqrt(var))
    return means, stds
