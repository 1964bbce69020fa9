"""Independent straight-line reference implementations used as test oracles."""

import math


def percentile_linear(values, q):
    """Linear interpolation between closest ranks (numpy's default definition)."""
    s = sorted(values)
    pos = (len(s) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def reputation_round(models):
    """One scoring-and-aggregation round written with plain Python lists."""
    n, dim = len(models), len(models[0])
    temp = [sum(m[j] for m in models) / n for j in range(dim)]
    dist = [math.sqrt(sum((m[j] - temp[j]) ** 2 for j in range(dim))) for m in models]
    dmax = max(dist)
    scores = [1.0] * n if dmax == 0 else [1.0 - d / dmax for d in dist]
    total = sum(scores)
    reps = [1.0 / n] * n if total < 1e-12 else [s / total for s in scores]
    p70, p50 = percentile_linear(reps, 70), percentile_linear(reps, 50)
    lambdas = [0.2 if r >= p70 else 0.5 if r >= p50 else 1.0 for r in reps]
    glob = [0.0] * dim
    for r, m in zip(reps, models):
        for j in range(dim):
            glob[j] += r * m[j]
    return dict(temp=temp, distances=dist, scores=scores, reputation=reps,
                p70=p70, p50=p50, lambdas=lambdas, global_model=glob)


def two_pass_sd(values):
    n = len(values)
    mean = sum(values) / n
    return math.sqrt(sum((v - mean) ** 2 for v in values) / (n - 1))
