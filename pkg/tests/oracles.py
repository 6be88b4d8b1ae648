"""Slow, loop-based reference implementations used only by the tests."""

import math


def mean(xs):
    return sum(xs) / len(xs)


def pearson(x, y):
    mx, my = mean(x), mean(y)
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    if sxx == 0 or syy == 0:
        return 0.0
    return sxy / math.sqrt(sxx * syy)


def corr_vector(trace):
    """trace: nested lists [user][step][feature]."""
    n = len(trace[0][0])
    out = []
    for a in range(n):
        for b in range(a + 1, n):
            rs = [pearson([s[a] for s in u], [s[b] for s in u]) for u in trace]
            out.append(mean(rs))
    return out


def corr_distance(r1, r2):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(r1, r2)))


def moments(values):
    n = len(values)
    mu = sum(values) / n
    var = sum((v - mu) ** 2 for v in values) / n
    sd = math.sqrt(var)
    m3 = sum((v - mu) ** 3 for v in values) / n
    return mu, sd, (m3 / sd**3 if sd > 0 else 0.0)


def lumped(trace, f):
    return [s[f] for u in trace for s in u]


def moments_distance(a, b):
    return sum((x - y) ** 2 for x, y in zip(a, b))


def cross_correlation(x, y, k, method="overlap"):
    n = len(x)
    if method == "overlap":
        return pearson(x[: n - k], y[k:])
    mx, my = mean(x), mean(y)
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    if sxx == 0 or syy == 0:
        return 0.0
    return sum((x[t] - mx) * (y[t + k] - my) for t in range(n - k)) / math.sqrt(sxx * syy)


def novelty(trace, f=0, method="overlap"):
    users = [[s[f] for s in u] for u in trace]
    u, k_steps = len(users), len(users[0])
    lag_max = int(math.floor(10 * math.log10(k_steps / 2)))
    lag_max = min(lag_max, k_steps - 2)
    total = 0.0
    for i in range(u):
        best = -math.inf
        for j in range(u):
            if j == i:
                continue
            for k in range(lag_max + 1):
                best = max(best, cross_correlation(users[i], users[j], k, method))
        total += best
    return 1 - total / u
