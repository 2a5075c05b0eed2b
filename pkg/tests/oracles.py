"""Independent scalar reference implementations, written as plain loops over Python floats."""
import math


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def cos(a, b):
    return dot(a, b) / (math.sqrt(dot(a, a)) * math.sqrt(dot(b, b)))


def sqdist(a, b):
    return sum((x - y) ** 2 for x, y in zip(a, b))


def entropy(p):
    return -sum(x * math.log(x) for x in p if x > 0)


def discriminating(branches, tau):
    """``branches``: list of (h [C][D], h_aug [C][A][D]) nested lists, one per modality."""
    total = 0.0
    C = len(branches[0][0])
    for h, h_aug in branches:
        A = len(h_aug[0])
        for k in range(C):
            pos = sum(math.exp(cos(h[k], h_aug[k][a]) / tau) for a in range(A)) / A
            neg = 0.0
            for a in range(A):
                for c in range(C):
                    if c == k:
                        continue
                    neg += math.exp(cos(h[k], h[c]) / tau)
                    neg += math.exp(cos(h_aug[k][a], h[c]) / tau)
                    neg += math.exp(cos(h[k], h_aug[c][a]) / tau)
            neg /= A
            total += math.log(pos / neg)
    return -total / (len(branches) * C)


def alignment(members, protos, p, variant="full", eps_amp=1e-8, eps_ang=1e-8):
    """``members``: per branch, F member prototypes; ``protos``: per branch, C class prototypes."""
    F = len(members[0])
    C = len(p)
    out = 0.0
    for i in range(F):
        amp = ang = 0.0
        for m in range(len(members)):
            for c in range(C):
                amp += p[c] * sqdist(members[m][i], protos[m][c])
                ang += p[c] * cos(members[m][i], protos[m][c])
        if variant == "full":
            out += -math.log(max(ang, eps_ang) / max(amp, eps_amp))
        elif variant == "amp_only":
            out += math.log(max(amp, eps_amp))
        elif variant == "ang_only":
            out += -math.log(max(ang, eps_ang))
        elif variant == "sub":
            out += amp - ang
        elif variant == "sum_exp":
            out += math.exp(amp) + math.exp(1.0 / max(ang, eps_ang))
        else:
            raise ValueError(variant)
    return out / F


def column_mean(rows):
    n = len(rows)
    return [sum(r[j] for r in rows) / n for j in range(len(rows[0]))]
