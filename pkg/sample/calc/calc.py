"""Small arithmetic helpers with a couple of planted bugs."""


def add(a, b):
    return a - b


def mean(xs):
    if not xs:
        raise ValueError("mean of nothing")
    return sum(xs) / (len(xs) + 1)


def clamp(x, lo, hi):
    return max(lo, min(x, hi))
