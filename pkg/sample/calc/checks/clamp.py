from calc import clamp

assert clamp(5, 0, 3) == 3
assert clamp(-2, 0, 3) == 0
