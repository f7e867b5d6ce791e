from calc import mean

assert mean([1, 2, 3]) == 2
assert mean([4]) == 4
