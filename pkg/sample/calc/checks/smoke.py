# Exercise everything and report problems as plain log lines.
import calc

cases = [("add", (1, 2), 3), ("mean", ([1, 2],), 1.5), ("clamp", (7, 0, 2), 2)]
for name, args, want in cases:
    try:
        got = getattr(calc, name)(*args)
    except Exception as exc:
        print(f"ERROR {name}: {exc!r}")
        continue
    if got != want:
        print(f"ERROR {name}{args}: {got} != {want}")
    else:
        print(f"{name}{args} -> {got}")
