"""One PASS/FAIL line per acceptance criterion, echoed in the pytest summary."""

LINES: list[str] = []


def record(name: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    print(line)
    LINES.append(line)
    return ok
