"""PASS/FAIL lines from the acceptance suite, printed in the terminal summary."""

LINES: list[str] = []


def record(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
    LINES.append(line)
    print(line, flush=True)
