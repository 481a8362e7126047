"""Collects one pass/fail line per acceptance criterion for the terminal summary."""
import sys

LINES = []


def record(criterion, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    LINES.append(line)
    print(line, file=sys.__stdout__, flush=True)
    return ok
