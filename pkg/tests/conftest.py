import os

from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("thorough", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# Acceptance tests record a human-readable result line here; the terminal
# summary prints one PASS/FAIL line per criterion at the end of the run.
ACCEPTANCE_NOTES: dict[str, str] = {}


def record_criterion(number: int, note: str) -> None:
    ACCEPTANCE_NOTES[number] = note


def _criterion_number(nodeid: str):
    name = nodeid.split("::")[-1]
    parts = name.split("_")
    try:
        return int(parts[2])
    except (IndexError, ValueError):
        return None


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance" not in nodeid or "test_criterion_" not in nodeid:
                continue
            if getattr(rep, "when", "call") not in ("call", "collect"):
                continue
            num = _criterion_number(nodeid)
            if num is not None:
                results[num] = status == "passed"
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        word = "PASS" if results[num] else "FAIL"
        note = ACCEPTANCE_NOTES.get(num, "")
        suffix = f": {note}" if note else ""
        terminalreporter.write_line(f"{word} criterion {num}{suffix}")
