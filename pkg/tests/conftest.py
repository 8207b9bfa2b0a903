import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        status, title, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {title}" + (f"  [{detail}]" if detail else ""))
