import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from helpers import ACCEPTANCE  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (isinstance(k, str), str(k).zfill(3))):
        title, passed, detail = ACCEPTANCE[key]
        label = f"criterion {key}" if isinstance(key, int) else key
        tr.write_line(f"{'PASS' if passed else 'FAIL'}  {label}: {title}" + (f" [{detail}]" if detail else ""))
