import re

import torch

torch.set_num_threads(1)

# lines recorded by the acceptance tests, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def _order(line: str):
    m = re.match(r"criterion\s+(\d+)(\w*)", line)
    return (int(m.group(1)), m.group(2)) if m else (99, line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=_order):
            terminalreporter.write_line(line)
