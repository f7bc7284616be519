import torch

# acceptance verdicts, printed in the terminal summary even when output is captured
ACCEPTANCE: dict[int, str] = {}

torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
