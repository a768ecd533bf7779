import pytest

from strm import config as cfgmod

TINY = """
[train]
iterations = 3
n_ids = 2
k_seqs = 2
[model]
channels = 4
stage_widths = 4, 4
transition_width = 8
spatial_hidden = 8
stim_width = 8
classifier_hidden = 8
[data]
num_identities = 3
frames = 2
[eval]
trials = 2
probes_per_id = 1
"""


@pytest.fixture
def tiny_text():
    return TINY


@pytest.fixture
def tiny_cfg():
    return cfgmod.loads(TINY)


@pytest.fixture
def tiny_ini(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
