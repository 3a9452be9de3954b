# Collects the bash suites in tests/ so pytest runs them; each suite exits non-zero on any FAIL.
import subprocess
from pathlib import Path

import pytest

TESTS_DIR = Path(__file__).resolve().parent
SUITES = sorted(TESTS_DIR.glob("test_*.sh"))


@pytest.mark.parametrize("suite", SUITES, ids=[s.name for s in SUITES])
def test_suite(suite):
    proc = subprocess.run(["bash", str(suite)], cwd=TESTS_DIR.parent, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout[-4000:] + proc.stderr[-2000:]
