import json
import shutil
from pathlib import Path

import pytest

from autovarp.engine import StudySpec, run_study
from autovarp.plan import load_plan, load_protocols
from autovarp.slab import SlabGeometry, slab_plan, write_slab_cohort

REPO = Path(__file__).resolve().parents[1]
DATA = REPO / "data" / "slab"

# a 12 mm slab at 0.5 mm: same layout as the reference slab, seconds per chain
TINY = SlabGeometry(size=12.0, resolution=0.5, scar_width=6.0, scar_height=5.0,
                    isthmus_width=1.0, electrode_offset=1.5)


@pytest.fixture
def plan_dict():
    return slab_plan()


def make_spec(root, n_protocols=2, **kw):
    root = Path(root)
    plan = load_plan(root / "planfile.json")
    prots = load_protocols(root / "varp_protocols.json", plan)[:n_protocols]
    kw.setdefault("ci_array", (280.0, 330.0))
    kw.setdefault("mt_duration", 300.0)
    return StudySpec(plan, root / "cohort", plan_path=root / "planfile.json",
                     protocols_path=root / "varp_protocols.json", protocols=tuple(prots),
                     root=root, **kw)


def trim_protocols(root, n):
    """Keep the first ``n`` protocols of the cohort's protocols file."""
    path = Path(root) / "varp_protocols.json"
    d = json.loads(path.read_text())
    d["prepacing"] = dict(list(d["prepacing"].items())[:n])
    path.write_text(json.dumps(d, indent=2) + "\n")


@pytest.fixture
def tiny_cohort(tmp_path):
    write_slab_cohort(tmp_path, TINY)
    trim_protocols(tmp_path, 2)
    return tmp_path


@pytest.fixture(scope="session")
def _tiny_study_template(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_study")
    write_slab_cohort(root, TINY)
    trim_protocols(root, 2)
    report = run_study(make_spec(root))
    assert report.ok, report.failures
    return root


@pytest.fixture
def tiny_study(_tiny_study_template, tmp_path):
    """A completed two-protocol study on the tiny slab (private copy)."""
    dst = tmp_path / "study"
    shutil.copytree(_tiny_study_template, dst)
    return dst


# -- acceptance report -----------------------------------------------------------------

ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    """Store one PASS/FAIL line; printed at the end of the session."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
