import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from sharecmp.config import preset_config  # noqa: E402
from sharecmp.data import SyntheticSceneSpec, generate_synthetic_dataset  # noqa: E402


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_cfg():
    return preset_config("tiny", decoder={"num_classes": 3})


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    spec = SyntheticSceneSpec(seed=11)
    generate_synthetic_dataset(spec, 8, root, split="train")
    generate_synthetic_dataset(spec, 4, root, split="val")
    return root


# --------------------------------------------------------------------------- acceptance report

_ACCEPTANCE: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (report.when != "call" and report.passed):
        return
    number, title = mark.args
    entry = _ACCEPTANCE.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] = entry["ok"] and report.passed
    detail = dict(item.user_properties).get("detail")
    if report.when == "call" and detail:
        label = item.callspec.id if hasattr(item, "callspec") else ""
        entry["details"].append(f"{label}: {detail}" if label else detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        entry = _ACCEPTANCE[number]
        status = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {entry['title']}")
        for detail in entry["details"]:
            terminalreporter.write_line(f"              {detail}")
