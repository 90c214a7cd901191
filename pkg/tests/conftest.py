import os
import sys
from importlib import resources

sys.path.insert(0, os.path.dirname(__file__))

GRAPH_DIR = resources.files("dyndag") / "data" / "graphs"
BUNDLED = sorted(p.name for p in GRAPH_DIR.iterdir() if p.name.endswith(".json"))
DATA = os.path.join(os.path.dirname(__file__), "data")


def bundled_path(name: str) -> str:
    return str(GRAPH_DIR / name)


def pytest_terminal_summary(terminalreporter):
    results = sys.modules.get("test_acceptance")
    if results is None or not results.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results.RESULTS):
        terminalreporter.write_line(results.RESULTS[n])
