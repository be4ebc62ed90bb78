import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from synthetic import make_tree  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_tree(tmp_path_factory):
    """Two categories x three samples, two renders each, 2048-point clouds plus meshes."""
    root = tmp_path_factory.mktemp("data") / "shapenet"
    make_tree(root, categories=("box", "prism"), per_category=3, views=2, seed=0)
    return root


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.summary_lines():
        terminalreporter.write_line(line)
