import numpy as np
import pytest

from teledex.kinematics import load_model


@pytest.fixture(scope="session")
def body():
    return load_model("g1body")


@pytest.fixture(scope="session")
def hand():
    return load_model("wuji20")


def random_rotation(rng):
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_chain_doc(rng, n_joints=3, branch=False):
    """Model document for a random serial chain (optionally with a side branch)."""
    links = [{"name": "root", "parent": None,
              "offset": {"rotation": random_rotation(rng).ravel().tolist(), "translation": rng.normal(size=3).tolist()},
              "joint": None}]
    for k in range(n_joints):
        axis = rng.normal(size=3)
        parent = links[-1]["name"] if not (branch and k == n_joints - 1) else links[1]["name"] if len(links) > 1 else "root"
        links.append({"name": f"l{k}", "parent": parent,
                      "offset": {"rotation": random_rotation(rng).ravel().tolist(),
                                 "translation": rng.uniform(-0.5, 0.5, size=3).tolist()},
                      "joint": {"axis": (axis / np.linalg.norm(axis)).tolist(), "lower": -2.5, "upper": 2.5}})
    links.append({"name": "tip", "parent": links[-1]["name"],
                  "offset": {"rotation": np.eye(3).ravel().tolist(), "translation": [0.3, 0.0, 0.1]}, "joint": None})
    return {"name": "chain", "links": links, "sets": {}}


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
