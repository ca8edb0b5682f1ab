import numpy as np
import pytest

from vacantlab import chains
from vacantlab.lattice import build_domain

# smallest d=3 geometry with nonempty B and Delta at N=20
SMALL = dict(d=3, N=20, gamma=0.501, chi=0.05)


@pytest.fixture(scope="session")
def small_domain():
    return build_domain(**SMALL)


@pytest.fixture(scope="session")
def small_data(small_domain):
    return chains.chain_data(small_domain)


@pytest.fixture(scope="session")
def small_kernels(small_domain, small_data):
    Y = chains.build_Y_kernel(small_domain, data=small_data)
    Z = chains.build_Z_kernel(small_domain, data=small_data)
    return Y, Z


def random_kernel(rng, m):
    return rng.dirichlet(np.ones(m), size=m)


# ---------------------------------------------------------------- acceptance summary

_criteria: dict = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", (mark.args[0], mark.args[1],
                                                       mark.kwargs.get("supplement", False))))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when != "call" and not (report.failed or report.skipped):
        return
    number, title, supplement = props["criterion"]
    entry = _criteria.setdefault(number, {"title": title, "main": [], "supplement": []})
    entry["supplement" if supplement else "main"].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "PASS" if e["main"] and all(e["main"]) else "FAIL"
        line = f"criterion {number:>2} {status}  {e['title']}"
        if e["supplement"]:
            line += f"  (supplement: {'pass' if all(e['supplement']) else 'fail'})"
        terminalreporter.write_line(line)
