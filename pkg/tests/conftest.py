import importlib

import pytest

BACKENDS = ["python"]
try:
    importlib.import_module("dblp._kernels")
    BACKENDS.append("cython")
except ImportError:
    pass

# filled by test_acceptance, echoed at the end of the run
ACCEPTANCE: dict[str, str] = {}


@pytest.fixture(params=BACKENDS)
def kmod(request):
    name = "dblp._pykernels" if request.param == "python" else "dblp._kernels"
    return importlib.import_module(name)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[1])):
            terminalreporter.write_line(ACCEPTANCE[key])
