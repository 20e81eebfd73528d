import io
import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "scripts"))

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
EXAMPLES = os.path.join(REPO_ROOT, "examples")


@pytest.fixture
def examples_dir():
    return EXAMPLES


def make_session(**kwargs):
    """Fresh interpreter session with captured stdout/stderr."""
    from nsk.runtime import Session

    out, err = io.StringIO(), io.StringIO()
    kwargs.setdefault("workers", 1)
    session = Session(stdout=out, stderr=err, **kwargs)
    session.script_dir = EXAMPLES
    return session, out, err


@pytest.fixture
def session_factory():
    return make_session
