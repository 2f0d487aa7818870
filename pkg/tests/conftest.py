import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from promptlab import backbone as B  # noqa: E402
from promptlab import harness  # noqa: E402

TINY = B.BackboneConfig(vocab_size=512, model_dim=16, num_layers=1, num_heads=2, ffn_dim=32,
                        max_seq_len=48, dropout_p=0.1, seed=0)


@pytest.fixture(scope="session")
def tiny_backbone():
    """Untrained small backbone; enough for plumbing tests."""
    return B.freeze(B.init_backbone(TINY))


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory, tiny_backbone):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.npz"
    B.save_backbone(tiny_backbone, path)
    return path


@pytest.fixture(scope="session")
def desk_backbone(request):
    """The reference desk backbone, pretrained once and cached between sessions.

    ``PROMPTLAB_BACKBONE`` may point at an existing checkpoint instead.
    """
    env = os.environ.get("PROMPTLAB_BACKBONE")
    if env:
        return B.load_backbone(env)
    cache = Path(request.config.cache.mkdir("promptlab")) / "desk_backbone.npz"
    if cache.exists():
        try:
            bb = B.load_backbone(cache)
            if bb.config == B.BackboneConfig():
                return bb
        except B.BackboneError:
            pass
    bb, _ = harness.build_backbone()
    B.save_backbone(bb, cache)
    return bb


# one pass/fail line per acceptance criterion, printed after the run

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    _CRITERIA[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        line = f"criterion {number:>2} [{status}] {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
