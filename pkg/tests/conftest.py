import numpy as np
import pytest
from PIL import Image

_criteria = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_corpus(root, n_poisonous, n_edible, size=(40, 52), seed=0, junk=()):
    """Write a synthetic corpus: poisonous images are bluish vertical stripes, edible reddish blobs."""
    g = np.random.default_rng(seed)
    for name, count in (("poisonous", n_poisonous), ("edible", n_edible)):
        folder = root / name
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            h, w = size
            img = g.integers(0, 60, size=(h, w, 3))
            if name == "poisonous":
                img[:, ::4, 2] += 180
            else:
                img[h // 4: 3 * h // 4, w // 4: 3 * w // 4, 0] += 180
            Image.fromarray(np.clip(img, 0, 255).astype(np.uint8)).save(folder / f"{name}_{i:03d}.png")
    for rel in junk:
        (root / rel).write_bytes(b"this is not an image")
    return root


@pytest.fixture
def corpus_factory(tmp_path):
    def factory(n_poisonous, n_edible, **kw):
        return make_corpus(tmp_path / "corpus", n_poisonous, n_edible, **kw)
    return factory


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker
        prev = _criteria.get(number, (title, "PASS"))
        outcome = "PASS" if report.outcome == "passed" and prev[1] == "PASS" else "FAIL"
        if report.outcome == "skipped":
            outcome = "SKIP"
        _criteria[number] = (title, outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcome = _criteria[number]
        terminalreporter.write_line(f"[{outcome}] criterion {number}: {title}")
