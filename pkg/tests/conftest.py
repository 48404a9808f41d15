import pytest
import torch

from condaseg.config import smoke_config
from condaseg.data import AcquisitionError, build_dataset, data_root, mnist_arrays

TINY = 200


@pytest.fixture(scope="session")
def mnist_root():
    root = data_root() / "raw" / "mnist"
    try:
        mnist_arrays("test", root)
    except AcquisitionError as exc:
        pytest.skip(f"MNIST unavailable: {exc}")
    return root


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory, mnist_root):
    """All three datasets, every split capped at 200 samples."""
    root = tmp_path_factory.mktemp("data")
    for name in ("mnist", "mnist_m", "mnist_thin"):
        build_dataset(name, out=root, limit=TINY, mnist_root=mnist_root)
    return root


def tiny_config(name, data, out, **changes):
    cfg = smoke_config(name, str(out))
    cfg.data_root = str(data)
    cfg.train_limit, cfg.val_limit, cfg.target_limit, cfg.test_limit = 32, 16, 32, 32
    for k, v in changes.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(autouse=True)
def _restore_torch_rng():
    state = torch.get_rng_state()
    yield
    torch.set_rng_state(state)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture()
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    def skip(number, reason):
        line = f"criterion {number:>2}: SKIP  {reason}"
        lines.append(line)
        print(line)
        pytest.skip(reason)

    record.skip = skip
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
