from __future__ import annotations

import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def small_index(tmp_path_factory):
    """A sealed 90-item, 3-type index at D=64: (root, catalog, config, engine)."""
    from mmretrieval.config import from_mapping
    from mmretrieval.pipeline import Engine, build_index, ingest
    from mmretrieval.synthetic import make_catalog

    root = tmp_path_factory.mktemp("small_index")
    cat = make_catalog(root / "cat", 90, n_duplicates=6, seed=11)
    cfg = from_mapping({"dim": 64, "fsync": False, "index_dir": str(root / "index"), "store_dir": str(root / "store")})
    ingest(cat.path, root / "store", cfg)
    build_index(root / "store", cfg)
    return root, cat, cfg, Engine.open(root / "store", config=cfg)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "ACCEPTANCE_LOG", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
