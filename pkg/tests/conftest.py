import os

import pytest


def pytest_collection_modifyitems(config, items):
    if os.environ.get("BG_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="teste longo: defina BG_RUN_SLOW=1 para executar")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
