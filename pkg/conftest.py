import pytest

import settings


def pytest_collection_modifyitems(config, items):
    if settings.RUN_SLOW:
        return
    skip_slow = pytest.mark.skip(reason="set KPZLAB_RUN_SLOW=1 to run acceptance checks")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
