"""
Pytest configuration and shared fixtures for all tests.

This module provides test fixtures that ensure test isolation by:
- Clearing LRU caches (pretrained weights, shared grid data, clusters) between tests
- Using temporary cache directories to avoid polluting the real .cache/
- Restoring the default floating precision after every test

Integration tests (marked with @pytest.mark.integration) skip cache cleaning
to reuse pretrained weights across the slow direction experiments.
"""

import os

import pytest
import torch


def pytest_configure(config):
    """Register custom pytest markers."""
    config.addinivalue_line(
        "markers",
        "unit: Fast unit tests on toy models and fixtures (default)",
    )
    config.addinivalue_line(
        "markers",
        "integration: End-to-end training runs on the synthetic corpus (slow)",
    )
    config.addinivalue_line(
        "markers", "slow: Direction and timing experiments that take minutes"
    )


def _clear_caches():
    from reply_compression.harness import _get_pretrained_weights, shared_data
    from reply_compression.ranker import _leader_clusters

    _get_pretrained_weights.cache_clear()
    shared_data.cache_clear()
    _leader_clusters.cache_clear()


@pytest.fixture(autouse=True)
def restore_precision():
    previous = torch.get_default_dtype()
    yield
    torch.set_default_dtype(previous)


@pytest.fixture(autouse=True)
def clean_test_environment(request, tmp_path, monkeypatch):
    """
    Automatically applied to unit tests to ensure test isolation.

    Integration tests skip this to reuse the real pretrained-weights cache.
    """
    if "integration" in request.keywords:
        yield
        return

    # 1. Clear the LRU caches before the test starts
    _clear_caches()

    # 2. Setup temporary cache directory
    temp_cache_dir = tmp_path / "test_cache"
    temp_cache_dir.mkdir(exist_ok=True)

    # 3. Patch os.path.join
    original_join = os.path.join

    def patched_join(path, *paths):
        """Redirect paths starting with .cache to temp directory"""
        if path == ".cache":
            return original_join(str(temp_cache_dir), *paths)
        return original_join(path, *paths)

    monkeypatch.setattr("reply_compression.harness.os.path.join", patched_join)

    # 4. Patch os.makedirs
    original_makedirs = os.makedirs

    def patched_makedirs(name, mode=0o777, exist_ok=False):
        """Redirect creation of .cache directory to temp directory"""
        if name == ".cache":
            name = str(temp_cache_dir)
        return original_makedirs(name, mode=mode, exist_ok=exist_ok)

    monkeypatch.setattr("reply_compression.harness.os.makedirs", patched_makedirs)

    yield temp_cache_dir

    # 5. Cleanup: Clear LRU caches again after test
    _clear_caches()


@pytest.fixture
def float64():
    """Runs a test in test64 precision."""
    from reply_compression.tensor import use_precision

    with use_precision("test64"):
        yield
