"""Shared fixtures: the synthetic city is generated once per test session."""

import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synthcity import build_city


@pytest.fixture(scope="session")
def city(tmp_path_factory):
    """(root, plan) for the 50-building synthetic city with replay archive."""
    root = tmp_path_factory.mktemp("synthcity")
    plan = build_city(root)
    return root, plan


@pytest.fixture(autouse=True)
def _no_ambient_api_key(monkeypatch):
    monkeypatch.delenv("SV_API_KEY", raising=False)
