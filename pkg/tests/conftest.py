"""Pytest wiring: shared knowledge-base fixtures built from tests/fixtures."""

import pytest

import support


@pytest.fixture()
def cross_kb():
    return support.build_kb(support.CROSS_CORPUS)


@pytest.fixture()
def linear_kb():
    return support.build_kb(["linear_chain"])
