# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: Apache-2.0

"""Tests for mpnn_mcp_server.tools.utils, the run-listing time window.

Run summaries store ``created_at`` with an explicit UTC offset, while users
often pass naive bounds. A non-UTC host timezone (Asia/Tokyo, +09:00) is
pinned to show naive values are read as UTC, not host-local time.
"""

import time
from datetime import datetime, timedelta, timezone

import pytest

from mpnn_mcp_server.tools.utils import get_time_range, in_time_range

DAY_MS = 24 * 60 * 60 * 1000


@pytest.fixture
def tokyo_tz(monkeypatch):
    monkeypatch.setenv("TZ", "Asia/Tokyo")
    time.tzset()
    yield
    time.tzset()


def test_naive_and_offset_bounds_agree(tokyo_tz):
    naive, _ = get_time_range(None, "2026-03-01T00:00:00", None)
    zulu, _ = get_time_range(None, "2026-03-01T00:00:00Z", None)
    shifted, _ = get_time_range(None, "2026-03-01T09:00:00+09:00", None)
    assert naive == zulu == shifted


def test_naive_end_bound_is_utc(tokyo_tz):
    _, naive = get_time_range(None, None, "2026-03-02T00:00:00")
    _, zulu = get_time_range(None, None, "2026-03-02T00:00:00Z")
    assert naive == zulu


def test_explicit_window_in_milliseconds():
    start_ts, end_ts = get_time_range(None, "2026-03-01T00:00:00Z", "2026-03-02T00:00:00Z")
    assert isinstance(start_ts, int) and isinstance(end_ts, int)
    assert end_ts - start_ts == DAY_MS


def test_no_hours_means_every_run():
    start_ts, end_ts = get_time_range(None)
    assert start_ts == 0
    assert end_ts >= int(datetime(2026, 1, 1, tzinfo=timezone.utc).timestamp() * 1000)


def test_hours_look_back_from_now():
    start_ts, end_ts = get_time_range(6)
    assert end_ts - start_ts == pytest.approx(6 * 60 * 60 * 1000, abs=1000)


def test_in_time_range(tokyo_tz):
    start_ts, end_ts = get_time_range(None, "2026-03-01T00:00:00Z", "2026-03-02T00:00:00Z")
    assert in_time_range("2026-03-01T12:00:00+00:00", start_ts, end_ts)
    # 08:00 in Tokyo is 23:00 UTC the day before
    assert not in_time_range("2026-03-01T08:00:00+09:00", start_ts, end_ts)
    assert in_time_range("2026-03-02T00:00:00", start_ts, end_ts)
    assert not in_time_range(None, start_ts, end_ts)
    assert not in_time_range("", start_ts, end_ts)


def test_recent_summary_is_inside_hours_window():
    created = (datetime.now(timezone.utc) - timedelta(minutes=5)).isoformat()
    old = (datetime.now(timezone.utc) - timedelta(hours=3)).isoformat()
    start_ts, end_ts = get_time_range(1)
    assert in_time_range(created, start_ts, end_ts)
    assert not in_time_range(old, start_ts, end_ts)
