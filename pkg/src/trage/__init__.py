"""Pre-training and fine-tuning of separate header and payload encoders for traffic classification."""

from __future__ import annotations

__version__ = "0.1.0"
