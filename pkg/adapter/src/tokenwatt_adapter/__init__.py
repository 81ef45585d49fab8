"""Workload driver for OpenAI-compatible streaming endpoints.

Sends prompts to a chat-completions endpoint and reports request lifecycle
events to the measurement harness over its NDJSON socket protocol. The
prefill/decode boundary is approximated by first-token arrival (TTFT), the
standard observable over HTTP, and disclosed as phase_source "ttft-approx".

Deliberately independent of the harness package: the only couplings are
the TPB_* environment variables, the wire protocol, and HTTP.
"""

__version__ = "0.1.0"

from .adapter import AdapterConfig, DriveSummary, drive, main

__all__ = ["AdapterConfig", "DriveSummary", "drive", "main"]
