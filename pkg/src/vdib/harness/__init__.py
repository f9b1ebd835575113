"""Experiment harness: configs, runners, gradient checks, HTTP service and CLI glue."""
