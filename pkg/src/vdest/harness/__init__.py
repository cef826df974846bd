"""Command line harness: configs, runs, metrics, artifacts."""
