"""Application name and version, shared by the CLI and run summaries."""

APP_METADATA = {
    "name": "SelectaFlow",
    "version": "0.3.0",
    "description": "Iteratively regularized stochastic mirror descent for bilevel selection problems",
    "license": "GPL v3",
}
