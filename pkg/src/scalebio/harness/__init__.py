"""Command-line driver, configuration and preset experiments."""
