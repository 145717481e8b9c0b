"""Monte-Carlo harness, scenario configuration and command-line interface."""
