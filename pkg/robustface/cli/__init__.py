"""
CLI subpackage for robustface.

- config.py: run configuration defaults, merging and validation; status output
- parser.py: Argparse definitions
- commands.py: The synth, train, evaluate and attack subcommands
- main.py: The main entry point for the CLI
"""
