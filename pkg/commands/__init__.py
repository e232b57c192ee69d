"""One module per CLI subcommand; each exposes run_<name>_command(config, args)."""
