"""Model assembly, data, training, inference, benchmarking and the command line."""
