"""Command-line harness: dataset generation, training, evaluation,
scaling benchmarks, and the gradient-check suite.
"""
