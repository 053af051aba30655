"""Benchmark harness for windowed stream processing: paced workload generation,
driver-side queues, a reference engine, and latency/throughput measurement."""

__version__ = "0.1.0"
