"""Planning and latency simulation for MoE inference across a fast,
memory-limited device and a slow, memory-rich one."""

__version__ = "0.1.0"
