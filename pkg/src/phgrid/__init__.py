"""Topology-aware graph reinforcement learning for distribution-network outage management."""
