"""Simulation of a hierarchical P2P overlay and baseline topologies for search experiments."""
