"""Reinforcement-learning sharding agent: environment, V-trace, policy and training loop."""
