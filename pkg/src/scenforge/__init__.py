"""Scenario database tooling and closed-loop 2D driving simulation."""
