"""Ornstein-Uhlenbeck factor models for intensive longitudinal data."""
