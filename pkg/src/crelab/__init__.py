"""Continual relation extraction lab: a small from-scratch encoder, two-stage
fast-adaption / balanced-tuning training, and the diagnostics used to study it."""

__version__ = "0.1.0"
